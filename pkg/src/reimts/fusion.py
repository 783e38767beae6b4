"""Irregularity-aware fusion of a transported global representation into a local one."""
from __future__ import annotations

import torch
from torch import nn

from reimts.types import Representation, RepresentationKind


def mask_global(h: Representation, mask: torch.Tensor) -> Representation:
    """Zero global vectors at padding positions of the lower level.

    ``mask`` is the lower level's ``(B, P, L, V)`` grid.  Temporal rows count
    as observed when any variable is observed in them.  Variable
    representations pass through unchanged.
    """
    if h.kind is RepresentationKind.VARIABLE:
        return h
    if h.kind is RepresentationKind.TEMPORAL:
        gate = (mask.sum(dim=-1) > 0).to(h.data.dtype)
    else:
        gate = mask.to(h.data.dtype)
    if gate.shape != h.data.shape[:-1]:
        raise ValueError(f"mask shape {tuple(gate.shape)} does not fit representation {tuple(h.data.shape)}")
    return h.replace(h.data * gate.unsqueeze(-1))


class FusionScore(nn.Module):
    """Rectified feed-forward gate; one instance per level boundary.

    ``per_channel=False`` emits one weight per position instead of one per
    hidden channel.
    """

    def __init__(self, hidden_dim: int, per_channel: bool = True, init_range: float = 1e-2):
        super().__init__()
        self.per_channel = per_channel
        self.ff = nn.Linear(hidden_dim, hidden_dim if per_channel else 1)
        nn.init.uniform_(self.ff.weight, -init_range, init_range)
        nn.init.zeros_(self.ff.bias)

    def forward(self, h_imts: torch.Tensor) -> torch.Tensor:
        alpha = torch.relu(self.ff(h_imts))
        return alpha if self.per_channel else alpha.expand_as(h_imts)


def score(params: FusionScore, h_imts: Representation) -> torch.Tensor:
    return params(h_imts.data)


def fuse(local: Representation, h_imts: Representation, alpha: torch.Tensor) -> Representation:
    if local.kind is not h_imts.kind:
        raise ValueError(f"cannot fuse {h_imts.kind.value} into {local.kind.value}")
    if local.data.shape != h_imts.data.shape or alpha.shape != local.data.shape:
        raise ValueError(
            f"shape mismatch: local {tuple(local.data.shape)}, global {tuple(h_imts.data.shape)}, "
            f"alpha {tuple(alpha.shape)}"
        )
    return local.replace(local.data + alpha * h_imts.data)
