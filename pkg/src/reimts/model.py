"""The recursive multi-scale wrapper: split, encode, fuse, transport, decode."""
from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, replace

import torch
from torch import nn

from reimts.backbones import Backbone, BackboneSpec, build_backbone
from reimts.batching import Batch, QueryBatch
from reimts.fusion import FusionScore, fuse, mask_global, score
from reimts.splitting import SplitMode, transport
from reimts.types import Representation, ScaleStack


class DecodeMode(str, enum.Enum):
    CONCAT = "concat"  # decode the projected concatenation of every level
    LOWEST = "lowest"  # decode the lowest level only


class Ablation(str, enum.Enum):
    FULL = "full"
    RP_SAMPLE = "rp_sample"
    RP_SPLIT = "rp_split"
    RP_IARF = "rp_iarf"
    WO_IARF = "wo_iarf"


@dataclass(frozen=True)
class ReimtsConfig:
    stack: ScaleStack
    backbone: BackboneSpec
    decode_mode: DecodeMode = DecodeMode.CONCAT
    ablation: Ablation = Ablation.FULL
    per_channel_alpha: bool = True

    def __post_init__(self):
        object.__setattr__(self, "decode_mode", DecodeMode(self.decode_mode))
        object.__setattr__(self, "ablation", Ablation(self.ablation))
        if self.backbone.num_levels != self.stack.levels:
            object.__setattr__(self, "backbone", replace(self.backbone, num_levels=self.stack.levels))

    @property
    def split_mode(self) -> SplitMode:
        if self.ablation is Ablation.RP_SAMPLE:
            return SplitMode.NONE
        if self.ablation is Ablation.RP_SPLIT:
            return SplitMode.COUNT
        return SplitMode.TIME

    @property
    def effective_decode_mode(self) -> DecodeMode:
        if self.ablation is Ablation.WO_IARF:
            return DecodeMode.CONCAT
        return self.decode_mode

    def to_dict(self) -> dict:
        b = self.backbone
        return {
            "periods": list(self.stack.periods),
            "backbone": b.kind.value,
            "num_variables": b.num_variables,
            "hidden_dim": b.hidden_dim,
            "num_layers": b.num_layers,
            "time_scale": b.time_scale,
            "decode_mode": self.decode_mode.value,
            "ablation": self.ablation.value,
            "per_channel_alpha": self.per_channel_alpha,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReimtsConfig":
        stack = ScaleStack(tuple(d["periods"]))
        spec = BackboneSpec(
            d["backbone"], d["num_variables"], d["hidden_dim"], d["num_layers"], stack.levels, d["time_scale"]
        )
        return cls(stack, spec, d["decode_mode"], d["ablation"], d.get("per_channel_alpha", True))


class ReIMTS(nn.Module):
    def __init__(self, config: ReimtsConfig):
        super().__init__()
        self.config = config
        N, D = config.stack.levels, config.backbone.hidden_dim
        self.backbone: Backbone = build_backbone(config.backbone)
        self.fusion = nn.ModuleList(FusionScore(D, config.per_channel_alpha) for _ in range(N - 1))
        concat = N > 1 and config.effective_decode_mode is DecodeMode.CONCAT
        self.projection = nn.Linear(N * D, D) if concat else None
        self.calls: Counter = Counter()

    @property
    def num_levels(self) -> int:
        return self.config.stack.levels

    def representations(self, batch: Batch) -> list[Representation]:
        """The fused representation of every level, top to bottom."""
        ablation = self.config.ablation
        g = [self._encode(batch, 0)]
        for n in range(1, self.num_levels):
            lower = batch.levels[n]
            factor = lower.values.shape[1] // batch.levels[n - 1].values.shape[1]
            h = transport(g[-1], batch.to_next[n - 1], lower.mask, factor, n + 1)
            e = self._encode(batch, n)
            if ablation is Ablation.WO_IARF:
                g.append(e)
            elif ablation is Ablation.RP_IARF:
                g.append(e.replace(e.data + h.data))
            else:
                self.calls["fuse"] += 1
                h_imts = mask_global(h, lower.mask)
                g.append(fuse(e, h_imts, score(self.fusion[n - 1], h_imts)))
        return g

    def forward(self, batch: Batch) -> torch.Tensor:
        g = self.representations(batch)
        lowest = batch.levels[-1]
        if self.num_levels == 1 or self.config.effective_decode_mode is DecodeMode.LOWEST:
            rep = g[-1]
        else:
            P = lowest.values.shape[1]
            parts = []
            for n, rep in enumerate(g[:-1]):
                factor = P // batch.levels[n].values.shape[1]
                parts.append(transport(rep, batch.to_lowest[n], lowest.mask, factor, self.num_levels).data)
            parts.append(g[-1].data)
            rep = g[-1].replace(self.projection(torch.cat(parts, dim=-1)))
        self.calls["decode"] += 1
        return self.backbone.decode(rep, lowest, batch.query).contiguous()

    def _encode(self, batch: Batch, n: int) -> Representation:
        self.calls["encode"] += 1
        return self.backbone.encode(batch.levels[n], batch.query)


def masked_mse_loss(predictions: torch.Tensor, query: QueryBatch) -> torch.Tensor:
    """Mean squared error over forecast queries only."""
    if query.truth is None:
        raise ValueError("query batch carries no truth values")
    count = query.mask.sum()
    if count <= 0:
        raise ValueError("no forecast targets")
    # a fixed contiguous layout keeps the reduction order, and hence the
    # result, independent of how the prediction tensor happens to be strided
    err = ((predictions - query.truth) * query.mask).contiguous()
    return (err * err).sum() / count
