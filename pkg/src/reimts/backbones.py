"""Reference encoder/decoder backbones, one per representation kind.

Each backbone owns an independent encoder per scale level and a single
decoder.  They are deliberately small stand-ins for GRU-D, Raindrop-style and
set-attention models; the wrapper is what is being exercised.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from reimts.batching import LevelBatch, QueryBatch
from reimts.types import Representation, RepresentationKind


@dataclass(frozen=True)
class BackboneSpec:
    kind: RepresentationKind
    num_variables: int
    hidden_dim: int = 32
    num_layers: int = 1
    num_levels: int = 1
    time_scale: float = 1.0  # timestamps are divided by this before encoding

    def __post_init__(self):
        object.__setattr__(self, "kind", RepresentationKind(self.kind))
        if self.hidden_dim < 1 or self.num_layers < 1 or self.num_levels < 1:
            raise ValueError("hidden_dim, num_layers and num_levels must be positive")


class TimeEncoding(nn.Module):
    """Fixed sinusoidal features of ``t / time_scale``; no parameters."""

    def __init__(self, time_scale: float, num_freqs: int = 4):
        super().__init__()
        self.time_scale = float(time_scale)
        self.register_buffer("freqs", 2 * math.pi * 2.0 ** torch.arange(num_freqs, dtype=torch.float64), persistent=False)
        self.dim = 1 + 2 * num_freqs

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        x = (t / self.time_scale).unsqueeze(-1)
        ang = x * self.freqs.to(t.dtype)
        return torch.cat([x, torch.sin(ang), torch.cos(ang)], dim=-1)


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax over ``mask``-ed entries; all-masked rows give all-zero weights."""
    keep = mask > 0
    filled = scores.masked_fill(~keep, torch.finfo(scores.dtype).min)
    return torch.softmax(filled, dim=dim) * keep.to(scores.dtype)


def _mlp(inp: int, hidden: int, out: int, layers: int) -> nn.Sequential:
    mods: list[nn.Module] = []
    width = inp
    for _ in range(layers):
        mods += [nn.Linear(width, hidden), nn.ReLU()]
        width = hidden
    mods.append(nn.Linear(width, out))
    return nn.Sequential(*mods)


class QueryHead(nn.Module):
    """Attend from query-time features over tokens, then map to predictions.

    ``tokens`` is ``(B, ..., T, D)`` with matching ``token_mask`` ``(B, ..., T)``
    and ``token_time`` ``(B, ..., T, E)``; queries are ``(B, ..., Q, E)``.
    """

    def __init__(self, hidden: int, time_dim: int, out: int, layers: int = 1):
        super().__init__()
        self.q = nn.Linear(time_dim, hidden)
        self.k = nn.Linear(hidden + time_dim, hidden)
        self.v = nn.Linear(hidden, hidden)
        self.out = _mlp(hidden + time_dim, hidden, out, layers)
        self.scale = 1.0 / math.sqrt(hidden)

    def forward(self, tokens, token_mask, token_time, query_time):
        keys = self.k(torch.cat([tokens, token_time], dim=-1))
        scores = self.q(query_time) @ keys.transpose(-1, -2) * self.scale
        w = masked_softmax(scores, token_mask.unsqueeze(-2))
        ctx = w @ self.v(tokens)
        return self.out(torch.cat([ctx, query_time], dim=-1))


class Backbone(nn.Module):
    kind: RepresentationKind

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        if spec.kind is not self.kind:
            raise ValueError(f"{type(self).__name__} is a {self.kind.value} backbone, got a {spec.kind.value} BackboneSpec")
        self.spec = spec
        self.time_enc = TimeEncoding(spec.time_scale)

    def _check(self, batch: LevelBatch):
        if batch.values.ndim != 4 or batch.values.shape[-1] != self.spec.num_variables:
            raise ValueError(
                f"expected (B, P, L, {self.spec.num_variables}) grids, got {tuple(batch.values.shape)}"
            )
        if not 1 <= batch.level <= self.spec.num_levels:
            raise ValueError(f"no encoder for scale level {batch.level}")

    def encode(self, batch: LevelBatch, query: QueryBatch | None = None) -> Representation:
        self._check(batch)
        return Representation(self.kind, self._encode(batch), batch.level)

    def decode(self, rep: Representation, batch: LevelBatch, query: QueryBatch) -> torch.Tensor:
        """Predictions of shape ``(B, LQ, V)``; ``batch`` is the level the rep lives on."""
        if rep.kind is not self.kind:
            raise ValueError(f"cannot decode a {rep.kind.value} representation with a {self.kind.value} decoder")
        if rep.scale_level != batch.level:
            raise ValueError(f"representation at level {rep.scale_level}, grids at level {batch.level}")
        return self._decode(rep.data, batch, query)

    def encoder_parameters(self, level: int) -> list[nn.Parameter]:
        """Parameters of the encoder owned by one 1-based scale level."""
        if not 1 <= level <= self.spec.num_levels:
            raise ValueError(f"level must lie in [1, {self.spec.num_levels}], got {level}")
        out = []
        for mod in self.children():
            if isinstance(mod, (nn.ModuleList, nn.ParameterList)):
                item = mod[level - 1]
                out += [item] if isinstance(item, nn.Parameter) else list(item.parameters())
        return out

    def _row_time(self, batch: LevelBatch) -> torch.Tensor:
        """Masked mean time encoding of each slot row: ``(B, P, L, E)``."""
        m = batch.mask.unsqueeze(-1)
        te = self.time_enc(batch.timestamps) * m
        return te.sum(dim=3) / m.sum(dim=3).clamp(min=1)


class TemporalRecurrent(Backbone):
    """GRU over slot rows with last-observation carry-forward of padding."""

    kind = RepresentationKind.TEMPORAL

    def __init__(self, spec: BackboneSpec):
        super().__init__(spec)
        V, D = spec.num_variables, spec.hidden_dim
        self.cells = nn.ModuleList(nn.GRUCell(2 * V + self.time_enc.dim, D) for _ in range(spec.num_levels))
        self.h0 = nn.ParameterList(nn.Parameter(torch.zeros(D)) for _ in range(spec.num_levels))
        self.head = QueryHead(D, self.time_enc.dim, V, spec.num_layers)

    def _encode(self, batch: LevelBatch) -> torch.Tensor:
        cell = self.cells[batch.level - 1]
        h0 = self.h0[batch.level - 1]
        B, P, L, V = batch.values.shape
        m = batch.mask
        count = m.sum(dim=2, keepdim=True).long()  # (B, P, 1, V)
        rows = torch.arange(L, device=m.device).view(1, 1, L, 1)
        last = torch.minimum(rows, (count - 1).clamp(min=0)).expand(B, P, L, V)
        filled = torch.gather(batch.values, 2, last) * (count > 0).to(m.dtype)
        x = torch.cat([filled, m, self._row_time(batch)], dim=-1).reshape(B * P, L, -1)
        present = (m.sum(dim=-1) > 0).reshape(B * P, L, 1)
        h = h0.expand(B * P, -1)
        out = []
        for l in range(L):
            h = torch.where(present[:, l], cell(x[:, l], h), h)
            out.append(h)
        return torch.stack(out, dim=1).reshape(B, P, L, -1)

    def _decode(self, data, batch, query):
        B, P, L, D = data.shape
        tokens = data.reshape(B, 1, P * L, D)
        present = (batch.mask.sum(dim=-1) > 0).to(data.dtype).reshape(B, 1, P * L)
        ttime = self._row_time(batch).reshape(B, 1, P * L, -1)
        LQ, V = query.timestamps.shape[1:]
        qt = self.time_enc(query.timestamps).reshape(B, 1, LQ * V, -1)
        out = self.head(tokens, present, ttime, qt).reshape(B, LQ, V, V)
        return torch.diagonal(out, dim1=-2, dim2=-1)


class VariablePool(Backbone):
    """Masked attention pooling over each variable's observations."""

    kind = RepresentationKind.VARIABLE

    def __init__(self, spec: BackboneSpec):
        super().__init__(spec)
        V, D = spec.num_variables, spec.hidden_dim
        E = self.time_enc.dim
        self.inp = nn.ModuleList(nn.Linear(1 + E, D) for _ in range(spec.num_levels))
        self.var_emb = nn.ParameterList(nn.Parameter(0.1 * torch.randn(V, D)) for _ in range(spec.num_levels))
        self.att = nn.ModuleList(nn.Linear(D, 1, bias=False) for _ in range(spec.num_levels))
        self.proj = nn.ModuleList(nn.Linear(D, D) for _ in range(spec.num_levels))
        self.head = QueryHead(D, E, 1, spec.num_layers)

    def _encode(self, batch: LevelBatch) -> torch.Tensor:
        i = batch.level - 1
        x = torch.cat([batch.values.unsqueeze(-1), self.time_enc(batch.timestamps)], dim=-1)
        f = torch.tanh(self.inp[i](x) + self.var_emb[i])  # (B, P, L, V, D)
        w = masked_softmax(self.att[i](f).squeeze(-1), batch.mask, dim=2)
        pooled = (w.unsqueeze(-1) * f).sum(dim=2)  # (B, P, V, D)
        return self.proj[i](pooled) + self.var_emb[i]

    def _decode(self, data, batch, query):
        # tokens per variable are its P subsample vectors
        tokens = data.transpose(1, 2)  # (B, V, P, D)
        m = batch.mask.unsqueeze(-1)
        te = (self.time_enc(batch.timestamps) * m).sum(dim=2) / m.sum(dim=2).clamp(min=1)
        ttime = te.transpose(1, 2)  # (B, V, P, E)
        ones = torch.ones(tokens.shape[:-1], dtype=data.dtype, device=data.device)
        qt = self.time_enc(query.timestamps).transpose(1, 2)  # (B, V, LQ, E)
        return self.head(tokens, ones, ttime, qt).squeeze(-1).transpose(1, 2)


class ObservationSet(Backbone):
    """Per-observation embeddings refined by self-attention within a subsample."""

    kind = RepresentationKind.OBSERVATION

    def __init__(self, spec: BackboneSpec):
        super().__init__(spec)
        V, D = spec.num_variables, spec.hidden_dim
        E = self.time_enc.dim
        n = spec.num_levels
        self.inp = nn.ModuleList(nn.Linear(1 + E, D) for _ in range(n))
        self.var_emb = nn.ParameterList(nn.Parameter(0.1 * torch.randn(V, D)) for _ in range(n))
        self.qkv = nn.ModuleList(nn.Linear(D, 3 * D) for _ in range(n))
        self.ff = nn.ModuleList(nn.Sequential(nn.Linear(D, D), nn.ReLU(), nn.Linear(D, D)) for _ in range(n))
        self.head = QueryHead(D, E, 1, spec.num_layers)

    def _encode(self, batch: LevelBatch) -> torch.Tensor:
        i = batch.level - 1
        B, P, L, V = batch.values.shape
        D = self.spec.hidden_dim
        x = torch.cat([batch.values.unsqueeze(-1), self.time_enc(batch.timestamps)], dim=-1)
        f = (self.inp[i](x) + self.var_emb[i]).reshape(B, P, L * V, D)
        m = batch.mask.reshape(B, P, L * V)
        q, k, v = self.qkv[i](f).chunk(3, dim=-1)
        w = masked_softmax(q @ k.transpose(-1, -2) / math.sqrt(D), m.unsqueeze(-2))
        h = f + w @ v
        h = h + self.ff[i](h)
        return (h * m.unsqueeze(-1)).reshape(B, P, L, V, D)

    def _decode(self, data, batch, query):
        m = batch.mask.unsqueeze(-1)
        count = m.sum(dim=2).clamp(min=1)
        pooled = (data * m).sum(dim=2) / count  # (B, P, V, D)
        te = (self.time_enc(batch.timestamps) * m).sum(dim=2) / count
        present = (batch.mask.sum(dim=2) > 0).to(data.dtype)  # (B, P, V)
        qt = self.time_enc(query.timestamps).transpose(1, 2)
        out = self.head(pooled.transpose(1, 2), present.transpose(1, 2), te.transpose(1, 2), qt)
        return out.squeeze(-1).transpose(1, 2)


BACKBONES = {
    RepresentationKind.TEMPORAL: TemporalRecurrent,
    RepresentationKind.VARIABLE: VariablePool,
    RepresentationKind.OBSERVATION: ObservationSet,
}


def build_backbone(spec: BackboneSpec) -> Backbone:
    return BACKBONES[spec.kind](spec)
