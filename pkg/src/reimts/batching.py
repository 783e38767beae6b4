"""Collating prepared samples into padded torch batches."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from reimts.splitting import MultiScaleSample, flat_source_index
from reimts.types import ForecastQuery


@dataclass
class LevelBatch:
    values: torch.Tensor  # (B, P, L, V)
    mask: torch.Tensor  # (B, P, L, V), same dtype as values
    timestamps: torch.Tensor  # (B, P, L, V)
    level: int

    @property
    def shape(self):
        return tuple(self.values.shape)

    def replace(self, **kw) -> "LevelBatch":
        d = dict(values=self.values, mask=self.mask, timestamps=self.timestamps, level=self.level)
        d.update(kw)
        return LevelBatch(**d)


@dataclass
class QueryBatch:
    timestamps: torch.Tensor  # (B, LQ, V)
    mask: torch.Tensor
    truth: Optional[torch.Tensor] = None


@dataclass
class Batch:
    levels: list[LevelBatch]
    to_next: list[torch.Tensor]  # flat upper-slot index per lower slot, -1 on padding
    to_lowest: list[torch.Tensor]
    query: QueryBatch

    @property
    def size(self) -> int:
        return self.levels[0].values.shape[0]

    def to(self, dtype: torch.dtype) -> "Batch":
        lv = [
            lb.replace(values=lb.values.to(dtype), mask=lb.mask.to(dtype), timestamps=lb.timestamps.to(dtype))
            for lb in self.levels
        ]
        q = QueryBatch(
            self.query.timestamps.to(dtype),
            self.query.mask.to(dtype),
            None if self.query.truth is None else self.query.truth.to(dtype),
        )
        return Batch(lv, self.to_next, self.to_lowest, q)


def _pad(arrays: Sequence[np.ndarray], fill, dtype) -> np.ndarray:
    shape = tuple(max(a.shape[i] for a in arrays) for i in range(arrays[0].ndim))
    out = np.full((len(arrays),) + shape, fill, dtype=dtype)
    for i, a in enumerate(arrays):
        out[(i,) + tuple(slice(0, s) for s in a.shape)] = a
    return out


def collate(
    samples: Sequence[MultiScaleSample], queries: Sequence[ForecastQuery], dtype: torch.dtype = torch.float32
) -> Batch:
    N = len(samples[0].levels)
    levels = []
    lens = []
    for n in range(N):
        grids = [s.levels[n] for s in samples]
        vals = _pad([g.values for g in grids], 0.0, np.float64)
        levels.append(
            LevelBatch(
                values=torch.from_numpy(vals).to(dtype),
                mask=torch.from_numpy(_pad([g.mask for g in grids], 0, np.int8)).to(dtype),
                timestamps=torch.from_numpy(_pad([g.timestamps for g in grids], 0.0, np.float64)).to(dtype),
                level=n + 1,
            )
        )
        lens.append(vals.shape[2])

    def index(pairs, upper_len):
        k = torch.from_numpy(_pad([p[0] for p in pairs], -1, np.int64))
        l = torch.from_numpy(_pad([p[1] for p in pairs], -1, np.int64))
        return flat_source_index(k, l, upper_len)

    to_next = [index([s.to_next[n] for s in samples], lens[n]) for n in range(N - 1)]
    to_lowest = [index([s.to_lowest[n] for s in samples], lens[n]) for n in range(N)]

    qt = _pad([q.query_timestamps for q in queries], 0.0, np.float64)
    qm = _pad([q.query_mask for q in queries], 0, np.int8)
    truth = None
    if all(q.truth_values is not None for q in queries):
        truth = torch.from_numpy(_pad([q.truth_values for q in queries], 0.0, np.float64)).to(dtype)
    query = QueryBatch(torch.from_numpy(qt).to(dtype), torch.from_numpy(qm).to(dtype), truth)
    return Batch(levels, to_next, to_lowest, query)
