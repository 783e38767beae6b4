"""Time-period splitting of aligned samples and transport of representations.

Observations are bucketed into the left-open intervals ``(T(k-1), Tk]`` of a
scale level, with ``t = 0`` joining the first interval.  Timestamps are
carried through untouched; only slot positions change.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch

from reimts import kernels
from reimts.types import (
    AlignedSample,
    ObservationIndex,
    Representation,
    RepresentationKind,
    ScaleStack,
    pack,
)


class SplitMode(str, enum.Enum):
    TIME = "time"  # time-period intervals
    COUNT = "count"  # equal observation counts per variable (rp_split ablation)
    NONE = "none"  # no splitting, every level sees the whole sample (rp_sample ablation)


def _buckets(obs: ObservationIndex, stack: ScaleStack, level: int, mode: SplitMode, num_variables: int):
    P = stack.num_subsamples(level)
    if mode is SplitMode.NONE or P == 1:
        return np.zeros(len(obs.timestamps), dtype=np.int64), 1
    if mode is SplitMode.TIME:
        return kernels.time_buckets(obs.timestamps, stack.periods[level - 1], P), P
    return kernels.count_buckets(obs.timestamps, obs.variable_ids, P, num_variables), P


def split_sample(
    aligned: AlignedSample, stack: ScaleStack, target_level: int, mode: SplitMode | str = SplitMode.TIME
) -> AlignedSample:
    """Re-bucket every observation of ``aligned`` into ``target_level`` subsamples.

    Works from any source level: grids are flattened back to observations and
    repacked, so ``split(split(S, n), n + 1) == split(S, n + 1)``.
    """
    mode = SplitMode(mode)
    if not 1 <= target_level <= stack.levels:
        raise ValueError(f"target level {target_level} outside 1..{stack.levels}")
    obs = ObservationIndex.from_aligned(aligned)
    buckets, P = _buckets(obs, stack, target_level, mode, aligned.num_variables)
    return pack(obs.timestamps, obs.values, obs.variable_ids, buckets, P, aligned.num_variables, target_level)


def split_mask(
    mask: np.ndarray, timestamps: np.ndarray, stack: ScaleStack, target_level: int,
    mode: SplitMode | str = SplitMode.TIME,
) -> np.ndarray:
    """Split a mask grid exactly as ``split_sample`` splits the values."""
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[None]
        timestamps = np.asarray(timestamps)[None]
    aligned = AlignedSample(
        mask.astype(np.float64), mask.astype(np.int8), np.where(mask == 1, timestamps, 0.0)
    )
    return split_sample(aligned, stack, target_level, mode).mask


def source_slots(upper: AlignedSample, lower: AlignedSample) -> tuple[np.ndarray, np.ndarray]:
    """For every lower-level slot, the upper-level ``(k, l)`` holding the same observation.

    Observations are matched on their ``(variable, timestamp)`` key.  Padding
    slots get ``-1``.
    """
    up = ObservationIndex.from_aligned(upper)
    lo = ObservationIndex.from_aligned(lower)
    if len(up.timestamps) != len(lo.timestamps):
        raise ValueError("levels do not hold the same observations")
    ou = np.lexsort((up.timestamps, up.variable_ids))
    ol = np.lexsort((lo.timestamps, lo.variable_ids))
    if not (
        np.array_equal(up.variable_ids[ou], lo.variable_ids[ol])
        and np.array_equal(up.timestamps[ou], lo.timestamps[ol])
    ):
        raise ValueError("levels do not hold the same observations")
    src_k = np.full(lower.mask.shape, -1, dtype=np.int64)
    src_l = np.full(lower.mask.shape, -1, dtype=np.int64)
    at = (lo.buckets[ol], lo.slots[ol], lo.variable_ids[ol])
    src_k[at] = up.buckets[ou]
    src_l[at] = up.slots[ou]
    return src_k, src_l


@dataclass(frozen=True)
class MultiScaleSample:
    """All levels of one sample plus the slot maps that connect them.

    ``to_next[n]`` maps level ``n + 2`` slots to level ``n + 1`` slots (0-based
    list index); ``to_lowest[n]`` maps level-N slots to level ``n + 1``.
    """

    levels: list[AlignedSample]
    to_next: list[tuple[np.ndarray, np.ndarray]]
    to_lowest: list[tuple[np.ndarray, np.ndarray]]


def build_levels(aligned: AlignedSample, stack: ScaleStack, mode: SplitMode | str = SplitMode.TIME) -> MultiScaleSample:
    mode = SplitMode(mode)
    levels = [aligned if aligned.scale_level == 1 and aligned.num_subsamples == 1 else split_sample(aligned, stack, 1, mode)]
    for n in range(2, stack.levels + 1):
        levels.append(split_sample(levels[-1], stack, n, mode))
    to_next = [source_slots(a, b) for a, b in zip(levels, levels[1:])]
    to_lowest = [source_slots(a, levels[-1]) for a in levels]
    return MultiScaleSample(levels, to_next, to_lowest)


# -- representation transport (batched torch) --------------------------------


def flat_source_index(src_k: torch.Tensor, src_l: torch.Tensor, upper_len: int) -> torch.Tensor:
    return torch.where(src_k >= 0, src_k * upper_len + src_l, torch.full_like(src_k, -1))


def gather_slots(data: torch.Tensor, index: torch.Tensor, observation: bool) -> torch.Tensor:
    """Gather per-(slot, variable) vectors from the upper level.

    ``data`` is ``(B, P, L, D)`` or ``(B, P, L, V, D)``; ``index`` is the flat
    upper slot index ``k * L + l`` of shape ``(B, P', L', V)``, ``-1`` on padding.
    Returns ``(B, P', L', V, D)`` with zeros at padding.
    """
    B = data.shape[0]
    D = data.shape[-1]
    _, P2, L2, V = index.shape
    valid = index >= 0
    idx = index.clamp(min=0)
    if observation:
        src = data.reshape(B, -1, D)
        idx = idx * V + torch.arange(V, device=idx.device)
    else:
        src = data.reshape(B, -1, D)
    flat = idx.reshape(B, -1, 1).expand(-1, -1, D)
    out = torch.gather(src, 1, flat).reshape(B, P2, L2, V, D)
    return out * valid.unsqueeze(-1).to(out.dtype)


def transport(rep: Representation, index: torch.Tensor | None, lower_mask: torch.Tensor, factor: int, level: int) -> Representation:
    """Bring ``rep`` to the geometry of a lower level.

    Temporal and observation kinds are re-bucketed through ``index``; temporal
    rows average the source vectors of the variables observed in that row.
    The variable kind repeats each subsample block ``factor`` times in order.
    """
    if rep.kind is RepresentationKind.VARIABLE:
        data = rep.data if factor == 1 else torch.repeat_interleave(rep.data, factor, dim=1)
        return Representation(rep.kind, data, level)
    observation = rep.kind is RepresentationKind.OBSERVATION
    gathered = gather_slots(rep.data, index, observation)
    if observation:
        return Representation(rep.kind, gathered, level)
    m = lower_mask.to(gathered.dtype).unsqueeze(-1)
    count = m.sum(dim=3)
    data = (gathered * m).sum(dim=3) / count.clamp(min=1)
    return Representation(rep.kind, data, level)


def transport_representation(
    rep: Representation, upper: AlignedSample, lower: AlignedSample, stack: ScaleStack | None = None
) -> Representation:
    """Single-sample transport; ``rep.data`` carries a batch axis of size 1."""
    if stack is not None and rep.scale_level >= stack.levels:
        raise ValueError("no lower level")
    factor = lower.num_subsamples // upper.num_subsamples
    if rep.kind is RepresentationKind.VARIABLE:
        return transport(rep, None, None, factor, rep.scale_level + 1)
    src_k, src_l = source_slots(upper, lower)
    index = flat_source_index(torch.from_numpy(src_k), torch.from_numpy(src_l), upper.max_len)[None]
    mask = torch.from_numpy(lower.mask.astype(np.int64))[None]
    return transport(rep, index, mask, factor, rep.scale_level + 1)
