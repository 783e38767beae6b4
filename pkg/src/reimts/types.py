"""Data model shared by every stage of the pipeline.

Samples are kept as sparse observation tuples until they are aligned into
per-variable, front-packed grids.  Grids never share a time axis across
variables: each (slot, variable) cell carries its own timestamp.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Hashable, Optional, Sequence

import numpy as np

from reimts import kernels


class RepresentationKind(str, enum.Enum):
    TEMPORAL = "temporal"
    VARIABLE = "variable"
    OBSERVATION = "observation"


@dataclass(frozen=True)
class ObservationTuple:
    timestamp: float
    value: float
    variable_id: int


@dataclass(frozen=True)
class RawSample:
    """A finite set of observation tuples over ``(0, total_span]``.

    Observations are held column-wise for speed; ``tuples()`` yields them as
    ``ObservationTuple`` objects.
    """

    timestamps: np.ndarray
    values: np.ndarray
    variable_ids: np.ndarray
    total_span: float
    num_variables: int
    sample_id: Hashable = 0

    def __post_init__(self):
        t = np.ascontiguousarray(self.timestamps, dtype=np.float64)
        z = np.ascontiguousarray(self.values, dtype=np.float64)
        v = np.ascontiguousarray(self.variable_ids, dtype=np.int64)
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "values", z)
        object.__setattr__(self, "variable_ids", v)
        for arr in (t, z, v):
            arr.flags.writeable = False
        if not (t.ndim == z.ndim == v.ndim == 1 and len(t) == len(z) == len(v)):
            raise ValueError(f"sample {self.sample_id!r}: column lengths differ")
        if self.total_span <= 0:
            raise ValueError(f"sample {self.sample_id!r}: total_span must be positive")
        if self.num_variables <= 0:
            raise ValueError(f"sample {self.sample_id!r}: num_variables must be positive")
        if len(t) == 0:
            raise ValueError(f"sample {self.sample_id!r} has no observations")
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(z)):
            raise ValueError(f"sample {self.sample_id!r}: non-finite timestamp or value")
        if t.min() < 0 or t.max() > self.total_span:
            raise ValueError(
                f"sample {self.sample_id!r}: timestamps must lie in [0, {self.total_span}]"
            )
        if v.min() < 0 or v.max() >= self.num_variables:
            raise ValueError(
                f"sample {self.sample_id!r}: variable ids must lie in [0, {self.num_variables})"
            )

    @classmethod
    def from_tuples(
        cls,
        observations: Sequence[ObservationTuple | tuple],
        total_span: float,
        num_variables: int,
        sample_id: Hashable = 0,
    ) -> "RawSample":
        obs = [o if isinstance(o, ObservationTuple) else ObservationTuple(*o) for o in observations]
        return cls(
            timestamps=np.array([o.timestamp for o in obs], dtype=np.float64),
            values=np.array([o.value for o in obs], dtype=np.float64),
            variable_ids=np.array([o.variable_id for o in obs], dtype=np.int64),
            total_span=total_span,
            num_variables=num_variables,
            sample_id=sample_id,
        )

    def __len__(self) -> int:
        return len(self.timestamps)

    def tuples(self) -> list[ObservationTuple]:
        return [
            ObservationTuple(float(t), float(z), int(v))
            for t, z, v in zip(self.timestamps, self.values, self.variable_ids)
        ]


@dataclass(frozen=True)
class AlignedSample:
    """Zero-padded grids of shape ``(P, L, V)``.

    Level 1 has ``P == 1``; the leading axis is always present so every level
    is handled by the same code.  Column ``[k, :, v]`` holds variable ``v``'s
    observations in subsample ``k``, sorted by time and packed to the front.
    """

    values: np.ndarray
    mask: np.ndarray
    timestamps: np.ndarray
    scale_level: int = 1

    def __post_init__(self):
        if not (self.values.shape == self.mask.shape == self.timestamps.shape):
            raise ValueError("values, mask and timestamps must share one shape")
        if self.values.ndim != 3:
            raise ValueError("aligned grids must have shape (P, L, V)")
        for arr in (self.values, self.mask, self.timestamps):
            arr.flags.writeable = False

    @property
    def num_subsamples(self) -> int:
        return self.values.shape[0]

    @property
    def max_len(self) -> int:
        return self.values.shape[1]

    @property
    def num_variables(self) -> int:
        return self.values.shape[2]

    def observations(self) -> list[tuple[float, float, int]]:
        """(timestamp, value, variable_id) at every mask=1 slot."""
        k, l, v = np.nonzero(self.mask)
        return [
            (float(self.timestamps[a, b, c]), float(self.values[a, b, c]), int(c))
            for a, b, c in zip(k, l, v)
        ]

    def check_invariants(self) -> None:
        if np.any(self.values[self.mask == 0] != 0) or np.any(self.timestamps[self.mask == 0] != 0):
            raise AssertionError("padding slots must be exactly zero")
        counts = self.mask.sum(axis=1)
        L = self.max_len
        packed = np.arange(L)[None, :, None] < counts[:, None, :]
        if not np.array_equal(packed, self.mask.astype(bool)):
            raise AssertionError("observed slots must be packed before padding")
        t = np.where(self.mask == 1, self.timestamps, np.inf)
        if np.any(t[:, 1:] < t[:, :-1]):
            raise AssertionError("observed slots must be sorted by timestamp")


@dataclass(frozen=True)
class ScaleStack:
    """Time periods ``[T1, T2, ..., TN]``; each divides the one above it."""

    periods: tuple[float, ...]

    def __post_init__(self):
        periods = tuple(float(p) for p in self.periods)
        object.__setattr__(self, "periods", periods)
        if not periods:
            raise ValueError("a scale stack needs at least one period")
        if any(p <= 0 for p in periods):
            raise ValueError("time periods must be positive")
        for upper, lower in zip(periods, periods[1:]):
            if lower >= upper:
                raise ValueError(f"time periods must strictly decrease, got {periods}")
            ratio = upper / lower
            if not math.isclose(ratio, round(ratio), rel_tol=0, abs_tol=1e-9):
                raise ValueError(f"period {lower} does not divide {upper}")

    @property
    def levels(self) -> int:
        return len(self.periods)

    @property
    def total_span(self) -> float:
        return self.periods[0]

    def num_subsamples(self, level: int) -> int:
        """P at a 1-based scale level."""
        return int(round(self.periods[0] / self.periods[level - 1]))

    @property
    def subsample_counts(self) -> list[int]:
        return [self.num_subsamples(n) for n in range(1, self.levels + 1)]

    def interval(self, level: int, k: int) -> tuple[float, float]:
        """Left-open interval of the 1-based ``k``-th subsample at ``level``."""
        T = self.periods[level - 1]
        return T * (k - 1), T * k


_REP_RANK = {
    RepresentationKind.TEMPORAL: 3,
    RepresentationKind.VARIABLE: 3,
    RepresentationKind.OBSERVATION: 4,
}


@dataclass
class Representation:
    """A latent tensor tagged with its kind and scale level.

    ``data`` carries a leading batch axis in model code: temporal
    ``(B, P, L, D)``, variable ``(B, P, V, D)``, observation ``(B, P, L, V, D)``.
    """

    kind: RepresentationKind
    data: "object"
    scale_level: int

    def __post_init__(self):
        self.kind = RepresentationKind(self.kind)
        if self.data.ndim != _REP_RANK[self.kind] + 1:
            raise ValueError(
                f"{self.kind.value} representation needs {_REP_RANK[self.kind] + 1} axes, "
                f"got shape {tuple(self.data.shape)}"
            )

    @property
    def hidden_dim(self) -> int:
        return self.data.shape[-1]

    def replace(self, data) -> "Representation":
        return Representation(self.kind, data, self.scale_level)


@dataclass(frozen=True)
class ForecastQuery:
    query_timestamps: np.ndarray
    query_mask: np.ndarray
    lookback_span: float
    horizon_span: float
    truth_values: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.query_timestamps.shape != self.query_mask.shape:
            raise ValueError("query timestamps and mask must share one shape")
        on = self.query_mask == 1
        t = self.query_timestamps[on]
        if np.any(t <= self.lookback_span) or np.any(t > self.lookback_span + self.horizon_span):
            raise ValueError("query timestamps must lie in the forecast horizon")
        if self.truth_values is not None:
            if self.truth_values.shape != self.query_mask.shape:
                raise ValueError("truth values must match the query grid")
            if np.any(self.truth_values[~on] != 0):
                raise ValueError("truth values must be zero outside the query mask")

    @property
    def num_targets(self) -> int:
        return int(self.query_mask.sum())


def align_and_pad(sample: RawSample) -> AlignedSample:
    """Align a raw sample into level-1 grids of shape ``(1, L, V)``."""
    if len(sample) == 0:
        raise ValueError(f"sample {sample.sample_id!r} has no observations")
    order = np.lexsort((sample.timestamps, sample.variable_ids))
    t = sample.timestamps[order]
    v = sample.variable_ids[order]
    dup = (np.diff(t) == 0) & (np.diff(v) == 0)
    if np.any(dup):
        i = int(np.argmax(dup))
        raise ValueError(
            f"sample {sample.sample_id!r} has duplicate observations of variable "
            f"{int(v[i])} at t={t[i]}"
        )
    buckets = np.zeros(len(sample), dtype=np.int64)
    return pack(sample.timestamps, sample.values, sample.variable_ids, buckets, 1, sample.num_variables)


def pack(timestamps, values, variable_ids, buckets, num_buckets, num_variables, scale_level=1) -> AlignedSample:
    """Scatter observations into front-packed ``(P, L, V)`` grids by bucket."""
    slots, L = kernels.pack_slots(
        np.ascontiguousarray(timestamps, dtype=np.float64),
        np.ascontiguousarray(variable_ids, dtype=np.int64),
        np.ascontiguousarray(buckets, dtype=np.int64),
        int(num_buckets),
        int(num_variables),
    )
    shape = (int(num_buckets), max(int(L), 1), int(num_variables))
    vals = np.zeros(shape)
    mask = np.zeros(shape, dtype=np.int8)
    ts = np.zeros(shape)
    vals[buckets, slots, variable_ids] = values
    mask[buckets, slots, variable_ids] = 1
    ts[buckets, slots, variable_ids] = timestamps
    return AlignedSample(vals, mask, ts, scale_level)


@dataclass(frozen=True)
class ObservationIndex:
    """Flat per-observation view of an aligned sample (mask=1 slots only)."""

    timestamps: np.ndarray
    values: np.ndarray
    variable_ids: np.ndarray
    buckets: np.ndarray
    slots: np.ndarray = field(repr=False)

    @classmethod
    def from_aligned(cls, aligned: AlignedSample) -> "ObservationIndex":
        k, l, v = np.nonzero(aligned.mask)
        return cls(aligned.timestamps[k, l, v], aligned.values[k, l, v], v, k, l)
