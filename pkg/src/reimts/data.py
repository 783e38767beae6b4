"""Synthetic corpora, the tuple file format, manifests, windowing and batching."""
from __future__ import annotations

import csv
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from scipy.optimize import brentq

from reimts.batching import Batch, collate
from reimts.splitting import MultiScaleSample, SplitMode, build_levels
from reimts.types import ForecastQuery, RawSample, ScaleStack, align_and_pad

log = logging.getLogger(__name__)

HEADER = ["sample_id", "timestamp", "variable_id", "value"]
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the synthetic generator.

    Each variable arrives as an inhomogeneous Poisson process whose rate
    falls by ``decay`` from the start to the end of the sample.  With
    ``resolution > 0`` arrivals live on the grid ``resolution * j``
    (``j >= 1``), at most one per cell.  Values are two sinusoids per
    variable, plus ``coupling`` times the neighbouring variable's sinusoids,
    plus Gaussian noise.
    """

    num_samples: int = 600
    num_variables: int = 8
    lookback_span: float = 48.0
    horizon_span: float = 12.0
    resolution: float = 0.5
    base_rate: float = 0.5
    rate_spread: float = 0.0
    decay: float = 2.0
    periods: tuple[float, float] = (24.0, 12.0)
    amplitudes: tuple[float, float] = (1.0, 0.5)
    coupling: float = 0.3
    noise: float = 0.1
    seed: int = 0
    name: str = "synthetic"
    unit: str = "h"

    def __post_init__(self):
        object.__setattr__(self, "periods", tuple(float(p) for p in self.periods))
        object.__setattr__(self, "amplitudes", tuple(float(a) for a in self.amplitudes))
        if self.num_samples < 1 or self.num_variables < 1:
            raise ValueError("num_samples and num_variables must be positive")
        if self.lookback_span <= 0 or self.horizon_span <= 0:
            raise ValueError("lookback and horizon spans must be positive")
        if self.base_rate <= 0 or self.decay <= 0 or any(p <= 0 for p in self.periods):
            raise ValueError("rates, decay and periods must be positive")
        if self.resolution < 0 or self.noise < 0 or self.rate_spread < 0:
            raise ValueError("resolution, noise and rate_spread must be non-negative")

    @property
    def total_span(self) -> float:
        return self.lookback_span + self.horizon_span

    def variable_rates(self) -> np.ndarray:
        """Per-variable rate multipliers, fixed by the seed, mean one."""
        if self.rate_spread == 0:
            return np.ones(self.num_variables)
        r = np.random.default_rng([self.seed, 2**31 - 1]).lognormal(0.0, self.rate_spread, self.num_variables)
        return r / r.mean()

    def rate(self, t: np.ndarray, multiplier: float = 1.0) -> np.ndarray:
        return self.base_rate * multiplier * self.decay ** (-np.asarray(t) / self.total_span)

    def grid(self) -> np.ndarray:
        cells = int(round(self.total_span / self.resolution))
        return self.resolution * np.arange(1, cells + 1)

    def expected_observations(self) -> float:
        """Expected observation count of one sample (both windows)."""
        total = 0.0
        for m in self.variable_rates():
            if self.resolution > 0:
                total += float(np.sum(1 - np.exp(-self.rate(self.grid(), m) * self.resolution)))
            else:
                total += float(_integrated_rate(self, m, self.total_span))
        return total


def _integrated_rate(spec: SyntheticSpec, multiplier: float, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    a = spec.base_rate * multiplier
    if spec.decay == 1.0:
        return a * t
    c = math.log(spec.decay) / spec.total_span
    return a * (1 - np.exp(-c * t)) / c


def calibrate_base_rate(spec: SyntheticSpec, target: float) -> SyntheticSpec:
    """Copy of ``spec`` whose expected observations per sample equal ``target``."""
    def gap(log_rate):
        return replace(spec, base_rate=math.exp(log_rate)).expected_observations() - target

    return replace(spec, base_rate=math.exp(brentq(gap, -20.0, 10.0, xtol=1e-12)))


PRESETS = {
    # 36 variables, hourly grid over 48 hours, ~308.6 observations per sample
    "physio-like": dict(
        num_samples=1200, num_variables=36, lookback_span=36.0, horizon_span=12.0,
        resolution=1.0, rate_spread=0.5, decay=1.5, name="physio-like",
    ),
    # two-scale benchmark: components at half and quarter of the lookback
    "multiscale": dict(num_samples=600, num_variables=8, name="multiscale"),
}


def preset(name: str, **overrides) -> SyntheticSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    spec = SyntheticSpec(**{**PRESETS[name], **overrides})
    if name == "physio-like" and "base_rate" not in overrides:
        spec = calibrate_base_rate(spec, 308.6)
    return spec


@dataclass
class SampleParams:
    amplitudes: np.ndarray  # (V, 2)
    phases: np.ndarray  # (V, 2)


def seasonal(spec: SyntheticSpec, params: SampleParams, variable: int, t) -> np.ndarray:
    """Closed-form noise-free value of ``variable`` at times ``t``."""
    t = np.asarray(t, dtype=np.float64)

    def own(v):
        return sum(
            params.amplitudes[v, c] * np.sin(2 * np.pi * t / spec.periods[c] + params.phases[v, c])
            for c in range(2)
        )

    V = spec.num_variables
    out = own(variable)
    if spec.coupling:
        out = out + spec.coupling * own((variable - 1) % V)
    return out


@dataclass
class Corpus:
    samples: list[RawSample]
    num_variables: int
    lookback_span: float
    horizon_span: float
    name: str = "corpus"
    unit: str = ""
    params: Optional[list[SampleParams]] = field(default=None, repr=False)

    @property
    def total_span(self) -> float:
        return self.lookback_span + self.horizon_span

    def __len__(self):
        return len(self.samples)


def _draw_times(spec: SyntheticSpec, rng: np.random.Generator, multiplier: float) -> np.ndarray:
    if spec.resolution > 0:
        g = spec.grid()
        p = 1 - np.exp(-spec.rate(g, multiplier) * spec.resolution)
        return g[rng.random(len(g)) < p]
    # continuous: inverse of the integrated rate applied to uniform arrivals
    total = float(_integrated_rate(spec, multiplier, spec.total_span))
    u = np.sort(rng.random(rng.poisson(total))) * total
    a = spec.base_rate * multiplier
    if spec.decay == 1.0:
        t = u / a
    else:
        c = math.log(spec.decay) / spec.total_span
        t = -np.log1p(-u * c / a) / c
    t = np.unique(np.clip(t, np.nextafter(0.0, 1.0), spec.total_span))
    return t


def _draw_sample(spec: SyntheticSpec, index: int, max_retries: int = 100):
    rates = spec.variable_rates()
    for retry in range(max_retries):
        rng = np.random.default_rng([spec.seed, index, retry])
        V = spec.num_variables
        params = SampleParams(
            amplitudes=np.array(spec.amplitudes) * rng.uniform(0.5, 1.5, size=(V, 2)),
            phases=rng.uniform(0, 2 * np.pi, size=(V, 2)),
        )
        ts, zs, vs = [], [], []
        for v in range(V):
            t = _draw_times(spec, rng, rates[v])
            z = seasonal(spec, params, v, t)
            if spec.noise:
                z = z + spec.noise * rng.standard_normal(len(t))
            ts.append(t)
            zs.append(z)
            vs.append(np.full(len(t), v))
        t = np.concatenate(ts)
        if np.any(t <= spec.lookback_span) and np.any(t > spec.lookback_span):
            sample = RawSample(t, np.concatenate(zs), np.concatenate(vs), spec.total_span, V, str(index))
            return sample, params
    raise DataError(f"sample {index}: no observations in one window after {max_retries} retries")


def generate(spec: SyntheticSpec) -> Corpus:
    drawn = [_draw_sample(spec, i) for i in range(spec.num_samples)]
    return Corpus(
        [s for s, _ in drawn], spec.num_variables, spec.lookback_span, spec.horizon_span,
        spec.name, spec.unit, [p for _, p in drawn],
    )


# -- files --------------------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def save_tuples(corpus: Corpus | Sequence[RawSample], path) -> None:
    samples = corpus.samples if isinstance(corpus, Corpus) else corpus
    lines = [",".join(HEADER)]
    for s in samples:
        sid = str(s.sample_id)
        if "," in sid or "\n" in sid:
            raise DataError(f"sample id {sid!r} cannot be written to a tuple file")
        for t, v, z in zip(s.timestamps, s.variable_ids, s.values):
            lines.append(f"{sid},{float(t)!r},{int(v)},{float(z)!r}")
    _atomic_write(path, "\n".join(lines) + "\n")


def load_tuples(path, num_variables: int, total_span: float) -> list[RawSample]:
    """Read a tuple file; samples keep the order of their first row."""
    cols: dict[str, tuple[list, list, list]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != HEADER:
            raise DataError(f"{path}: line 1: expected header {','.join(HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            try:
                t, v, z = float(row[1]), int(row[2]), float(row[3])
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if not 0 <= v < num_variables:
                raise DataError(f"{path}: line {lineno}: unknown variable id {v}")
            if not (math.isfinite(t) and math.isfinite(z)) or not 0 <= t <= total_span:
                raise DataError(f"{path}: line {lineno}: timestamp or value out of range")
            c = cols.setdefault(row[0], ([], [], []))
            c[0].append(t)
            c[1].append(z)
            c[2].append(v)
    if not cols:
        raise DataError(f"{path}: empty corpus")
    return [
        RawSample(np.array(t), np.array(z), np.array(v), total_span, num_variables, sid)
        for sid, (t, z, v) in cols.items()
    ]


@dataclass
class DatasetManifest:
    name: str
    tuples_path: str
    num_variables: int
    total_span: float  # lookback span
    horizon_span: float
    unit: str = ""
    splits: dict[str, str] = field(default_factory=dict)
    norm_mean: list[float] = field(default_factory=list)
    norm_std: list[float] = field(default_factory=list)

    def ids(self, split: str) -> list[str]:
        return [i for i, s in self.splits.items() if s == split]

    def dumps(self) -> str:
        lines = [
            f"name={self.name}",
            f"tuples={self.tuples_path}",
            f"num_variables={self.num_variables}",
            f"total_span={self.total_span!r}",
            f"horizon_span={self.horizon_span!r}",
            f"unit={self.unit}",
        ]
        lines += [f"split.{i}={s}" for i, s in self.splits.items()]
        for v, (m, s) in enumerate(zip(self.norm_mean, self.norm_std)):
            lines += [f"norm.{v}.mean={m!r}", f"norm.{v}.std={s!r}"]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        _atomic_write(Path(path), self.dumps())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"manifest {path} not found")
        kv: dict[str, str] = {}
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip() or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}: line {lineno}: expected key=value")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        try:
            V = int(kv["num_variables"])
            tuples = kv["tuples"]
            if not os.path.isabs(tuples):
                tuples = str(path.parent / tuples)
            m = cls(
                kv["name"], tuples, V, float(kv["total_span"]), float(kv["horizon_span"]), kv.get("unit", ""),
                {k[6:]: v for k, v in kv.items() if k.startswith("split.")},
            )
            if "norm.0.mean" in kv:
                m.norm_mean = [float(kv[f"norm.{v}.mean"]) for v in range(V)]
                m.norm_std = [float(kv[f"norm.{v}.std"]) for v in range(V)]
        except KeyError as exc:
            raise DataError(f"{path}: missing key {exc}") from None
        bad = {s for s in m.splits.values() if s not in SPLITS}
        if bad:
            raise DataError(f"{path}: unknown split names {sorted(bad)}")
        return m


def assign_splits(ids: Sequence[str], seed: int = 0) -> dict[str, str]:
    """Shuffle ids into train/val/test at 8:1:1."""
    n = len(ids)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(0.1 * n))
    n_test = int(round(0.1 * n))
    n_train = n - n_val - n_test
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    out = {}
    for pos, i in enumerate(order):
        out[str(ids[i])] = labels[pos]
    return {str(i): out[str(i)] for i in ids}


def normalization_stats(samples: Sequence[RawSample], train_ids: set, num_variables: int):
    """Per-variable mean/std over training samples only; zero std is clamped to 1."""
    vals = [[] for _ in range(num_variables)]
    for s in samples:
        if str(s.sample_id) in train_ids:
            for v in range(num_variables):
                vals[v].append(s.values[s.variable_ids == v])
    mean, std = [], []
    for v in range(num_variables):
        x = np.concatenate(vals[v]) if vals[v] else np.zeros(0)
        m = float(x.mean()) if len(x) else 0.0
        s = float(x.std()) if len(x) else 0.0
        if not s > 1e-12:
            log.warning("variable %d has zero training variance; std clamped to 1", v)
            s = 1.0
        mean.append(m)
        std.append(s)
    return mean, std


def build_manifest(corpus: Corpus, tuples_path: str, split_seed: int = 0) -> DatasetManifest:
    splits = assign_splits([str(s.sample_id) for s in corpus.samples], split_seed)
    train = {i for i, s in splits.items() if s == "train"}
    mean, std = normalization_stats(corpus.samples, train, corpus.num_variables)
    return DatasetManifest(
        corpus.name, tuples_path, corpus.num_variables, corpus.lookback_span,
        corpus.horizon_span, corpus.unit, splits, mean, std,
    )


def write_dataset(corpus: Corpus, out_dir, split_seed: int = 0) -> Path:
    out_dir = Path(out_dir)
    save_tuples(corpus, out_dir / "tuples.csv")
    manifest = build_manifest(corpus, "tuples.csv", split_seed)
    manifest.save(out_dir / "manifest.txt")
    return out_dir / "manifest.txt"


def load_dataset(manifest_path) -> tuple[DatasetManifest, list[RawSample]]:
    m = DatasetManifest.load(manifest_path)
    if not Path(m.tuples_path).is_file():
        raise DataError(f"tuple file {m.tuples_path} not found")
    samples = load_tuples(m.tuples_path, m.num_variables, m.total_span + m.horizon_span)
    if not m.norm_mean:
        train = set(m.ids("train"))
        m.norm_mean, m.norm_std = normalization_stats(samples, train, m.num_variables)
    return m, samples


# -- windowing ------------------------------------------------------------------


def window(sample: RawSample, lookback: float, horizon: float, num_queries: int = 3):
    """Split one sample into its lookback part and forecast queries.

    The lookback is closed at ``lookback``; queries are the observations at
    the ``num_queries`` earliest distinct timestamps after it.  Returns
    ``None`` when either side is empty.
    """
    t, z, v = sample.timestamps, sample.values, sample.variable_ids
    back = t <= lookback
    ahead = (t > lookback) & (t <= lookback + horizon)
    if not back.any() or not ahead.any():
        return None
    lb = RawSample(t[back], z[back], v[back], lookback, sample.num_variables, sample.sample_id)
    times = np.unique(t[ahead])[:num_queries]
    V = sample.num_variables
    qt = np.zeros((len(times), V))
    qm = np.zeros((len(times), V), dtype=np.int8)
    qz = np.zeros((len(times), V))
    row = {x: i for i, x in enumerate(times)}
    for ti, zi, vi in zip(t[ahead], z[ahead], v[ahead]):
        j = row.get(ti)
        if j is not None:
            qt[j, vi], qm[j, vi], qz[j, vi] = ti, 1, zi
    return lb, ForecastQuery(qt, qm, lookback, horizon, qz)


def normalize(sample: RawSample, mean, std) -> RawSample:
    mean, std = np.asarray(mean), np.asarray(std)
    z = (sample.values - mean[sample.variable_ids]) / std[sample.variable_ids]
    return RawSample(sample.timestamps, z, sample.variable_ids, sample.total_span, sample.num_variables, sample.sample_id)


def denormalize(pred: np.ndarray, mean, std) -> np.ndarray:
    """Map a ``(..., V)`` prediction grid back to raw units."""
    return np.asarray(pred) * np.asarray(std) + np.asarray(mean)


def window_and_normalize(samples: Sequence[RawSample], manifest: DatasetManifest, num_queries: int = 3):
    """``{split: [(lookback sample, query), ...]}`` in normalized units."""
    out = {s: [] for s in SPLITS}
    mean, std = np.asarray(manifest.norm_mean), np.asarray(manifest.norm_std)
    skipped = 0
    for s in samples:
        split = manifest.splits.get(str(s.sample_id))
        if split is None:
            continue
        w = window(normalize(s, mean, std), manifest.total_span, manifest.horizon_span, num_queries)
        if w is None:
            skipped += 1
            continue
        lb, q = w
        truth = np.where(q.query_mask == 1, q.truth_values, 0.0)
        out[split].append((lb, ForecastQuery(q.query_timestamps, q.query_mask, q.lookback_span, q.horizon_span, truth)))
    if skipped:
        log.warning("skipped %d samples with an empty lookback or horizon", skipped)
    return out


class PreparedSplit:
    """Multi-scale views of one split, computed once and batched on demand."""

    def __init__(self, pairs, stack: ScaleStack, mode: SplitMode | str = SplitMode.TIME):
        self.items: list[tuple[MultiScaleSample, ForecastQuery]] = [
            (build_levels(align_and_pad(lb), stack, mode), q) for lb, q in pairs
        ]

    def __len__(self):
        return len(self.items)

    def batches(
        self, batch_size: int, rng: Optional[np.random.Generator] = None, dtype=torch.float32
    ) -> Iterator[Batch]:
        order = np.arange(len(self.items)) if rng is None else rng.permutation(len(self.items))
        for i in range(0, len(order), batch_size):
            chunk = [self.items[j] for j in order[i : i + batch_size]]
            yield collate([c[0] for c in chunk], [c[1] for c in chunk], dtype)


def prepare(samples, manifest: DatasetManifest, stack: ScaleStack, mode=SplitMode.TIME, num_queries: int = 3):
    if not math.isclose(stack.total_span, manifest.total_span):
        raise DataError(f"top period {stack.total_span} must equal the lookback span {manifest.total_span}")
    windows = window_and_normalize(samples, manifest, num_queries)
    return {s: PreparedSplit(p, stack, mode) for s, p in windows.items()}
