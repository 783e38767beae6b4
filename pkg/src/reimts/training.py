"""Training loop, early stopping, evaluation and checkpoints."""
from __future__ import annotations

import copy
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from reimts.data import PreparedSplit
from reimts.model import ReIMTS, ReimtsConfig, masked_mse_loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 300
    patience: int = 10
    batch_size: int = 32
    lr_schedule: str = "none"  # or "halve": halve every epoch after epoch 3
    gradient_clip: Optional[float] = None
    seeds: tuple[int, ...] = (2024, 2025, 2026, 2027, 2028)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if not 0 < self.patience < self.max_epochs:
            raise ValueError("patience must be positive and smaller than max_epochs")
        if self.lr_schedule not in ("halve", "none"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "halve" and epoch > 3:
            return self.learning_rate * 0.5 ** (epoch - 3)
        return self.learning_rate


class EarlyStopping:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.counter = 0

    def step(self, val_loss: float) -> tuple[bool, bool]:
        """Returns ``(improved, stop)``."""
        if val_loss < self.best:
            self.best = val_loss
            self.counter = 0
            return True, False
        self.counter += 1
        return False, self.counter >= self.patience


@dataclass
class FitResult:
    model: ReIMTS
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)


def fit(
    config: ReimtsConfig,
    data: dict[str, PreparedSplit],
    train: TrainConfig,
    seed: int = 2024,
    dtype: torch.dtype = torch.float32,
) -> FitResult:
    if len(data["train"]) == 0 or len(data["val"]) == 0:
        raise TrainingError("training and validation splits must be non-empty")
    seed_everything(seed)
    model = ReIMTS(config).to(dtype)
    order_rng = np.random.default_rng([seed, 1])
    opt = torch.optim.Adam(model.parameters(), lr=train.learning_rate)
    stopper = EarlyStopping(train.patience)
    result = FitResult(model)
    best_state = copy.deepcopy(model.state_dict())
    batch_size = train.batch_size
    for epoch in range(1, train.max_epochs + 1):
        for group in opt.param_groups:
            group["lr"] = train.lr_at(epoch)
        start = time.perf_counter()
        while True:
            try:
                train_loss, steps = _run_epoch(model, opt, data["train"], batch_size, order_rng, train, epoch, dtype)
                break
            except MemoryError:
                if batch_size == 1:
                    raise
                batch_size //= 2
                log.warning("out of memory; batch size halved to %d", batch_size)
        elapsed = time.perf_counter() - start
        val = evaluate(model, data["val"], batch_size, dtype)["mse"]
        improved, stop = stopper.step(val)
        if improved:
            best_state = copy.deepcopy(model.state_dict())
            result.best_epoch, result.best_val = epoch, val
        result.history.append(
            dict(
                epoch=epoch, train_loss=train_loss, val_loss=val, lr=train.lr_at(epoch),
                seconds=elapsed, seconds_per_iter=elapsed / max(steps, 1), batch_size=batch_size,
            )
        )
        log.info("epoch %d train %.5f val %.5f", epoch, train_loss, val)
        if stop:
            break
    model.load_state_dict(best_state)
    return result


def _run_epoch(model, opt, split, batch_size, rng, train: TrainConfig, epoch, dtype):
    model.train()
    total, count, steps = 0.0, 0.0, 0
    for b, batch in enumerate(split.batches(batch_size, rng, dtype)):
        opt.zero_grad()
        loss = masked_mse_loss(model(batch), batch.query)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
        loss.backward()
        if train.gradient_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), train.gradient_clip)
        if train.learning_rate > 0:
            opt.step()
        n = float(batch.query.mask.sum())
        total += float(loss.detach()) * n
        count += n
        steps += 1
    return total / count, steps


@torch.no_grad()
def predict(model: ReIMTS, split: PreparedSplit, batch_size: int = 64, dtype=torch.float32):
    model.eval()
    for batch in split.batches(batch_size, None, dtype):
        yield batch, model(batch)


def evaluate(model: ReIMTS, split: PreparedSplit, batch_size: int = 64, dtype=torch.float32) -> dict:
    """Masked MSE and MAE over every forecast query of ``split``."""
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    se = ae = n = 0.0
    for batch, pred in predict(model, split, batch_size, dtype):
        err = (pred - batch.query.truth) * batch.query.mask
        se += float((err * err).sum())
        ae += float(err.abs().sum())
        n += float(batch.query.mask.sum())
    mse, mae = se / n, ae / n
    return {"mse": mse, "mae": mae, "mse_e-1": mse * 10, "mae_e-1": mae * 10, "num_targets": int(n)}


def save_checkpoint(path, model: ReIMTS, train: Optional[TrainConfig] = None, extra: Optional[dict] = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "train_config": None if train is None else asdict(train),
        "dtype": str(next(model.parameters()).dtype),
        "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[ReIMTS, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    model = ReIMTS(ReimtsConfig.from_dict(payload["config"]))
    dtype = getattr(torch, payload["dtype"].split(".")[-1])
    model = model.to(dtype)
    model.load_state_dict(payload["state"])
    return model, payload
