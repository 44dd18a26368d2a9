"""Mini-batch Adam training with a held-out validation split and early stopping."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import no_grad
from .layers import adam_step

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 1000
    patience: int = 20
    val_fraction: float = 0.10
    batch_size: int = 32
    learning_rate: float = 0.001
    seed: int = 0
    split: str = "chronological"  # or "random"

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if min(self.max_epochs, self.patience, self.batch_size) < 1:
            raise ValueError("max_epochs, patience and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.split not in ("chronological", "random"):
            raise ValueError(f"unknown split {self.split!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainHistory:
    initial_val_loss: float = math.nan
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stopped_early: bool = False

    def __len__(self):
        return len(self.records)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{r.epoch},{r.train_loss!r},{r.val_loss!r}" for r in self.records]
        return "\n".join(lines) + "\n"


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history: TrainHistory, best_params: dict):
        super().__init__(message)
        self.history = history
        self.best_params = best_params


class EarlyStopping:
    """Track the best validation loss; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best, self.best_epoch, self.wait = val_loss, epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def split_samples(samples, val_fraction: float, mode: str = "chronological", seed: int = 0):
    """Indices ``(train, val)``.

    Chronological mode holds out the last ``val_fraction`` of each region's
    windows (by target day); random mode shuffles the pooled samples.
    """
    n = len(samples)
    if mode == "random":
        order = np.random.default_rng(seed).permutation(n)
        n_val = max(1, int(round(val_fraction * n)))
        return np.sort(order[n_val:]), np.sort(order[:n_val])
    by_region: dict[str, list[int]] = {}
    for idx, s in enumerate(samples):
        by_region.setdefault(s.geo_id, []).append(idx)
    train, val = [], []
    for geo_id in sorted(by_region):
        idxs = sorted(by_region[geo_id], key=lambda i: samples[i].target_index)
        n_val = int(round(val_fraction * len(idxs)))
        if len(idxs) >= 2:
            n_val = min(max(1, n_val), len(idxs) - 1)
        train += idxs[:len(idxs) - n_val]
        val += idxs[len(idxs) - n_val:]
    if not val:
        # every region has a single window; fall back to holding out the last sample overall
        val, train = train[-1:], train[:-1]
    return np.asarray(sorted(train)), np.asarray(sorted(val))


def evaluate_loss(model, batch) -> float:
    with no_grad():
        return float(model.loss(batch, training=False).data)


def train(model, samples, config: TrainConfig = TrainConfig(), log_every: int = 0):
    """Fit ``model`` in place; returns the :class:`TrainHistory`.

    The model ends up holding the weights of its best validation epoch (or its
    initial weights if no epoch improved on them).
    """
    if len(samples) < 2:
        raise ValueError("train needs at least 2 samples")
    train_idx, val_idx = split_samples(samples, config.val_fraction, config.split, config.seed)
    data = model.batch(samples)
    train_data = tuple(a[train_idx] for a in data)
    val_data = tuple(a[val_idx] for a in data)

    rng = np.random.default_rng(config.seed)
    dropout_rng = np.random.default_rng([config.seed, 1])
    store = model.params
    store.reset_optimizer()

    history = TrainHistory()
    history.initial_val_loss = evaluate_loss(model, val_data)
    stopper = EarlyStopping(config.patience)
    stopper.update(0, history.initial_val_loss)
    best_params = store.snapshot()

    n_train = len(train_idx)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n_train)
        total = 0.0
        try:
            for start in range(0, n_train, config.batch_size):
                pick = order[start:start + config.batch_size]
                batch = tuple(a[pick] for a in train_data)
                store.zero_grad()
                loss = model.loss(batch, training=True, rng=dropout_rng)
                if not np.isfinite(loss.data):
                    raise FloatingPointError("non-finite training loss")
                loss.backward()
                adam_step(store, store.grads(), config.learning_rate)
                total += float(loss.data) * len(pick)
            val_loss = evaluate_loss(model, val_data)
            if not np.isfinite(val_loss):
                raise FloatingPointError("non-finite validation loss")
        except FloatingPointError as exc:
            store.load(best_params)
            history.best_epoch, history.best_val_loss = stopper.best_epoch, stopper.best
            raise TrainingDiverged(f"training diverged at epoch {epoch}: {exc}", history, best_params) from exc

        history.records.append(EpochRecord(epoch, total / n_train, val_loss))
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d train %.6g val %.6g", epoch, total / n_train, val_loss)
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best_params = store.snapshot()
        if stop:
            history.stopped_early = True
            break

    store.load(best_params)
    history.best_epoch = stopper.best_epoch
    history.best_val_loss = stopper.best
    logger.info("best validation epoch %d (L1 %.6g, initial %.6g)",
                history.best_epoch, history.best_val_loss, history.initial_val_loss)
    return history
