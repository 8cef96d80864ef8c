"""Mini-batch training with a reduce-on-plateau schedule, plus the
end-to-end estimator (raw stack -> standardize -> network -> theta-hat).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, NormStats, denormalize_params, normalize_param_array, train_val_split
from .errors import DomainError, InputShapeError, TrainingAbortError
from .lattice import FieldStack, ModelParams, standardize_stack
from .network import (
    AdamState,
    NetworkSpec,
    NetworkWeights,
    adam_step,
    forward_batch,
    init_weights,
    loss_and_gradients,
    mae_loss,
)
from .rng import substream


@dataclass
class TrainConfig:
    """Optimizer and schedule settings."""

    batch_size: int = 100
    learning_rate: float = 1e-3
    epochs: int = 100
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    min_delta: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be positive")
        if not 0 < self.plateau_factor < 1:
            raise DomainError("plateau_factor must lie in (0, 1)")


class PlateauScheduler:
    """Reduce the learning rate by `factor` after `patience` epochs
    without an improvement of at least `min_delta` in the tracked metric.
    """

    def __init__(self, lr: float, factor: float, patience: int, min_delta: float):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.wait = 0

    def update(self, metric: float) -> float:
        """Record an epoch's metric; returns the lr to use next."""
        if metric < self.best - self.min_delta:
            self.best = metric
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= self.factor
                self.wait = 0
        return self.lr


@dataclass
class EpochRecord:
    epoch: int
    train_mae: float
    val_mae: float
    lr: float


@dataclass
class TrainResult:
    weights: NetworkWeights
    history: list[EpochRecord] = field(default_factory=list)


def _eval_mae(w: NetworkWeights, x: np.ndarray, y: np.ndarray, chunk: int = 512) -> float:
    total = 0.0
    for lo in range(0, x.shape[0], chunk):
        xb = x[lo : lo + chunk]
        preds = forward_batch(w, xb)
        total += mae_loss(preds, y[lo : lo + chunk]) * xb.shape[0]
    return total / x.shape[0]


def train(ds: Dataset, cfg: TrainConfig) -> TrainResult:
    """Train an estimator on a dataset; returns best-validation weights.

    The dataset is split 90/10 by configuration index (deterministic);
    batches reshuffle every epoch with a seeded stream. History row 0 is
    the pre-training validation evaluation. Zero-epoch training returns
    the initial weights and an empty history.
    """
    spec = NetworkSpec(grid_dim=ds.d, r_channels=ds.r)
    rng = substream(cfg.seed, 0)
    weights = init_weights(spec, rng)
    weights.norm = ds.norm
    if cfg.epochs == 0:
        return TrainResult(weights=weights, history=[])

    x = np.ascontiguousarray(ds.fields, dtype=np.float32)
    y = normalize_param_array(ds.params, ds.norm).astype(np.float32)
    train_idx, val_idx = train_val_split(ds.n, cfg.val_fraction)
    x_train, y_train = x[train_idx], y[train_idx]
    x_val, y_val = x[val_idx], y[val_idx]

    state = AdamState.for_weights(weights, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    sched = PlateauScheduler(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience, cfg.min_delta)
    shuffle_rng = substream(cfg.seed, 1)

    init_val = _eval_mae(weights, x_val, y_val)
    history = [EpochRecord(0, math.nan, init_val, sched.lr)]
    best_val = init_val
    best_weights = weights.copy()

    n_train = x_train.shape[0]
    lr = sched.lr
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(n_train)
        running = 0.0
        for b, lo in enumerate(range(0, n_train, cfg.batch_size)):
            sel = perm[lo : lo + cfg.batch_size]
            loss, grads = loss_and_gradients(weights, x_train[sel], y_train[sel])
            if not math.isfinite(loss):
                raise TrainingAbortError(f"non-finite loss at epoch {epoch}, batch {b}, lr {lr:g}")
            adam_step(weights, grads, state, lr)
            running += loss * sel.size
        train_mae = running / n_train
        val_mae = _eval_mae(weights, x_val, y_val)
        history.append(EpochRecord(epoch, train_mae, val_mae, lr))
        if val_mae < best_val:
            best_val = val_mae
            best_weights = weights.copy()
        lr = sched.update(val_mae)

    best_weights.norm = ds.norm
    return TrainResult(weights=best_weights, history=history)


def write_history_csv(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_mae", "val_mae", "lr"])
        for row in history:
            writer.writerow([row.epoch, repr(row.train_mae), repr(row.val_mae), repr(row.lr)])


def standardize_batch(stacks: np.ndarray) -> np.ndarray:
    """Standardize each stack of an (N, d, d, r) batch jointly over its values."""
    med = np.median(stacks, axis=(1, 2, 3), keepdims=True)
    sd = np.std(stacks, axis=(1, 2, 3), keepdims=True)
    bad = sd < 1e-12 * (np.abs(med) + 1.0)
    if np.any(bad):
        raise DomainError(f"{int(bad.sum())} stacks in the batch are degenerate (zero spread)")
    return (stacks - med) / sd


def estimate(w: NetworkWeights, stack: FieldStack, norm: NormStats) -> ModelParams:
    """Standardize, run the network, and denormalize to natural units."""
    if stack.replicates != w.spec.r_channels:
        raise InputShapeError(
            f"stack has {stack.replicates} replicates but the network was trained with "
            f"{w.spec.r_channels} input channels"
        )
    std = standardize_stack(stack)
    triple = forward_batch(w, std.values[None, ...].astype(np.float32))[0]
    return denormalize_params(triple, norm)


def estimate_batch(w: NetworkWeights, stacks: np.ndarray, norm: NormStats) -> np.ndarray:
    """Vectorized `estimate` on an (N, d, d, r) array of raw stacks.

    Returns an (N, 3) array of (xi, kappa2, tau2) estimates.
    """
    stacks = np.asarray(stacks, dtype=np.float32)
    if stacks.ndim != 4 or stacks.shape[3] != w.spec.r_channels:
        raise InputShapeError(
            f"expected (N, d, d, {w.spec.r_channels}) raw stacks, got {stacks.shape}"
        )
    std = standardize_batch(stacks)
    out = np.empty((stacks.shape[0], 3))
    chunk = 128
    for lo in range(0, stacks.shape[0], chunk):
        out[lo : lo + chunk] = forward_batch(w, std[lo : lo + chunk])
    out[:, 0] = out[:, 0] * norm.xi_sd + norm.xi_mean
    out[:, 1] = np.exp(out[:, 1] * norm.log_kappa2_sd + norm.log_kappa2_mean)
    out[:, 2] = np.exp(out[:, 2] * norm.log_tau2_sd + norm.log_tau2_mean)
    return out
