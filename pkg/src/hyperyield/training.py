"""Mini-batch MSE training with Adadelta and best-validation model selection."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn.checkpoint import Checkpoint
from .nn.network import Hyper3DNetReg, ModelConfig
from .raster import Normalizer
from .sampling import DatasetSplit, Sample, stack_samples

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def mse_loss(pred, target):
    """Mean squared error over every batch and pixel entry, and its gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


@dataclass
class AdadeltaState:
    """Running averages of squared gradients and squared updates."""

    rho: float = 0.95
    eps: float = 1e-6
    sq_grad: dict = field(default_factory=dict)
    sq_delta: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict, rho: float = 0.95, eps: float = 1e-6) -> "AdadeltaState":
        return cls(
            rho,
            eps,
            {k: np.zeros_like(v) for k, v in params.items()},
            {k: np.zeros_like(v) for k, v in params.items()},
        )


def adadelta_step(params: dict, grads: dict, state: AdadeltaState) -> None:
    """Apply one Adadelta update in place; the step size comes from the accumulators alone."""
    rho, eps = state.rho, state.eps
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {name}")
        if name not in state.sq_grad:
            state.sq_grad[name] = np.zeros_like(params[name])
            state.sq_delta[name] = np.zeros_like(params[name])
        eg = state.sq_grad[name]
        ed = state.sq_delta[name]
        eg *= rho
        eg += (1.0 - rho) * g * g
        delta = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed *= rho
        ed += (1.0 - rho) * delta * delta
        params[name] += delta


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 96
    epochs: int = 500
    seed: int = 0
    rho: float = 0.95
    eps: float = 1e-6
    patience: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.epochs < 1:
            raise ValueError("need at least one epoch")


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochRecord]
    best_epoch: int


def prepare_arrays(samples: Sequence[Sample], normalizer: Normalizer, out_size: int):
    x, mask, y = stack_samples(samples)
    x = normalizer.transform(x, mask)
    y = y.reshape(len(y), 1) if out_size == 1 else y
    return x, y


def start_at_mean(model: Hyper3DNetReg, target_mean: float) -> None:
    """Shift the head bias so the untrained network predicts roughly ``target_mean``.

    With a rectified output and a zero bias, output pixels whose
    pre-activation starts negative never receive gradient; starting at the
    target mean keeps every output live.
    """
    p = model.params
    if model.config.out_size == 1:
        # FC kernel is positive at init, so the conv bias passes through scaled by its sum
        p["head_conv/bias"][:] = target_mean / max(p["head_fc/kernel"].sum(), 1e-12)
    else:
        p["head_conv/bias"][:] = target_mean


def evaluate_mse(model: Hyper3DNetReg, x, y, batch_size: int = 256) -> float:
    if len(x) == 0:
        return float("nan")
    pred = model.predict(x, batch_size)
    return mse_loss(pred, y)[0]


def train(
    split: DatasetSplit,
    config: TrainConfig,
    model_config: ModelConfig,
    normalizer: Normalizer | None = None,
) -> TrainResult:
    """Train a fresh network on ``split.train`` and keep the best-validation weights.

    The feature normalizer is fitted on the training patches only, unless one
    is supplied.  Train MSE per epoch is the sample-weighted mean of the
    mini-batch losses (train mode); validation MSE is measured in eval mode.
    When the validation split is empty, selection falls back to train MSE.
    """
    if not split.train:
        raise ValueError("training split is empty")
    n_out = split.train[0].out_size
    if n_out != model_config.out_size:
        raise ValueError(f"samples have {n_out}x{n_out} targets, model emits {model_config.out_size}")

    if normalizer is None:
        normalizer = Normalizer.fit_arrays((s.x_patch, s.x_mask) for s in split.train)
    x_tr, y_tr = prepare_arrays(split.train, normalizer, n_out)
    if split.validation:
        x_val, y_val = prepare_arrays(split.validation, normalizer, n_out)
    else:
        x_val, y_val = x_tr[:0], y_tr[:0]

    seeds = np.random.SeedSequence(config.seed).spawn(3)
    model = Hyper3DNetReg(model_config, seed=int(seeds[0].generate_state(1)[0]))
    start_at_mean(model, float(y_tr.mean()))
    shuffle_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])
    state = AdadeltaState.zeros_like(model.params, config.rho, config.eps)

    history: list[EpochRecord] = []
    best = None
    best_score = np.inf
    best_epoch = -1
    stale = 0
    k = len(x_tr)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(k)
        total = 0.0
        for start in range(0, k, config.batch_size):
            idx = order[start : start + config.batch_size]
            pred, cache = model.forward(x_tr[idx], train=True, rng=dropout_rng)
            loss, dpred = mse_loss(pred, y_tr[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            grads, _ = model.backward(cache, dpred)
            try:
                adadelta_step(model.params, grads, state)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from None
            total += loss * len(idx)
        train_mse = total / k
        val_mse = evaluate_mse(model, x_val, y_val)
        history.append(EpochRecord(epoch, train_mse, val_mse))
        logger.info("epoch %d train_mse %.6g val_mse %.6g", epoch, train_mse, val_mse)

        score = val_mse if len(x_val) else train_mse
        if score < best_score:
            best_score, best_epoch, best = score, epoch, model.copy()
            stale = 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                break

    if best is None:
        best, best_epoch = model.copy(), len(history) - 1
    meta = {"best_epoch": best_epoch, "epochs_run": len(history), "seed": config.seed}
    return TrainResult(Checkpoint(best, normalizer, meta), history, best_epoch)


def write_history(history: Sequence[EpochRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_mse", "val_mse"])
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.train_mse), repr(rec.val_mse)])


def read_history(path: str | Path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        return [
            EpochRecord(int(r["epoch"]), float(r["train_mse"]), float(r["val_mse"]))
            for r in csv.DictReader(fh)
        ]
