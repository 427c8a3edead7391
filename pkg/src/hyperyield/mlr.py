"""Multiple linear regression baseline on single-cell feature vectors."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .raster import CHANNELS, Normalizer
from .sampling import Sample

RIDGE = 1e-8


@dataclass(frozen=True, eq=False)
class MlrModel:
    coefficients: np.ndarray
    intercept: float

    def __post_init__(self):
        coef = np.asarray(self.coefficients, dtype=np.float64)
        if not np.all(np.isfinite(coef)) or not np.isfinite(self.intercept):
            raise ValueError("MLR coefficients must be finite")
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "intercept", float(self.intercept))

    @property
    def n_features(self) -> int:
        return self.coefficients.size

    def linear(self, features) -> np.ndarray:
        """Unclamped affine prediction."""
        x = np.asarray(features, dtype=np.float64)
        if x.shape[-1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x.shape[-1]}")
        return x @ self.coefficients + self.intercept


def fit_mlr(features, targets) -> MlrModel:
    """Ordinary least squares with an intercept, via the normal equations.

    Columns are centred and scaled before forming the Gram matrix so that raw
    features of very different magnitudes (elevation vs. backscatter) stay
    well conditioned; the solution is mapped back to the original units.  A
    rank-deficient design falls back to a tiny ridge penalty with a warning.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError(f"design {X.shape} does not match {y.size} targets")
    k, n = X.shape
    if k < n + 1:
        raise ValueError(f"need at least {n + 1} samples for {n} features, got {k}")

    x_mean, y_mean = X.mean(axis=0), y.mean()
    scale = X.std(axis=0)
    varying = scale > 0
    Z = (X[:, varying] - x_mean[varying]) / scale[varying]
    gram = Z.T @ Z
    rhs = Z.T @ (y - y_mean)

    beta_z = np.zeros(Z.shape[1])
    if Z.shape[1]:
        rank = np.linalg.matrix_rank(Z)
        if rank < Z.shape[1]:
            warnings.warn(
                f"design matrix has rank {rank} < {Z.shape[1]}; using ridge {RIDGE}", stacklevel=2
            )
            gram = gram + RIDGE * k * np.eye(Z.shape[1])
        beta_z = cho_solve(cho_factor(gram), rhs)
    if (~varying).any():
        warnings.warn("constant feature columns get zero coefficients", stacklevel=2)

    coef = np.zeros(n)
    coef[varying] = beta_z / scale[varying]
    intercept = y_mean - x_mean @ coef
    return MlrModel(coef, intercept)


def predict_mlr(model: MlrModel, features) -> np.ndarray:
    """Affine prediction clamped at zero yield."""
    return np.maximum(model.linear(features), 0.0)


def center_cells(samples: Sequence[Sample], normalizer: Normalizer | None = None):
    """Per-sample ``(features[n], yield)`` at the patch centre.

    Features are scaled with ``normalizer`` when one is given, matching what
    the CNN sees.
    """
    half = samples[0].window // 2
    x = np.stack([s.x_patch[half, half] for s in samples])
    m = np.stack([s.x_mask[half, half] for s in samples])
    if normalizer is not None:
        x = normalizer.transform(x, m)
    n_half = samples[0].out_size // 2
    y = np.array([s.y_patch[n_half, n_half] for s in samples])
    return x, y


def window_predictor(model: MlrModel):
    """Adapter for :func:`hyperyield.mapgen.predict_map`: centre cell in, ``1 x 1`` patch out."""

    def predict(windows):
        half = windows.shape[1] // 2
        return predict_mlr(model, windows[:, half, half, :]).reshape(-1, 1, 1)

    return predict


def write_coefficients(model: MlrModel, path: str | Path, names: Sequence[str] = CHANNELS) -> None:
    if len(names) != model.n_features:
        names = [f"x{i}" for i in range(model.n_features)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["channel", "value"])
        for name, value in zip(names, model.coefficients):
            writer.writerow([name, repr(float(value))])
        writer.writerow(["intercept", repr(model.intercept)])


def read_coefficients(path: str | Path) -> MlrModel:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    intercept = [float(r["value"]) for r in rows if r["channel"] == "intercept"]
    coef = [float(r["value"]) for r in rows if r["channel"] != "intercept"]
    if len(intercept) != 1:
        raise ValueError("coefficient file needs exactly one intercept row")
    return MlrModel(np.array(coef), intercept[0])
