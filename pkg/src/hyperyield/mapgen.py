"""Full-field yield maps from overlapping patch predictions.

Every in-field cell gets a ``W x W`` input window centred on it (zero
outside the raster and outside the field).  The predicted ``N x N`` patch is
added to the footprint centred on the same cell, and each cell's estimate is
the plain average of all patches that covered it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nn.checkpoint import Checkpoint
from .raster import FieldRaster, Normalizer, apply_normalizer

Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass
class PredictionAccumulator:
    total: np.ndarray
    count: np.ndarray

    @classmethod
    def empty(cls, height: int, width: int) -> "PredictionAccumulator":
        return cls(np.zeros((height, width)), np.zeros((height, width), dtype=np.int64))

    def add(self, row: int, col: int, patch: np.ndarray, mask: np.ndarray) -> None:
        """Add ``patch`` centred on ``(row, col)``, only into in-field cells."""
        n = patch.shape[0]
        h, w = self.total.shape
        half = n // 2
        r0, c0 = row - half, col - half
        rs, re = max(r0, 0), min(r0 + n, h)
        cs, ce = max(c0, 0), min(c0 + n, w)
        sub = patch[rs - r0 : re - r0, cs - c0 : ce - c0]
        inside = mask[rs:re, cs:ce]
        self.total[rs:re, cs:ce] += np.where(inside, sub, 0.0)
        self.count[rs:re, cs:ce] += inside

    def average(self) -> np.ndarray:
        out = np.full(self.total.shape, np.nan)
        np.divide(self.total, self.count, out=out, where=self.count > 0)
        return out


@dataclass
class PredictedMap:
    yield_map: FieldRaster
    counts: np.ndarray

    def count_raster(self) -> FieldRaster:
        return FieldRaster(self.counts.astype(np.float64), self.yield_map.mask, self.yield_map.cell_size)


def centred_windows(values: np.ndarray, cells: np.ndarray, window: int) -> np.ndarray:
    """``(len(cells), W, W, C)`` windows of a zero-filled ``(H, W, C)`` array."""
    half = window // 2
    padded = np.pad(values, ((half, half), (half, half), (0, 0)))
    rows = cells[:, 0][:, None, None] + np.arange(window)[None, :, None]
    cols = cells[:, 1][:, None, None] + np.arange(window)[None, None, :]
    return padded[rows, cols]


def checkpoint_predictor(ckpt: Checkpoint, batch_size: int = 256) -> Predictor:
    return lambda windows: ckpt.model.predict_patches(windows, batch_size)


def predict_map(
    predictor: Predictor | Checkpoint,
    features: FieldRaster,
    mask: np.ndarray | None = None,
    window: int = 5,
    out_size: int | None = None,
    normalizer: Normalizer | None = None,
    chunk_size: int = 512,
) -> PredictedMap:
    """Average overlapping ``N x N`` predictions into a yield map over ``mask``.

    ``predictor`` maps ``(b, W, W, n)`` windows to ``(b, N, N)`` patches, or
    is a checkpoint, whose normalizer and output size are then used.  The
    field ``mask`` defaults to the features' own mask.
    """
    if isinstance(predictor, Checkpoint):
        if normalizer is None:
            normalizer = predictor.normalizer
        if out_size is None:
            out_size = predictor.config.out_size
        window = predictor.config.window
        predictor = checkpoint_predictor(predictor)
    if mask is None:
        mask = features.mask
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != features.data.shape[:2]:
        raise ValueError("field mask does not match the feature grid")
    if not mask.any():
        raise ValueError("field mask has no in-field cells")

    values = apply_normalizer(features, normalizer).filled() if normalizer else features.filled()
    cells = np.argwhere(mask)
    acc = PredictionAccumulator.empty(*mask.shape)
    for start in range(0, len(cells), chunk_size):
        block = cells[start : start + chunk_size]
        patches = np.asarray(predictor(centred_windows(values, block, window)), dtype=np.float64)
        if patches.ndim == 2:
            patches = patches.reshape(len(block), 1, 1)
        if out_size is not None and patches.shape[1:] != (out_size, out_size):
            raise ValueError(f"predictor returned {patches.shape[1:]}, expected {out_size}x{out_size}")
        for (r, c), patch in zip(block, patches):
            acc.add(r, c, patch, mask)

    return PredictedMap(FieldRaster(acc.average(), mask, features.cell_size), acc.count)


def square_error_map(truth: FieldRaster, predicted: FieldRaster) -> FieldRaster:
    """``(M - M_hat)^2`` on the truth's field cells."""
    if not truth.same_grid(predicted):
        raise ValueError("truth and prediction grids differ")
    m = truth.filled()[:, :, 0]
    p = predicted.filled()[:, :, 0]
    err = (m - p) ** 2
    return FieldRaster(err, truth.mask, truth.cell_size)
