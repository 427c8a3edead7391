"""Field-masked error and structural-similarity metrics for yield maps.

Maps are compared over the in-field set ``F``.  SSIM maps are evaluated at
every raster cell with uniform ``w x w`` windows that read background and
beyond-the-edge cells as zero, then averaged over ``F`` only.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .raster import FieldRaster

K1, K2 = 0.01, 0.03
TABLE_ROWS = ("RMSE", "RMedSE", "SSIM3*", "SSIM11*")


def _as_map(values) -> np.ndarray:
    if isinstance(values, FieldRaster):
        if values.channels != 1:
            raise ValueError("expected a single-channel raster")
        return values.filled()[:, :, 0]
    arr = np.asarray(values, dtype=np.float64)
    return np.nan_to_num(arr, nan=0.0)


def _squared_errors(truth, predicted, mask) -> np.ndarray:
    m, p = _as_map(truth), _as_map(predicted)
    if m.shape != p.shape:
        raise ValueError(f"map shapes differ: {m.shape} vs {p.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != m.shape:
        raise ValueError("mask does not match the maps")
    if not mask.any():
        raise ValueError("field set F is empty")
    return ((m - p) ** 2)[mask]


def rmse(truth, predicted, mask) -> float:
    return float(np.sqrt(np.mean(_squared_errors(truth, predicted, mask))))


def rmedse(truth, predicted, mask) -> float:
    """Root of the median squared error; even counts average the two middle values."""
    return float(np.sqrt(np.median(_squared_errors(truth, predicted, mask))))


def dynamic_range(*maps) -> float:
    """Largest value across the zero-filled maps; 1 when everything is zero or negative."""
    top = max(float(_as_map(m).max()) for m in maps)
    return top if top > 0 else 1.0


def ssim_map(truth, predicted, window: int, data_range: float | None = None) -> np.ndarray:
    """Per-cell SSIM between ``window x window`` neighbourhoods of two maps."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"SSIM window must be odd, got {window}")
    a, b = _as_map(truth), _as_map(predicted)
    if a.shape != b.shape:
        raise ValueError(f"map shapes differ: {a.shape} vs {b.shape}")
    L = dynamic_range(a, b) if data_range is None else float(data_range)
    c1, c2 = (K1 * L) ** 2, (K2 * L) ** 2

    half = window // 2
    wa = sliding_window_view(np.pad(a, half), (window, window))
    wb = sliding_window_view(np.pad(b, half), (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim_aggregate(ssim_values: np.ndarray, mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("field set F is empty")
    return float(np.mean(np.asarray(ssim_values)[mask]))


@dataclass
class MetricsReport:
    rmse: float
    rmedse: float
    ssim3: float
    ssim11: float
    cells: int
    data_range: float
    ssim_map_3: FieldRaster
    ssim_map_11: FieldRaster
    square_error_map: FieldRaster

    def table_values(self) -> dict[str, float]:
        """Presentation rows; SSIM values are scaled by 100."""
        return {
            "RMSE": self.rmse,
            "RMedSE": self.rmedse,
            "SSIM3*": 100.0 * self.ssim3,
            "SSIM11*": 100.0 * self.ssim11,
        }

    def raw_values(self) -> dict[str, float]:
        return {
            "RMSE": self.rmse,
            "RMedSE": self.rmedse,
            "SSIM3": self.ssim3,
            "SSIM11": self.ssim11,
            "cells": self.cells,
            "L": self.data_range,
        }


def evaluate(truth: FieldRaster, predicted: FieldRaster, mask=None) -> MetricsReport:
    """All four metrics plus the error and SSIM maps; ``F`` defaults to the truth's mask."""
    if not truth.same_grid(predicted):
        raise ValueError("truth and prediction grids differ")
    F = truth.mask if mask is None else np.asarray(mask, dtype=bool)
    m, p = _as_map(truth), _as_map(predicted)
    L = dynamic_range(m, p)
    s3 = ssim_map(m, p, 3, L)
    s11 = ssim_map(m, p, 11, L)
    everywhere = np.ones(F.shape, dtype=bool)
    return MetricsReport(
        rmse=rmse(m, p, F),
        rmedse=rmedse(m, p, F),
        ssim3=ssim_aggregate(s3, F),
        ssim11=ssim_aggregate(s11, F),
        cells=int(F.sum()),
        data_range=L,
        ssim_map_3=FieldRaster(s3, everywhere, truth.cell_size),
        ssim_map_11=FieldRaster(s11, everywhere, truth.cell_size),
        square_error_map=FieldRaster((m - p) ** 2, F, truth.cell_size),
    )


def write_table(reports: dict[str, MetricsReport], path: str | Path, raw: bool = False) -> None:
    """One row per metric, one column per model, in the order given."""
    labels = list(reports)
    rows = [r.raw_values() if raw else r.table_values() for r in reports.values()]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric"] + labels)
        for key in rows[0]:
            writer.writerow([key] + [f"{row[key]:.6f}" for row in rows])
