"""Training patch extraction and the train/validation split."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .raster import FieldRaster, encode_raster


@dataclass(frozen=True, eq=False)
class Sample:
    """One ``(X, Y)`` pair.

    ``x_patch`` holds raw (unscaled) features with out-of-field cells zeroed;
    ``x_mask`` marks which of them are in-field.  ``y_patch`` is the centred
    ``N x N`` yield footprint in bu/ac.
    """

    x_patch: np.ndarray
    x_mask: np.ndarray
    y_patch: np.ndarray
    origin: tuple[int, int]
    year: int | str | None = None

    @property
    def window(self) -> int:
        return self.x_patch.shape[0]

    @property
    def out_size(self) -> int:
        return self.y_patch.shape[0]


@dataclass
class DatasetSplit:
    train: list[Sample]
    validation: list[Sample]
    seed: int
    train_index: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    validation_index: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def overlap_stride(window: int, max_overlap: float) -> int:
    """Densest stride whose linear overlap ``(W - s) / W`` stays within ``max_overlap``."""
    if not 0.0 <= max_overlap < 1.0:
        raise ValueError(f"max_overlap must lie in [0, 1), got {max_overlap}")
    # round before ceil so 5 * 0.25 is not pushed to 2 by float noise
    return max(1, math.ceil(round(window * (1.0 - max_overlap), 9)))


def extract_patches(
    features: FieldRaster,
    yield_map: FieldRaster,
    window: int = 5,
    out_size: int = 5,
    max_overlap: float = 0.75,
    year: int | str | None = None,
) -> list[Sample]:
    if not features.same_grid(yield_map):
        raise ValueError("feature and yield rasters must share a grid")
    if yield_map.channels != 1:
        raise ValueError("yield raster must have a single channel")
    if out_size > window or (window - out_size) % 2:
        raise ValueError(f"output size {out_size} must be <= {window} with matching parity")
    if features.height < window or features.width < window:
        raise ValueError(
            f"raster {features.height}x{features.width} is smaller than the {window}x{window} window"
        )

    stride = overlap_stride(window, max_overlap)
    offset = (window - out_size) // 2
    x_full = features.filled()
    y_full = yield_map.data[:, :, 0]
    y_valid = yield_map.mask & np.isfinite(y_full) & (np.nan_to_num(y_full, nan=-1.0) >= 0)

    samples = []
    for r in range(0, features.height - window + 1, stride):
        for c in range(0, features.width - window + 1, stride):
            tr, tc = r + offset, c + offset
            if not y_valid[tr : tr + out_size, tc : tc + out_size].all():
                continue
            samples.append(
                Sample(
                    x_patch=x_full[r : r + window, c : c + window].copy(),
                    x_mask=features.mask[r : r + window, c : c + window].copy(),
                    y_patch=y_full[tr : tr + out_size, tc : tc + out_size].copy(),
                    origin=(r, c),
                    year=year,
                )
            )
    return samples


def assemble_years(
    per_year: Sequence[tuple[int | str, FieldRaster, FieldRaster]],
    window: int = 5,
    out_size: int = 5,
    max_overlap: float = 0.75,
) -> list[Sample]:
    """Pool patches from several observed years, tagging each with its year."""
    if not per_year:
        return []
    _, ref, _ = per_year[0]
    samples = []
    for year, features, yield_map in per_year:
        if features.shape != ref.shape or not yield_map.same_grid(ref):
            raise ValueError(f"year {year} does not match the grid of year {per_year[0][0]}")
        samples.extend(extract_patches(features, yield_map, window, out_size, max_overlap, year))
    return samples


def split_train_val(samples: Sequence[Sample], seed: int, train_fraction: float = 0.9) -> DatasetSplit:
    k = len(samples)
    if k < 10:
        raise ValueError(f"need at least 10 samples to split, got {k}")
    order = np.random.default_rng(seed).permutation(k)
    n_train = math.ceil(round(train_fraction * k, 9))
    train_idx, val_idx = order[:n_train], order[n_train:]
    return DatasetSplit(
        train=[samples[i] for i in train_idx],
        validation=[samples[i] for i in val_idx],
        seed=seed,
        train_index=train_idx,
        validation_index=val_idx,
    )


def stack_samples(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays ``(x[b,W,W,n], x_mask[b,W,W], y[b,N,N])``."""
    x = np.stack([s.x_patch for s in samples])
    m = np.stack([s.x_mask for s in samples])
    y = np.stack([s.y_patch for s in samples])
    return x, m, y


def dump_samples(samples: Sequence[Sample], directory: str | Path) -> Path:
    """Write each sample as FRST x/y blocks plus a ``manifest.csv`` index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "year", "row", "col"])
        for i, s in enumerate(samples):
            writer.writerow([i, s.year, s.origin[0], s.origin[1]])
            x = FieldRaster(s.x_patch, s.x_mask)
            y = FieldRaster(s.y_patch, np.ones(s.y_patch.shape, dtype=bool))
            (directory / f"sample_{i:06d}.bin").write_bytes(encode_raster(x) + encode_raster(y))
    return manifest
