"""Masked multi-channel field rasters, point aggregation and min-max scaling.

A :class:`FieldRaster` is an ``(height, width, channels)`` float64 grid with a
boolean in-field mask.  Cells outside the mask hold NaN; anything that feeds a
network reads them as zero through :meth:`FieldRaster.filled`.

On disk rasters use the little-endian ``FRST`` container::

    b"FRST" | u8 version (1) | u32 height | u32 width | u32 channels
    | f64 cell_size | f32 values[h*w*c] (row, col, channel) | u8 mask[h*w]

Values are stored as float32, so writing a float64 raster rounds it once;
anything read back from a file round-trips bit-exactly.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CHANNELS = ("VV", "VH", "nitrogen", "precipitation", "slope", "elevation", "TPI", "aspect")

MAGIC = b"FRST"
VERSION = 1
_HEADER = struct.Struct("<4sBIIId")
# Guards against absurd headers before allocating.
MAX_CELLS = 1 << 31


class RasterFormatError(ValueError):
    """Raised for malformed FRST payloads."""


@dataclass(frozen=True, eq=False)
class FieldRaster:
    data: np.ndarray
    mask: np.ndarray
    cell_size: float = 10.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ValueError(f"raster data must be 2-D or 3-D, got shape {data.shape}")
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != data.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} does not match grid {data.shape[:2]}")
        # a cell with any missing feature is treated as outside the field
        mask = mask & np.isfinite(data).all(axis=2)
        data = np.where(mask[:, :, None], data, np.nan)
        data.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "cell_size", float(self.cell_size))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def filled(self, value: float = 0.0) -> np.ndarray:
        """Copy of the data with every out-of-field cell set to ``value``."""
        return np.where(self.mask[:, :, None], self.data, value)

    def band(self, channel: int = 0) -> np.ndarray:
        """Single channel as a 2-D array (NaN outside the field)."""
        return self.data[:, :, channel]

    def same_grid(self, other: "FieldRaster") -> bool:
        return self.data.shape[:2] == other.data.shape[:2]

    def equals(self, other: "FieldRaster") -> bool:
        return (
            self.shape == other.shape
            and self.cell_size == other.cell_size
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.data, other.data, equal_nan=True)
        )


@dataclass(frozen=True)
class GeoPoint:
    x: float
    y: float
    value: float


@dataclass(frozen=True)
class GridSpec:
    """Cell geometry: ``x_min`` is the west edge, ``y_max`` the north edge."""

    x_min: float
    y_max: float
    height: int
    width: int
    cell_size: float = 10.0

    def locate(self, x: float, y: float) -> tuple[int, int]:
        col = math.floor((x - self.x_min) / self.cell_size)
        row = math.floor((self.y_max - y) / self.cell_size)
        return row, col

    @classmethod
    def covering(cls, points: Sequence[GeoPoint], cell_size: float = 10.0) -> "GridSpec":
        """Smallest grid aligned to multiples of ``cell_size`` that holds every point."""
        xs = [p.x for p in points]
        ys = [p.y for p in points]
        x_min = math.floor(min(xs) / cell_size) * cell_size
        y_max = (math.floor(max(ys) / cell_size) + 1) * cell_size
        width = math.floor((max(xs) - x_min) / cell_size) + 1
        height = math.floor((y_max - min(ys)) / cell_size) + 1
        return cls(x_min, y_max, height, width, cell_size)


def aggregate_points(points: Sequence[GeoPoint], grid: GridSpec | None = None) -> FieldRaster:
    """Average georeferenced yield points into grid cells.

    Cells receiving at least one point hold the arithmetic mean of their
    points and are in-field; all other cells are NaN and out-of-field.
    """
    if len(points) == 0:
        raise ValueError("cannot aggregate an empty point list")
    for i, p in enumerate(points):
        if not (math.isfinite(p.x) and math.isfinite(p.y) and math.isfinite(p.value)):
            raise ValueError(f"point {i} has a non-finite coordinate or value")
        if p.value < 0:
            raise ValueError(f"point {i} has a negative yield {p.value}")
    if grid is None:
        grid = GridSpec.covering(points)

    total = np.zeros((grid.height, grid.width))
    count = np.zeros((grid.height, grid.width), dtype=np.int64)
    for i, p in enumerate(points):
        row, col = grid.locate(p.x, p.y)
        if not (0 <= row < grid.height and 0 <= col < grid.width):
            raise ValueError(f"point {i} at ({p.x}, {p.y}) falls outside the grid")
        total[row, col] += p.value
        count[row, col] += 1

    mask = count > 0
    mean = np.divide(total, count, out=np.full_like(total, np.nan), where=mask)
    return FieldRaster(mean, mask, grid.cell_size)


@dataclass(frozen=True, eq=False)
class Normalizer:
    """Per-channel min-max scaling fitted on in-field training cells."""

    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        mins = np.array(self.mins, dtype=np.float64)
        maxs = np.array(self.maxs, dtype=np.float64)
        if mins.shape != maxs.shape or mins.ndim != 1:
            raise ValueError("mins and maxs must be 1-D arrays of equal length")
        if np.any(maxs < mins):
            raise ValueError("normalizer max below min")
        object.__setattr__(self, "mins", mins)
        object.__setattr__(self, "maxs", maxs)

    @property
    def channels(self) -> int:
        return self.mins.size

    @property
    def constant(self) -> np.ndarray:
        return self.maxs == self.mins

    def transform(self, values: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        """Scale a ``(..., channels)`` array; masked-out and constant entries become 0.

        Values outside the fitted range are extrapolated, not clipped.
        """
        values = np.asarray(values, dtype=np.float64)
        if values.shape[-1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {values.shape[-1]}")
        span = np.where(self.constant, 1.0, self.maxs - self.mins)
        out = (values - self.mins) / span
        out = np.where(self.constant, 0.0, out)
        if mask is not None:
            out = np.where(np.asarray(mask, dtype=bool)[..., None], out, 0.0)
        return out

    def inverse(self, scaled: np.ndarray) -> np.ndarray:
        return np.asarray(scaled) * (self.maxs - self.mins) + self.mins

    @classmethod
    def fit_arrays(cls, blocks: Iterable[tuple[np.ndarray, np.ndarray]]) -> "Normalizer":
        """Fit from ``(values[..., c], mask[...])`` pairs, using masked-in entries only."""
        mins = maxs = None
        seen = 0
        for values, mask in blocks:
            values = np.asarray(values, dtype=np.float64)
            picked = values[np.asarray(mask, dtype=bool)]
            if picked.size == 0:
                continue
            lo, hi = picked.min(axis=0), picked.max(axis=0)
            if mins is None:
                mins, maxs = lo, hi
            else:
                if lo.shape != mins.shape:
                    raise ValueError("inconsistent channel counts across training rasters")
                mins, maxs = np.minimum(mins, lo), np.maximum(maxs, hi)
            seen += picked.shape[0]
        if seen == 0:
            raise ValueError("no in-field cells to fit the normalizer on")
        return cls(mins, maxs)


def fit_normalizer(rasters: Sequence[FieldRaster]) -> Normalizer:
    if len(rasters) == 0:
        raise ValueError("need at least one raster to fit a normalizer")
    channels = {r.channels for r in rasters}
    if len(channels) != 1:
        raise ValueError(f"inconsistent channel counts: {sorted(channels)}")
    return Normalizer.fit_arrays((r.data, r.mask) for r in rasters)


def apply_normalizer(raster: FieldRaster, norm: Normalizer) -> FieldRaster:
    if raster.channels != norm.channels:
        raise ValueError(
            f"raster has {raster.channels} channels, normalizer expects {norm.channels}"
        )
    scaled = norm.transform(raster.filled(), raster.mask)
    return FieldRaster(scaled, raster.mask, raster.cell_size)


def encode_raster(raster: FieldRaster) -> bytes:
    h, w, c = raster.shape
    header = _HEADER.pack(MAGIC, VERSION, h, w, c, raster.cell_size)
    values = raster.data.astype("<f4").tobytes(order="C")
    mask = raster.mask.astype(np.uint8).tobytes(order="C")
    return header + values + mask


def decode_raster(payload: bytes) -> FieldRaster:
    if len(payload) < _HEADER.size:
        raise RasterFormatError("truncated FRST header")
    magic, version, h, w, c, cell_size = _HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise RasterFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise RasterFormatError(f"unsupported FRST version {version}")
    if h * w * c > MAX_CELLS or h * w * c == 0:
        raise RasterFormatError(f"implausible dimensions {h}x{w}x{c}")
    n_values = h * w * c
    expected = _HEADER.size + 4 * n_values + h * w
    if len(payload) != expected:
        raise RasterFormatError(f"payload is {len(payload)} bytes, expected {expected}")
    offset = _HEADER.size
    values = np.frombuffer(payload, dtype="<f4", count=n_values, offset=offset)
    mask = np.frombuffer(payload, dtype=np.uint8, count=h * w, offset=offset + 4 * n_values)
    if np.any(mask > 1):
        raise RasterFormatError("mask bytes must be 0 or 1")
    return FieldRaster(
        values.astype(np.float64).reshape(h, w, c), mask.reshape(h, w).astype(bool), cell_size
    )


def write_raster(raster: FieldRaster, path: str | Path) -> None:
    Path(path).write_bytes(encode_raster(raster))


def read_raster(path: str | Path) -> FieldRaster:
    return decode_raster(Path(path).read_bytes())


def read_csv_raster(
    path: str | Path, height: int, width: int, channels: int, cell_size: float = 10.0
) -> FieldRaster:
    """Build a raster from ``row,col,channel,value`` lines.

    A cell is in-field once every one of its channels has been given a value.
    """
    data = np.full((height, width, channels), np.nan)
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            if row[0].strip() == "row":
                continue
            if len(row) != 4:
                raise RasterFormatError(f"line {lineno}: expected row,col,channel,value")
            r, c, ch = (int(v) for v in row[:3])
            if not (0 <= r < height and 0 <= c < width and 0 <= ch < channels):
                raise RasterFormatError(f"line {lineno}: index ({r}, {c}, {ch}) out of range")
            data[r, c, ch] = float(row[3])
    return FieldRaster(data, np.isfinite(data).all(axis=2), cell_size)
