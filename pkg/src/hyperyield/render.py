"""Binary PGM/PPM heatmaps of single-channel rasters."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .raster import FieldRaster

# red -> yellow -> green, the usual low-to-high yield ramp
PALETTES = {
    "yield": np.array([[165, 0, 38], [244, 109, 67], [254, 224, 139], [166, 217, 106], [26, 152, 80]]),
    "gray": np.array([[0, 0, 0], [255, 255, 255]]),
}


def to_levels(raster: FieldRaster) -> np.ndarray:
    """Min-max scale in-field cells to 0..255 (constant rasters give 128); background is 0."""
    if raster.channels != 1:
        raise ValueError(f"can only render single-channel rasters, got {raster.channels} channels")
    values = raster.band(0)
    mask = raster.mask
    levels = np.zeros(mask.shape, dtype=np.uint8)
    if not mask.any():
        return levels
    lo, hi = values[mask].min(), values[mask].max()
    if hi > lo:
        scaled = np.rint((values[mask] - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.full(mask.sum(), 128.0)
    levels[mask] = scaled.astype(np.uint8)
    return levels


def encode_pgm(raster: FieldRaster) -> bytes:
    levels = to_levels(raster)
    h, w = levels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + levels.tobytes()


def colorize(levels: np.ndarray, mask: np.ndarray, palette: str = "yield") -> np.ndarray:
    stops = PALETTES[palette].astype(np.float64)
    pos = levels.astype(np.float64) / 255.0 * (len(stops) - 1)
    lo = np.minimum(pos.astype(int), len(stops) - 2)
    frac = (pos - lo)[..., None]
    rgb = stops[lo] * (1 - frac) + stops[lo + 1] * frac
    rgb = np.rint(rgb).astype(np.uint8)
    rgb[~mask] = 0
    return rgb


def encode_ppm(raster: FieldRaster, palette: str = "yield") -> bytes:
    if palette not in PALETTES:
        raise ValueError(f"unknown palette {palette!r}; choose from {sorted(PALETTES)}")
    rgb = colorize(to_levels(raster), raster.mask, palette)
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def render(raster: FieldRaster, path: str | Path, palette: str = "yield") -> Path:
    """Write a ``.pgm`` (grayscale) or ``.ppm`` (palette) file, chosen by suffix."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        payload = encode_pgm(raster)
    elif suffix == ".ppm":
        payload = encode_ppm(raster, palette)
    else:
        raise ValueError(f"output must end in .pgm or .ppm, got {path.name}")
    path.write_bytes(payload)
    return path
