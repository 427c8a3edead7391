"""Procedural multi-year fields: eight feature channels plus a yield map.

Terrain (elevation and the slope, aspect and TPI derived from it) is shared
by every year; nitrogen strips, seasonal precipitation, the SAR bands and
yield change from year to year.  Channel order follows
:data:`hyperyield.raster.CHANNELS`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .raster import CHANNELS, FieldRaster, write_raster

RESPONSES = ("linear", "nitrogen", "interactive")
MASKS = ("rectangular", "blob")

# yield = intercept + coefficients . features for the "linear" family
LINEAR_INTERCEPT = 20.0
LINEAR_COEFFICIENTS = np.array([0.8, 0.5, 0.25, 0.06, -1.5, 0.3, 2.0, 0.01])


@dataclass(frozen=True)
class SynthSpec:
    height: int = 48
    width: int = 48
    years: int = 3
    seed: int = 0
    mask: str = "rectangular"
    noise: float = 5.0
    response: str = "interactive"
    cell_size: float = 10.0
    relief: float = 8.0
    first_year: int = 2016
    strip_width: int = 4

    def __post_init__(self):
        if self.height < 5 or self.width < 5:
            raise ValueError(f"field {self.height}x{self.width} is smaller than a 5x5 window")
        if self.years < 1:
            raise ValueError("need at least one year")
        if self.noise < 0:
            raise ValueError("noise level must be non-negative")
        if self.response not in RESPONSES:
            raise ValueError(f"unknown response family {self.response!r}; pick one of {RESPONSES}")
        if self.mask not in MASKS:
            raise ValueError(f"unknown mask style {self.mask!r}; pick one of {MASKS}")
        if self.strip_width < 1:
            raise ValueError("strip width must be positive")


@dataclass(frozen=True)
class SynthYear:
    year: int
    features: FieldRaster
    yield_map: FieldRaster


def smooth_noise(rng, shape, sigma):
    field = gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    return (field - field.mean()) / (field.std() + 1e-12)


def terrain_gradient(elevation, cell_size):
    """Central differences inside, one-sided at the edges. Returns (d/d east, d/d north)."""
    d_row, d_col = np.gradient(elevation, cell_size)
    # rows grow southwards
    return d_col, -d_row


def slope_degrees(elevation, cell_size):
    dzdx, dzdy = terrain_gradient(elevation, cell_size)
    return np.degrees(np.arctan(np.hypot(dzdx, dzdy)))


def aspect_degrees(elevation, cell_size):
    """Compass bearing (0 = north, clockwise) of the downslope direction; 0 on flat cells."""
    dzdx, dzdy = terrain_gradient(elevation, cell_size)
    bearing = np.degrees(np.arctan2(-dzdx, -dzdy)) % 360.0
    return np.where((dzdx == 0) & (dzdy == 0), 0.0, bearing)


def topographic_position(elevation):
    """Elevation minus the mean of its eight neighbours (edges replicated)."""
    padded = np.pad(elevation, 1, mode="edge")
    h, w = elevation.shape
    total = np.zeros_like(elevation)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr or dc:
                total += padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
    return elevation - total / 8.0


def field_mask(rng, spec: SynthSpec):
    shape = (spec.height, spec.width)
    if spec.mask == "rectangular":
        return np.ones(shape, dtype=bool)
    rows, cols = np.mgrid[0 : spec.height, 0 : spec.width]
    # radial falloff keeps the blob away from the edges and in one piece
    r = np.hypot((rows - spec.height / 2) / spec.height, (cols - spec.width / 2) / spec.width)
    score = smooth_noise(rng, shape, max(2.0, min(shape) / 8)) - 6.0 * r
    return score > np.quantile(score, 0.3)


def _response(spec, ch, latent):
    vv, vh, nitro, precip, slope, elev, tpi, aspect = ch
    if spec.response == "linear":
        return LINEAR_INTERCEPT + np.tensordot(ch, LINEAR_COEFFICIENTS, axes=(0, 0))
    if spec.response == "nitrogen":
        uptake = 70.0 * nitro / (nitro + 40.0)
        return 25.0 + uptake + 0.02 * (precip - 250.0) - 0.5 * slope + 2.0 * latent
    # interactive: nitrogen pays off only with water, which collects in hollows
    water = precip / 300.0 * np.exp(-0.15 * np.maximum(tpi, -5.0)) * np.exp(-0.05 * slope)
    uptake = nitro / (nitro + 50.0)
    north = np.cos(np.radians(aspect))
    return 20.0 + 75.0 * uptake * np.tanh(water) + 10.0 * latent * water - 3.0 * north


def generate(spec: SynthSpec) -> list[SynthYear]:
    rng = np.random.default_rng(spec.seed)
    shape = (spec.height, spec.width)
    mask = field_mask(rng, spec)

    elevation = 900.0 + spec.relief * smooth_noise(rng, shape, min(shape) / 6)
    slope = slope_degrees(elevation, spec.cell_size)
    aspect = aspect_degrees(elevation, spec.cell_size)
    tpi = topographic_position(elevation)

    rates = np.array([0.0, 30.0, 60.0, 90.0, 120.0, 150.0])
    n_strips = -(-spec.width // spec.strip_width)
    years = []
    for k in range(spec.years):
        strip_rates = rng.choice(rates, size=n_strips)
        nitrogen = np.repeat(strip_rates, spec.strip_width)[: spec.width]
        nitrogen = np.broadcast_to(nitrogen, shape).copy()
        precip = np.full(shape, rng.uniform(180.0, 360.0))
        latent = smooth_noise(rng, shape, min(shape) / 10)
        vv = -12.0 + 1.5 * latent + 0.5 * smooth_noise(rng, shape, 1.0)
        vh = -19.0 + 1.0 * latent + 0.5 * smooth_noise(rng, shape, 1.0)
        channels = np.stack([vv, vh, nitrogen, precip, slope, elevation, tpi, aspect])

        yields = _response(spec, channels, latent)
        if spec.noise > 0:
            yields = yields + rng.normal(0.0, spec.noise, size=shape)
        yields = np.maximum(yields, 0.0)

        features = FieldRaster(np.moveaxis(channels, 0, -1), mask, spec.cell_size)
        years.append(SynthYear(spec.first_year + k, features, FieldRaster(yields, mask, spec.cell_size)))
    return years


def write_field(years: list[SynthYear], directory: str | Path, test_years: int = 1) -> Path:
    """Write each year's rasters and a ``manifest.csv`` (last ``test_years`` marked as test)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    n_train = max(len(years) - test_years, 0)
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["year", "role", "features", "yield"])
        for i, y in enumerate(years):
            feat_name, yield_name = f"features_{y.year}.frst", f"yield_{y.year}.frst"
            write_raster(y.features, directory / feat_name)
            write_raster(y.yield_map, directory / yield_name)
            writer.writerow([y.year, "train" if i < n_train else "test", feat_name, yield_name])
    return manifest


def read_manifest(directory: str | Path) -> list[dict]:
    with open(Path(directory) / "manifest.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["year"] = int(row["year"])
    return rows


__all__ = ["CHANNELS", "SynthSpec", "SynthYear", "generate", "write_field", "read_manifest"]
