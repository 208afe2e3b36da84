"""Cartesian <-> polar resampling around a distortion center.

A polar raster has shape (n_rho, n_theta, C): rows are radius, columns
are angle.  Row i holds radius rho_i = (i + 0.5) * rho_max / n_rho (half
a step off the center so no row degenerates to a point); column j holds
theta_j = j * 2*pi / n_theta measured counterclockwise with
theta(rho=0) == 0.  The angle axis is periodic, so resampling and
convolution wrap across the last column; the radius axis clamps.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .image import BorderPolicy, ImageBuffer, Mask, sample_bilinear

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class PolarGrid:
    """Resampling geometry: center, radial extent, and raster dims."""

    center: tuple
    rho_max: float
    n_rho: int
    n_theta: int

    def __post_init__(self):
        if self.rho_max <= 0:
            raise ValueError(f"rho_max must be positive, got {self.rho_max}")
        if self.n_rho < 4 or self.n_theta < 4:
            raise ValueError("n_rho and n_theta must be at least 4")
        if self.n_theta % 8 != 0:
            raise ValueError(f"n_theta must be divisible by 8, got {self.n_theta}")
        if not all(np.isfinite(c) for c in self.center):
            raise ValueError("center must be finite")

    def rho_values(self):
        return (np.arange(self.n_rho) + 0.5) * (self.rho_max / self.n_rho)

    def theta_values(self):
        return np.arange(self.n_theta) * (TWO_PI / self.n_theta)


def _round_up_multiple(n, k):
    return ((n + k - 1) // k) * k


def default_grid(h, w):
    """Grid covering an h x w image out to its corners.

    Center is the image midpoint ((w-1)/2, (h-1)/2); rho_max is the image
    half-diagonal; n_rho ~ rho_max and n_theta ~ 2*pi*rho_max, both
    rounded up to multiples of 8 so the rasters survive two 2x
    down/upsamplings.
    """
    if h < 2 or w < 2:
        raise ValueError("image must be at least 2x2")
    rho_max = math.sqrt((w / 2.0) ** 2 + (h / 2.0) ** 2)
    n_rho = _round_up_multiple(math.ceil(rho_max), 8)
    n_theta = _round_up_multiple(math.ceil(TWO_PI * rho_max), 8)
    return PolarGrid(((w - 1) / 2.0, (h - 1) / 2.0), rho_max, n_rho, n_theta)


def _source_positions(grid):
    """Cartesian (sx, sy) sampled by each polar pixel, shape (n_rho, n_theta)."""
    rho = grid.rho_values()[:, None]
    theta = grid.theta_values()[None, :]
    xc, yc = grid.center
    return xc + rho * np.cos(theta), yc + rho * np.sin(theta)


def to_polar(img, grid):
    """Resample an image into the polar raster (bilinear, edge clamp)."""
    sx, sy = _source_positions(grid)
    vals = sample_bilinear(img, sx, sy, BorderPolicy.EDGE_CLAMP)
    return ImageBuffer(vals.astype(np.float32), img.range_tag)


def to_polar_mask(mask, grid):
    """Transport a binary mask with nearest-neighbor sampling, keeping {0,1}."""
    sx, sy = _source_positions(grid)
    xi = np.clip(np.round(sx).astype(np.int64), 0, mask.width - 1)
    yi = np.clip(np.round(sy).astype(np.int64), 0, mask.height - 1)
    vals = mask.data[yi, xi]
    return Mask((vals > 0.5).astype(np.float32))


def _sample_polar(arr, row, col, n_rho, n_theta):
    """Bilinear lookup in a polar raster: rows clamp, columns wrap."""
    r0f = np.floor(row)
    tr = row - r0f
    # Rows beyond the ends collapse both neighbors onto the boundary row,
    # so the interpolation weight becomes irrelevant (clamp, not extrapolate).
    r0 = np.clip(r0f.astype(np.int64), 0, n_rho - 1)
    r1 = np.clip(r0f.astype(np.int64) + 1, 0, n_rho - 1)
    c0f = np.floor(col)
    tc = col - c0f
    c0 = np.mod(c0f.astype(np.int64), n_theta)
    c1 = np.mod(c0f.astype(np.int64) + 1, n_theta)
    v00 = arr[r0, c0].astype(np.float64)
    v01 = arr[r0, c1].astype(np.float64)
    v10 = arr[r1, c0].astype(np.float64)
    v11 = arr[r1, c1].astype(np.float64)
    tr = tr[..., None]
    tc = tc[..., None]
    return (v00 * (1 - tc) + v01 * tc) * (1 - tr) + (v10 * (1 - tc) + v11 * tc) * tr


def to_cartesian(polar, grid, out_h, out_w):
    """Resample a polar raster back onto an out_h x out_w Cartesian image.

    Each pixel converts to (rho, theta) about the grid center (theta = 0
    exactly at the center) and samples the raster bilinearly with angle
    wraparound and radius clamping.
    """
    if polar.height != grid.n_rho or polar.width != grid.n_theta:
        raise DataError(
            f"polar raster dims ({polar.height}, {polar.width}) do not match "
            f"grid ({grid.n_rho}, {grid.n_theta})"
        )
    xc, yc = grid.center
    yy, xx = np.meshgrid(
        np.arange(out_h, dtype=np.float64),
        np.arange(out_w, dtype=np.float64),
        indexing="ij",
    )
    dx = xx - xc
    dy = yy - yc
    rho = np.sqrt(dx * dx + dy * dy)
    theta = np.mod(np.arctan2(dy, dx), TWO_PI)
    row = rho * (grid.n_rho / grid.rho_max) - 0.5
    col = theta * (grid.n_theta / TWO_PI)
    vals = _sample_polar(polar.data, row, col, grid.n_rho, grid.n_theta)
    return ImageBuffer(vals.astype(np.float32), polar.range_tag)


def polar_validity(grid, h, w):
    """Mask of polar pixels whose Cartesian source misses the h x w image.

    1 marks the corner-overrun region (rho beyond the rectangle); those
    pixels carry edge-clamped duplicates, so losses and metrics exclude
    them.
    """
    sx, sy = _source_positions(grid)
    outside = (sx < 0) | (sx > w - 1) | (sy < 0) | (sy > h - 1)
    return Mask(outside.astype(np.float32))


def fill_band(grid, r_valid):
    """Mask of whole polar rows beyond r_valid (the outpainting target)."""
    if not (0 < r_valid < grid.rho_max):
        raise ValueError(
            f"r_valid must lie strictly inside (0, rho_max), got {r_valid} "
            f"vs rho_max {grid.rho_max}"
        )
    band = grid.rho_values() > r_valid
    return Mask(np.repeat(band[:, None], grid.n_theta, axis=1).astype(np.float32))


def grid_to_line(grid):
    """Single text line "xc yc rho_max n_rho n_theta", full float precision."""
    return " ".join(
        [
            format(grid.center[0], ".17e"),
            format(grid.center[1], ".17e"),
            format(grid.rho_max, ".17e"),
            str(grid.n_rho),
            str(grid.n_theta),
        ]
    )


def grid_from_line(line):
    parts = line.split()
    if len(parts) != 5:
        raise DataError(f"grid line needs 5 fields, got {len(parts)}")
    try:
        xc, yc, rho_max = (float(p) for p in parts[:3])
        n_rho, n_theta = int(parts[3]), int(parts[4])
    except ValueError as exc:
        raise DataError(f"bad grid line: {exc}") from exc
    return PolarGrid((xc, yc), rho_max, n_rho, n_theta)
