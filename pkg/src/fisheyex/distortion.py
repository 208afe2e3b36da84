"""Parametric radial distortion: model, sampling, and fisheye synthesis.

The distortion level at radius r from the center is the even polynomial

    level(r) = 1 + k1*r^2 + k2*r^4 + k3*r^6 + k4*r^8

evaluated via Horner's rule in r^2.  A destination pixel p at radius r
from the center c reads the source image at c + (p - c) * level(r), so
synthesis is a single backward warp with no root finding.  Levels below 1
pull source content inward, which stretches it outward in the result.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .image import BorderPolicy, ImageBuffer, Mask, RangeTag, sample_bilinear

log = logging.getLogger(__name__)

# Validity box for the level polynomial and the rejection sampler.
LEVEL_MIN = 0.05
LEVEL_MAX = 20.0
VALIDITY_GRID_POINTS = 1024
MAX_SAMPLE_ATTEMPTS = 10_000

SIGN_NEGATIVE = "negative"
SIGN_EITHER = "either"


@dataclass(frozen=True)
class DistortionProfile:
    """Polynomial coefficients plus the geometry they apply to.

    center is the continuous (xc, yc) distortion center; r_valid is the
    radius of the circle that holds real content after synthesis.
    """

    k1: float
    k2: float
    k3: float
    k4: float
    center: tuple
    r_valid: float

    def __post_init__(self):
        vals = (self.k1, self.k2, self.k3, self.k4, *self.center, self.r_valid)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("profile fields must be finite")
        if self.r_valid <= 0:
            raise ValueError(f"r_valid must be positive, got {self.r_valid}")

    @property
    def coeffs(self):
        return np.array([self.k1, self.k2, self.k3, self.k4], dtype=np.float64)


@dataclass(frozen=True)
class ParamRanges:
    """Magnitude intervals and sign rules for the four coefficients.

    magnitudes[i] is the (lo, hi) magnitude interval for k_{i+1}; signs[i]
    is "negative" or "either".  Magnitudes are drawn log-uniformly.
    """

    magnitudes: tuple = (
        (1e-8, 1e-4),
        (1e-12, 1e-8),
        (1e-16, 1e-12),
        (1e-20, 1e-16),
    )
    signs: tuple = (SIGN_NEGATIVE, SIGN_EITHER, SIGN_EITHER, SIGN_EITHER)

    def __post_init__(self):
        if len(self.magnitudes) != 4 or len(self.signs) != 4:
            raise ValueError("need magnitude interval and sign rule per coefficient")
        for lo, hi in self.magnitudes:
            if not (0 < lo <= hi):
                raise ValueError(f"magnitude interval must satisfy 0 < lo <= hi, got ({lo}, {hi})")
        for s in self.signs:
            if s not in (SIGN_NEGATIVE, SIGN_EITHER):
                raise ValueError(f"unknown sign rule {s!r}")


@dataclass(frozen=True)
class DistortionLevelVector:
    """1D radial profile of distortion levels.

    values[i] is the level at radius (i + 0.5) * rho_max / len(values),
    matching the row centers of a polar raster with the same rho_max.
    """

    values: np.ndarray
    rho_max: float

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.values), dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("level vector must be 1D and non-empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("level vector contains non-finite values")
        if self.rho_max <= 0:
            raise ValueError("rho_max must be positive")
        object.__setattr__(self, "values", arr)

    def radii(self):
        n = self.values.size
        return (np.arange(n) + 0.5) * (self.rho_max / n)


def distortion_level(profile, r):
    """Evaluate the level polynomial at radius r (scalar or array)."""
    s = np.square(np.asarray(r, dtype=np.float64))
    return 1.0 + s * (profile.k1 + s * (profile.k2 + s * (profile.k3 + s * profile.k4)))


def is_valid_profile(profile, r_max):
    """Check usability of a profile out to radius r_max.

    Valid means the level stays within [0.05, 20] and r * level(r) is
    strictly increasing on a uniform 1024-point grid over [0, r_max],
    i.e. the warp never folds back on itself.
    """
    if r_max <= 0:
        raise ValueError(f"r_max must be positive, got {r_max}")
    grid = np.linspace(0.0, r_max, VALIDITY_GRID_POINTS)
    lvl = distortion_level(profile, grid)
    if lvl.min() < LEVEL_MIN or lvl.max() > LEVEL_MAX:
        return False
    g = grid * lvl
    return bool(np.all(np.diff(g) > 0.0))


def _draw_coeffs(rng, ranges):
    coeffs = []
    for (lo, hi), sign_rule in zip(ranges.magnitudes, ranges.signs):
        mag = 10.0 ** rng.uniform(np.log10(lo), np.log10(hi))
        if sign_rule == SIGN_NEGATIVE:
            sign = -1.0
        else:
            sign = -1.0 if rng.random() < 0.5 else 1.0
        coeffs.append(sign * mag)
    return coeffs


def sample_profile_with_stats(rng_seed, ranges, center, r_valid, validate_to=None):
    """Rejection-sample a valid profile; returns (profile, n_rejected).

    Magnitudes are log-uniform within their intervals.  Draws are
    rejected until is_valid_profile holds over [0, validate_to]
    (defaults to r_valid; dataset builds validate out to the corner
    radius so the full-rectangle warp stays usable).
    """
    if isinstance(rng_seed, np.random.Generator):
        rng = rng_seed
    else:
        rng = np.random.default_rng(rng_seed)
    r_check = r_valid if validate_to is None else validate_to
    for attempt in range(MAX_SAMPLE_ATTEMPTS):
        k1, k2, k3, k4 = _draw_coeffs(rng, ranges)
        profile = DistortionProfile(k1, k2, k3, k4, tuple(center), r_valid)
        if is_valid_profile(profile, r_check):
            return profile, attempt
    raise DataError(
        f"no valid profile after {MAX_SAMPLE_ATTEMPTS} draws; "
        f"ranges incompatible with radius {r_check}"
    )


def sample_profile(rng_seed, ranges, center, r_valid, validate_to=None):
    """Rejection-sample a valid profile (see sample_profile_with_stats)."""
    profile, _ = sample_profile_with_stats(rng_seed, ranges, center, r_valid, validate_to)
    return profile


def warp_radial(src, profile, out_h, out_w):
    """Backward-warp the whole out_h x out_w rectangle (no circular cutoff).

    Destination pixel p samples src bilinearly at c + (p - c) * level(|p - c|)
    with edge clamping.  Out-of-rectangle source positions are counted and
    logged; they occur only when the level exceeds 1 somewhere.
    """
    if out_h > src.height or out_w > src.width:
        raise ValueError(
            f"output dims ({out_h}, {out_w}) exceed source dims "
            f"({src.height}, {src.width})"
        )
    xc, yc = profile.center
    if not (0 <= xc <= out_w - 1 and 0 <= yc <= out_h - 1):
        raise ValueError(f"center {profile.center} outside output rectangle")
    yy, xx = np.meshgrid(
        np.arange(out_h, dtype=np.float64),
        np.arange(out_w, dtype=np.float64),
        indexing="ij",
    )
    dx = xx - xc
    dy = yy - yc
    r = np.sqrt(dx * dx + dy * dy)
    lvl = distortion_level(profile, r)
    sx = xc + dx * lvl
    sy = yc + dy * lvl
    oob = int(
        np.count_nonzero(
            (sx < 0) | (sx > src.width - 1) | (sy < 0) | (sy > src.height - 1)
        )
    )
    if oob:
        log.debug("warp_radial: %d source samples fell outside the rectangle", oob)
    vals = sample_bilinear(src, sx, sy, BorderPolicy.EDGE_CLAMP)
    return ImageBuffer(vals.astype(np.float32), src.range_tag), r


def synthesize_fisheye(src, profile, out_h, out_w):
    """Render a fisheye view of src with a black invalid border.

    Pixels with radius <= profile.r_valid hold warped content; everything
    outside that circle is 0 and flagged in the returned mask (1 = fill
    region).  With all-zero coefficients, identical dims and the center on
    the pixel grid the inside-circle content equals src bit-exactly.
    """
    warped, r = warp_radial(src, profile, out_h, out_w)
    inside = r <= profile.r_valid
    data = np.where(inside[:, :, None], warped.data, np.float32(0.0))
    return (
        ImageBuffer(data, src.range_tag),
        Mask((~inside).astype(np.float32)),
    )


def level_vector(profile, n_rho, rho_max):
    """Sample the level polynomial at the polar row centers."""
    if n_rho < 1:
        raise ValueError("n_rho must be positive")
    if rho_max <= 0:
        raise ValueError("rho_max must be positive")
    radii = (np.arange(n_rho) + 0.5) * (rho_max / n_rho)
    return DistortionLevelVector(distortion_level(profile, radii), rho_max)


def expand_level_map(vec, out_h, out_w, center):
    """Rotate a level vector into a 2D map around the given center.

    Each pixel takes the linear interpolation of the vector at its own
    radius; radii beyond the last entry (or inside the first) clamp to the
    boundary entries.  Pixels that mirror each other across a pixel-grid
    symmetric center get bit-identical values.
    """
    xc, yc = center
    yy, xx = np.meshgrid(
        np.arange(out_h, dtype=np.float64),
        np.arange(out_w, dtype=np.float64),
        indexing="ij",
    )
    dx = xx - xc
    dy = yy - yc
    rho = np.sqrt(dx * dx + dy * dy)
    n = vec.values.size
    t = rho * (n / vec.rho_max) - 0.5
    i0 = np.floor(t).astype(np.int64)
    frac = t - i0
    i0c = np.clip(i0, 0, n - 1)
    i1c = np.clip(i0 + 1, 0, n - 1)
    frac = np.where(i0 < 0, 0.0, np.where(i0 >= n - 1, 0.0, frac))
    vals = vec.values[i0c] * (1.0 - frac) + vec.values[i1c] * frac
    return ImageBuffer(vals.astype(np.float32)[:, :, None], RangeTag.DATA)


# --- Text serialization ---------------------------------------------------

def profile_to_line(profile):
    """Single text line "k1 k2 k3 k4 xc yc r_valid", full float precision."""
    fields = [
        profile.k1,
        profile.k2,
        profile.k3,
        profile.k4,
        profile.center[0],
        profile.center[1],
        profile.r_valid,
    ]
    return " ".join(format(v, ".17e") for v in fields)


def profile_from_line(line):
    parts = line.split()
    if len(parts) != 7:
        raise DataError(f"profile line needs 7 fields, got {len(parts)}")
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise DataError(f"bad profile line: {exc}") from exc
    return DistortionProfile(
        vals[0], vals[1], vals[2], vals[3], (vals[4], vals[5]), vals[6]
    )
