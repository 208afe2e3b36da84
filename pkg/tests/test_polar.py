"""Polar resampling geometry and round trips."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fisheyex.errors import DataError
from fisheyex.image import ImageBuffer, Mask, RangeTag, gaussian_blur
from fisheyex.metrics import masked_psnr
from fisheyex.polar import (
    PolarGrid,
    default_grid,
    fill_band,
    grid_from_line,
    grid_to_line,
    polar_validity,
    to_cartesian,
    to_polar,
    to_polar_mask,
)

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------- grids


def test_default_grid_128():
    g = default_grid(128, 128)
    assert g.center == (63.5, 63.5)
    assert g.rho_max == pytest.approx(64.0 * math.sqrt(2.0))
    assert g.n_rho == 96
    assert g.n_theta == 576


def test_default_grid_nonsquare():
    g = default_grid(64, 128)
    assert g.center == (63.5, 31.5)
    assert g.rho_max == pytest.approx(math.hypot(64.0, 32.0))
    assert g.n_rho % 8 == 0 and g.n_theta % 8 == 0
    assert g.n_rho >= math.ceil(g.rho_max)
    assert g.n_theta >= math.ceil(TWO_PI * g.rho_max)


def test_default_grid_rejects_tiny_image():
    with pytest.raises(ValueError, match="at least 2x2"):
        default_grid(1, 128)


@pytest.mark.parametrize(
    "kwargs, msg",
    [
        (dict(rho_max=0.0), "rho_max"),
        (dict(rho_max=-2.0), "rho_max"),
        (dict(n_rho=3), "at least 4"),
        (dict(n_theta=3), "at least 4"),
        (dict(n_theta=12), "divisible by 8"),
        (dict(center=(float("nan"), 0.0)), "finite"),
    ],
)
def test_grid_validation(kwargs, msg):
    base = dict(center=(7.5, 7.5), rho_max=8.0, n_rho=8, n_theta=16)
    base.update(kwargs)
    with pytest.raises(ValueError, match=msg):
        PolarGrid(**base)


def test_grid_axis_values():
    g = PolarGrid((0.0, 0.0), 4.0, 8, 8)
    np.testing.assert_allclose(g.rho_values(), (np.arange(8) + 0.5) * 0.5)
    np.testing.assert_allclose(g.theta_values(), np.arange(8) * (TWO_PI / 8))
    assert g.theta_values()[0] == 0.0


def test_grid_line_round_trip():
    g = default_grid(37, 91)
    back = grid_from_line(grid_to_line(g))
    assert back == g


@given(
    xc=st.floats(-1e3, 1e3),
    yc=st.floats(-1e3, 1e3),
    rho=st.floats(0.01, 1e4),
    n_rho=st.integers(4, 200),
    k=st.integers(1, 40),
)
@settings(max_examples=50, deadline=None)
def test_grid_line_round_trip_hypothesis(xc, yc, rho, n_rho, k):
    g = PolarGrid((xc, yc), rho, n_rho, 8 * k)
    assert grid_from_line(grid_to_line(g)) == g


@pytest.mark.parametrize(
    "line, msg",
    [
        ("1 2 3 4", "5 fields"),
        ("1 2 3 4 5 6", "5 fields"),
        ("a 2.0 3.0 8 8", "bad grid line"),
        ("1.0 2.0 3.0 8.5 8", "bad grid line"),
    ],
)
def test_grid_line_errors(line, msg):
    with pytest.raises(DataError, match=msg):
        grid_from_line(line)


# ---------------------------------------------------------------- to_polar


def test_to_polar_constant_exact():
    img = ImageBuffer(np.full((32, 32, 3), 0.625, np.float32))
    g = default_grid(32, 32)
    pol = to_polar(img, g)
    assert pol.data.shape == (g.n_rho, g.n_theta, 3)
    assert np.all(pol.data == np.float32(0.625))
    assert pol.range_tag is img.range_tag


def test_to_polar_preserves_signed_tag():
    img = ImageBuffer(np.zeros((16, 16, 1), np.float32), RangeTag.SIGNED)
    pol = to_polar(img, default_grid(16, 16))
    assert pol.range_tag is RangeTag.SIGNED


def test_to_polar_row_zero_near_center_value():
    # The innermost ring sits half a radial step from the center, so with a
    # smooth image every theta sample stays close to the center pixel.
    rng = np.random.default_rng(11)
    img = gaussian_blur(
        ImageBuffer(rng.random((33, 33, 1), np.float64).astype(np.float32)), 3.0
    )
    g = default_grid(33, 33)
    centre_val = img.data[16, 16, 0]
    assert np.max(np.abs(to_polar(img, g).data[0] - centre_val)) < 0.02


# ------------------------------------------------------- to_cartesian


def _naive_to_cartesian(arr, grid, out_h, out_w):
    """Scalar re-derivation of the inverse resampling (oracle)."""
    out = np.zeros((out_h, out_w, arr.shape[2]), np.float64)
    for y in range(out_h):
        for x in range(out_w):
            dx = x - grid.center[0]
            dy = y - grid.center[1]
            rho = math.hypot(dx, dy)
            theta = math.atan2(dy, dx) % TWO_PI
            row = rho * grid.n_rho / grid.rho_max - 0.5
            col = theta * grid.n_theta / TWO_PI
            r0 = math.floor(row)
            tr = row - r0
            c0 = math.floor(col)
            tc = col - c0
            r0i = min(max(int(r0), 0), grid.n_rho - 1)
            r1i = min(max(int(r0) + 1, 0), grid.n_rho - 1)
            c0i = int(c0) % grid.n_theta
            c1i = (int(c0) + 1) % grid.n_theta
            top = arr[r0i, c0i] * (1 - tc) + arr[r0i, c1i] * tc
            bot = arr[r1i, c0i] * (1 - tc) + arr[r1i, c1i] * tc
            out[y, x] = top * (1 - tr) + bot * tr
    return out


def test_to_cartesian_matches_scalar_oracle():
    rng = np.random.default_rng(5)
    g = PolarGrid((1.5, 1.5), 3.0, 8, 8)
    raster = ImageBuffer(rng.random((8, 8, 3), np.float64).astype(np.float32))
    got = to_cartesian(raster, g, 4, 6).data
    want = _naive_to_cartesian(raster.data, g, 4, 6)
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_to_cartesian_wraps_theta_not_clamps():
    # A raster that ramps along theta: pixels just below theta = 2*pi must
    # blend the last column with column 0, not extrapolate the ramp.
    g = PolarGrid((1.5, 1.5), 4.0, 8, 8)
    data = np.tile(np.arange(8, dtype=np.float32)[None, :, None] / 8.0, (8, 1, 1))
    raster = ImageBuffer(data, RangeTag.DATA)
    out = to_cartesian(raster, g, 4, 4).data
    # pixel (y=1, x=3): dx=1.5, dy=-0.5 -> theta in (7/8, 1) * 2*pi
    dx, dy = 3 - 1.5, 1 - 1.5
    col = (math.atan2(dy, dx) % TWO_PI) * 8 / TWO_PI
    assert 7.0 < col < 8.0
    tc = col - 7.0
    want = (7.0 / 8.0) * (1 - tc) + 0.0 * tc
    assert out[1, 3, 0] == pytest.approx(want, abs=1e-6)


def test_to_cartesian_center_pixel_copies_inner_ring():
    # Integer center: rho = 0 gives theta = 0 and both row neighbors clamp
    # to ring 0, so the center pixel is a bitwise copy of raster[0, 0].
    g = default_grid(65, 65)
    assert g.center == (32.0, 32.0)
    rng = np.random.default_rng(2)
    raster = ImageBuffer(rng.random((g.n_rho, g.n_theta, 3)).astype(np.float32))
    out = to_cartesian(raster, g, 65, 65)
    assert np.array_equal(out.data[32, 32], raster.data[0, 0])


def test_to_cartesian_corner_clamps_to_outer_ring():
    # Corner (0,0) sits at rho = 1.5*sqrt(2) > rho_max, so both radial
    # neighbors clamp to the outermost ring; theta = 5*pi/4 lands exactly
    # on column 5, so the corner recovers raster[7, 5] after the f32 cast.
    g = PolarGrid((1.5, 1.5), 2.0, 8, 8)
    rng = np.random.default_rng(3)
    raster = ImageBuffer(rng.random((8, 8, 1)).astype(np.float32))
    out = to_cartesian(raster, g, 4, 4)
    assert np.array_equal(out.data[0, 0], raster.data[7, 5])


def test_to_cartesian_rejects_mismatched_raster():
    g = default_grid(32, 32)
    bad = ImageBuffer(np.zeros((g.n_rho + 8, g.n_theta, 1), np.float32))
    with pytest.raises(DataError, match="do not match"):
        to_cartesian(bad, g, 32, 32)


def test_round_trip_psnr_inside_inscribed_circle():
    rng = np.random.default_rng(8)
    img = gaussian_blur(
        ImageBuffer(rng.random((64, 64, 3), np.float64).astype(np.float32)), 2.0
    )
    g = default_grid(64, 64)
    back = to_cartesian(to_polar(img, g), g, 64, 64)
    yy, xx = np.mgrid[0:64, 0:64]
    inside = (xx - 31.5) ** 2 + (yy - 31.5) ** 2 <= 31.5**2
    mask = Mask(inside.astype(np.float32))
    assert masked_psnr(back, img, mask) >= 30.0


# ------------------------------------------------------------- masks


def test_to_polar_mask_binary_and_orientation():
    # Left half of the image marked: theta = pi looks left (1), theta = 0
    # looks right (0).
    data = np.zeros((32, 32), np.float32)
    data[:, :16] = 1.0
    g = PolarGrid((15.5, 15.5), 12.0, 8, 8)
    pol = to_polar_mask(Mask(data), g)
    assert set(np.unique(pol.data)) <= {0.0, 1.0}
    assert np.all(pol.data[2:, 4] == 1.0)  # theta = pi, rho >= 3.75
    assert np.all(pol.data[:, 0] == 0.0)  # theta = 0


def test_polar_validity_hand_case():
    # 4x4 image, center (1.5, 1.5): along theta=0 the edge is 1.5 away, so
    # rings 0.25..1.25 are inside and 1.75+ overrun; along the diagonal the
    # cutoff stretches to 1.5*sqrt(2).
    g = PolarGrid((1.5, 1.5), 4.0, 8, 8)
    v = polar_validity(g, 4, 4)
    np.testing.assert_array_equal(v.data[:, 0], [0, 0, 0, 1, 1, 1, 1, 1])
    np.testing.assert_array_equal(v.data[:, 1], [0, 0, 0, 0, 1, 1, 1, 1])


def test_polar_validity_monotone_along_rays():
    g = default_grid(48, 80)
    v = polar_validity(g, 48, 80).data
    assert np.all(np.diff(v, axis=0) >= 0.0)
    assert np.all(v[0] == 0.0)


def test_fill_band_rows():
    g = PolarGrid((1.5, 1.5), 4.0, 8, 8)
    band = fill_band(g, 2.0)
    np.testing.assert_array_equal(band.data[:, 3], [0, 0, 0, 0, 1, 1, 1, 1])
    assert np.all(band.data == band.data[:, :1])  # whole rows


@pytest.mark.parametrize("r", [0.0, -1.0, 4.0, 5.0])
def test_fill_band_rejects_out_of_range_radius(r):
    g = PolarGrid((1.5, 1.5), 4.0, 8, 8)
    with pytest.raises(ValueError, match="strictly inside"):
        fill_band(g, r)
