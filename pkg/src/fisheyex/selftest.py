"""Fast internal consistency checks for the installed package.

Each check is self-contained, seconds-scale, and needs no dataset or
training run; `fisheyex selftest` reports one line per check and exits
nonzero if any fail.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .distortion import (
    DistortionLevelVector,
    ParamRanges,
    expand_level_map,
    sample_profile,
    warp_radial,
)
from .image import (
    BorderPolicy,
    ImageBuffer,
    Mask,
    RangeTag,
    gaussian_blur,
    read_array,
    sample_bilinear,
    write_array,
)
from .metrics import fov_gain, psnr, symmetry_metrics
from .polar import default_grid, to_cartesian, to_polar


def _check_fov_gain():
    h = w = 200
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    r = np.sqrt((xx - (w - 1) / 2) ** 2 + (yy - (h - 1) / 2) ** 2)
    mask = Mask((r > w / 2).astype(np.float64))
    gain = fov_gain(mask)
    expected = (4.0 - np.pi) / np.pi
    assert abs(gain - expected) < 5e-3, f"gain {gain:.5f} vs {expected:.5f}"
    return f"gain={gain:.4f}"


def _check_level_map_symmetry():
    vec = DistortionLevelVector(np.linspace(1.0, 0.4, 48), 90.51)
    lm = expand_level_map(vec, 96, 128, (63.5, 47.5))
    rep = symmetry_metrics(lm, (63.5, 47.5))
    assert rep.m_hs == 0.0 and rep.m_vs == 0.0 and rep.m_cs == 0.0, rep
    return "m_hs=m_vs=m_cs=0"


def _check_warp_against_loop():
    rng = np.random.default_rng(11)
    src = ImageBuffer(rng.random((20, 20, 3), dtype=np.float32))
    profile = sample_profile(5, ParamRanges(), (9.5, 9.5), 10.0)
    warped, _ = warp_radial(src, profile, 20, 20)
    worst = 0.0
    for y in range(20):
        for x in range(20):
            dx, dy = x - 9.5, y - 9.5
            r = np.sqrt(dx * dx + dy * dy)
            lvl = 1.0
            r2 = r * r
            acc = 0.0
            for k in reversed(profile.coeffs):
                acc = (acc + k) * r2
            lvl += acc
            val = sample_bilinear(
                src, np.array([9.5 + dx * lvl]), np.array([9.5 + dy * lvl]),
                BorderPolicy.EDGE_CLAMP,
            )[0]
            worst = max(worst, float(np.max(np.abs(val - warped.data[y, x]))))
    assert worst <= 1e-5, f"max warp deviation {worst:.2e}"
    return f"max_dev={worst:.1e}"


def _check_polar_round_trip():
    rng = np.random.default_rng(3)
    noise = ImageBuffer(rng.random((64, 64, 3), dtype=np.float32))
    img = gaussian_blur(noise, 2.0)
    grid = default_grid(64, 64)
    back = to_cartesian(to_polar(img, grid), grid, 64, 64)
    score = psnr(img, back)
    assert score >= 30.0, f"round trip psnr {score:.2f} dB"
    return f"psnr={score:.1f}dB"


def _check_grad():
    rng = np.random.default_rng(0)
    params = ad.ParamStore()
    w = params.add("w", rng.normal(0, 0.2, (4, 3, 3, 3)))
    g = params.add("g", np.ones(4))
    b = params.add("b", np.zeros(4))
    x = ad.Tensor(rng.normal(0, 0.5, (2, 3, 8, 8)).astype(np.float32))

    def loss():
        y = ad.conv2d(x, w, None, pad=(1, 1), pad_mode=("zero", "wrap"))
        y = ad.instance_norm(y, g, b)
        return ad.mean(ad.mul(ad.tanh_(y), ad.tanh_(y)))

    rep = ad.grad_check(loss, params, n_samples=6, seed=1)
    assert rep.max_rel_error <= 1e-4, f"rel err {rep.max_rel_error:.2e}"
    return f"rel_err={rep.max_rel_error:.1e}"


def _check_tensor_round_trip():
    rng = np.random.default_rng(9)
    with tempfile.TemporaryDirectory() as tmp:
        arr = rng.normal(size=(5, 7, 3)).astype(np.float32)
        p = Path(tmp) / "t.rtf"
        write_array(p, arr)
        back = read_array(p)
        assert back.shape == arr.shape and np.array_equal(back, arr), "tensor file mismatch"

        params = ad.ParamStore()
        params.add("a", rng.normal(size=(3, 4)))
        params.add("b", rng.normal(size=(4,)))
        ck = Path(tmp) / "t.ckp"
        ad.save_checkpoint(ck, params)
        stored = {k: v.data.copy() for k, v in params.items()}
        for _, v in params.items():
            v.data[...] = 0.0
        ad.load_checkpoint(ck, params)
        for k, v in params.items():
            assert np.array_equal(v.data, stored[k]), f"checkpoint mismatch on {k}"
    return "tensor+checkpoint exact"


def _check_bilinear_identity():
    rng = np.random.default_rng(4)
    img = ImageBuffer(rng.random((9, 11, 3), dtype=np.float32))
    ys, xs = np.meshgrid(np.arange(9), np.arange(11), indexing="ij")
    vals = sample_bilinear(img, xs.ravel().astype(float), ys.ravel().astype(float),
                           BorderPolicy.ZERO_FILL)
    assert np.array_equal(vals.reshape(9, 11, 3).astype(np.float32), img.data), \
        "bilinear not exact at integer coordinates"
    return "exact at lattice"


def _check_adam_step():
    params = ad.ParamStore()
    p = params.add("p", np.array([1.0], np.float32))
    p.grad = np.array([0.5], np.float32)
    state = ad.AdamState(lr=1e-3)
    ad.adam_step(params, state)
    expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8)
    assert abs(float(p.data[0]) - expected) < 1e-6, f"{p.data[0]} vs {expected}"
    assert p.grad is None, "gradient not cleared after the step"
    return "first step matches closed form"


_CHECKS = (
    ("fov_gain_inscribed_circle", _check_fov_gain),
    ("level_map_symmetry_zero", _check_level_map_symmetry),
    ("warp_matches_per_pixel_loop", _check_warp_against_loop),
    ("polar_round_trip_psnr", _check_polar_round_trip),
    ("gradient_check", _check_grad),
    ("tensor_and_checkpoint_io", _check_tensor_round_trip),
    ("bilinear_lattice_identity", _check_bilinear_identity),
    ("adam_first_step", _check_adam_step),
)


def run_selftest():
    """Run every check; returns (name, passed, detail) triples."""
    results = []
    for name, fn in _CHECKS:
        try:
            detail = fn()
            results.append((name, True, detail))
        except Exception as exc:  # noqa: BLE001 - report, don't crash the runner
            results.append((name, False, f"{type(exc).__name__}: {exc}"))
    return results
