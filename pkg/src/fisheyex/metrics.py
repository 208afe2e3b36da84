"""Quality and symmetry metrics.

PSNR/SSIM follow the usual definitions with the peak/dynamic range taken
from the buffer's range tag.  The symmetry triple measures how far a 2D
map is from mirror symmetry about a center: for every pixel whose mirror
lands inside the image, the absolute difference to the bilinearly sampled
mirror value is averaged.  A map that is radially symmetric about a
pixel-grid symmetric center scores exactly zero on all three.
"""

from dataclasses import dataclass

import numpy as np

from .image import BorderPolicy, luma, sample_bilinear

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class SymmetryReport:
    """Horizontal/vertical/central mirror scores plus an optional L1 term.

    m_rd aggregates everything: l1 (0 when absent) + m_hs + m_vs + m_cs.
    """

    m_hs: float
    m_vs: float
    m_cs: float
    l1: float = None

    @property
    def m_rd(self):
        base = 0.0 if self.l1 is None else self.l1
        return base + self.m_hs + self.m_vs + self.m_cs

    def lines(self):
        out = []
        if self.l1 is not None:
            out.append(f"l1={self.l1:.6e}")
        out.append(f"m_hs={self.m_hs:.6e}")
        out.append(f"m_vs={self.m_vs:.6e}")
        out.append(f"m_cs={self.m_cs:.6e}")
        out.append(f"m_rd={self.m_rd:.6e}")
        return out


def _mirror_score(arr, xs, ys, mx, my, w, h):
    """Mean |v - v_mirror| over pixels whose mirror stays in bounds."""
    valid = (mx >= 0) & (mx <= w - 1) & (my >= 0) & (my <= h - 1)
    if not np.any(valid):
        raise ValueError("no pixel has an in-bounds mirror; center outside image?")
    mirrored = sample_bilinear(arr, mx[valid], my[valid], BorderPolicy.EDGE_CLAMP)
    own = arr[ys[valid], xs[valid], 0].astype(np.float64)
    return float(np.mean(np.abs(own - mirrored[:, 0])))


def symmetry_metrics(map_img, center, l1=None):
    """Score mirror symmetry of a 1-channel map about a center.

    Parameters
    ----------
    map_img : ImageBuffer with 1 channel
    center : (xc, yc) continuous coordinates of the symmetry center
    l1 : optional L1 term carried into the aggregate m_rd

    Returns
    -------
    SymmetryReport with the three mirror means.  Mirrors are the point
    reflections x -> 2*xc - x and y -> 2*yc - y, sampled bilinearly;
    pixels whose mirror leaves the image are skipped.
    """
    if map_img.channels != 1:
        raise ValueError(f"symmetry metrics need a 1-channel map, got {map_img.channels}")
    arr = map_img.data[:, :, 0]
    h, w = arr.shape
    xc, yc = center
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    mx = 2.0 * xc - xs
    my = 2.0 * yc - ys
    arr3 = arr[:, :, None]
    m_hs = _mirror_score(arr3, xs, ys, mx, ys.astype(np.float64), w, h)
    m_vs = _mirror_score(arr3, xs, ys, xs.astype(np.float64), my, w, h)
    m_cs = _mirror_score(arr3, xs, ys, mx, my, w, h)
    return SymmetryReport(m_hs=m_hs, m_vs=m_vs, m_cs=m_cs, l1=l1)


def vector_l1(a, b):
    """Mean absolute difference of two equal-length 1D vectors."""
    va = np.asarray(getattr(a, "values", a), dtype=np.float64)
    vb = np.asarray(getattr(b, "values", b), dtype=np.float64)
    if va.shape != vb.shape:
        raise ValueError(f"vector shapes differ: {va.shape} vs {vb.shape}")
    return float(np.mean(np.abs(va - vb)))


def _check_pair(a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"image shapes differ: {a.data.shape} vs {b.data.shape}")
    if a.range_tag is not b.range_tag:
        raise ValueError(
            f"range tags differ: {a.range_tag.value} vs {b.range_tag.value}"
        )
    peak = a.range_tag.width
    if peak is None:
        raise ValueError("metrics need a bounded range tag (unit or signed)")
    return peak


def psnr(a, b):
    """Peak signal-to-noise ratio in dB, capped at 99 for identical inputs.

    The peak is the width of the shared range tag (1 for unit, 2 for
    signed); the MSE runs over all pixels and channels.
    """
    peak = _check_pair(a, b)
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


def masked_psnr(a, b, mask):
    """PSNR restricted to pixels where mask == 1."""
    peak = _check_pair(a, b)
    sel = mask.data == 1.0
    if not np.any(sel):
        raise ValueError("mask selects no pixels")
    diff = a.data.astype(np.float64)[sel] - b.data.astype(np.float64)[sel]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


def _gaussian_window():
    t = np.arange(SSIM_WINDOW, dtype=np.float64) - (SSIM_WINDOW - 1) / 2.0
    g = np.exp(-0.5 * (t / SSIM_SIGMA) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def _windowed_mean(x, win):
    view = np.lib.stride_tricks.sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
    return np.einsum("ijkl,kl->ij", view, win)


def ssim_map(a, b):
    """Local SSIM over every full 11x11 window.

    Returns (map, offset): map[i, j] scores the window centered at
    (i + offset, j + offset) in image coordinates.
    """
    peak = _check_pair(a, b)
    if a.height < SSIM_WINDOW or a.width < SSIM_WINDOW:
        raise ValueError(
            f"image {a.height}x{a.width} smaller than the {SSIM_WINDOW}x"
            f"{SSIM_WINDOW} SSIM window"
        )
    x = luma(a)
    y = luma(b)
    win = _gaussian_window()
    mu_x = _windowed_mean(x, win)
    mu_y = _windowed_mean(y, win)
    xx = _windowed_mean(x * x, win) - mu_x * mu_x
    yy = _windowed_mean(y * y, win) - mu_y * mu_y
    xy = _windowed_mean(x * y, win) - mu_x * mu_y
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return num / den, (SSIM_WINDOW - 1) // 2


def ssim(a, b):
    """Mean structural similarity on the Rec. 601 luma plane."""
    smap, _ = ssim_map(a, b)
    return float(smap.mean())


def masked_ssim(a, b, mask):
    """Mean local SSIM over windows whose center pixel has mask == 1."""
    smap, off = ssim_map(a, b)
    centers = mask.data[off : off + smap.shape[0], off : off + smap.shape[1]] == 1.0
    if not np.any(centers):
        raise ValueError("mask selects no full SSIM windows")
    return float(smap[centers].mean())


def fov_gain(mask):
    """Outpainted-area ratio: count(mask == 1) / count(mask == 0)."""
    ones = int(np.count_nonzero(mask.data == 1.0))
    zeros = mask.data.size - ones
    if zeros == 0:
        raise ValueError("mask has no valid pixels; gain undefined")
    return ones / zeros
