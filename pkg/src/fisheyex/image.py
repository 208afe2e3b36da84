"""Image buffers, bilinear resampling, and lossless raster I/O.

Conventions used across the package:

- A pixel's center sits at integer coordinates: pixel (ix, iy) covers the
  point (float(ix), float(iy)).  An H x W image therefore spans
  [0, W-1] x [0, H-1] in continuous coordinates.
- Arrays are row-major float32 with shape (H, W, C); x indexes columns,
  y indexes rows.
- Value ranges are explicit.  "unit" is [0, 1] (PNG-decoded content),
  "signed" is [-1, 1] (network activations), "data" is any finite float
  (distortion level maps, raw tensor files).  Unit and signed buffers are
  clamped on ingest; out-of-range values are never rejected.
"""

import enum
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ImageFormatError, TensorFormatError

# Keep dimension counts sane when reading untrusted tensor files.
_MAX_TENSOR_RANK = 8
_MAX_TENSOR_ELEMS = 1 << 30


class RangeTag(enum.Enum):
    UNIT = "unit"
    SIGNED = "signed"
    DATA = "data"

    @property
    def interval(self):
        """(lo, hi) clamp interval, or None for unconstrained data."""
        if self is RangeTag.UNIT:
            return (0.0, 1.0)
        if self is RangeTag.SIGNED:
            return (-1.0, 1.0)
        return None

    @property
    def width(self):
        """Peak-to-peak width used by PSNR/SSIM; None for data buffers."""
        iv = self.interval
        return None if iv is None else iv[1] - iv[0]


class BorderPolicy(enum.Enum):
    ZERO_FILL = "zero"
    EDGE_CLAMP = "clamp"


@dataclass
class ImageBuffer:
    """Float32 raster with an explicit value-range tag.

    data is (H, W, C) with C in {1, 3}.  Unit/signed buffers are clamped
    to their interval at construction; data buffers only need finiteness.
    """

    data: np.ndarray
    range_tag: RangeTag = RangeTag.UNIT

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"image data must be (H, W, C), got shape {arr.shape}")
        if arr.shape[2] not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {arr.shape[2]}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image dims must be positive, got {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError("image data contains non-finite values")
        iv = self.range_tag.interval
        if iv is not None:
            arr = np.clip(arr, iv[0], iv[1])
        self.data = arr

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


@dataclass
class Mask:
    """Binary (H, W) float32 raster; 1 marks the region to fill."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data), dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"mask data must be (H, W), got shape {arr.shape}")
        if not np.all((arr == 0.0) | (arr == 1.0)):
            raise ValueError("mask values must be exactly 0 or 1")
        self.data = arr

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    def fill_fraction(self):
        return float(self.data.mean())


def sample_bilinear(img, x, y, policy=BorderPolicy.EDGE_CLAMP):
    """Bilinear lookup at continuous coordinates.

    Parameters
    ----------
    img : ImageBuffer or (H, W, C) ndarray
    x, y : scalar or ndarray of sample coordinates (pixel centers at
        integers).
    policy : BorderPolicy
        ZERO_FILL treats everything outside the raster as 0; EDGE_CLAMP
        extends the border pixel.

    Returns
    -------
    ndarray of shape x.shape + (C,), float64.  At exact integer
    coordinates the stored pixel value is returned without rounding
    error.
    """
    arr = img.data if isinstance(img, ImageBuffer) else np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w = arr.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    scalar = x.ndim == 0 and y.ndim == 0
    x, y = np.atleast_1d(x), np.atleast_1d(y)
    x, y = np.broadcast_arrays(x, y)

    x0f = np.floor(x)
    y0f = np.floor(y)
    tx = x - x0f
    ty = y - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)

    out = np.zeros(x.shape + (arr.shape[2],), dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            wgt = (tx if dx else 1.0 - tx) * (ty if dy else 1.0 - ty)
            xi_c = np.clip(xi, 0, w - 1)
            yi_c = np.clip(yi, 0, h - 1)
            vals = arr[yi_c, xi_c, :].astype(np.float64)
            if policy is BorderPolicy.ZERO_FILL:
                inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
                vals = vals * inside[..., None]
            out += vals * wgt[..., None]
    return out[0] if scalar else out


def resize_bilinear(img, out_h, out_w):
    """Resize with the align-corners-false center mapping.

    Output pixel (ox, oy) samples the source at
    ((ox + 0.5) * W/out_w - 0.5, (oy + 0.5) * H/out_h - 0.5) with edge
    clamping.  Resizing to identical dims returns a bit-identical copy.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be positive")
    h, w = img.height, img.width
    if (out_h, out_w) == (h, w):
        return ImageBuffer(img.data.copy(), img.range_tag)
    oy, ox = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
    sx = (ox + 0.5) * (w / out_w) - 0.5
    sy = (oy + 0.5) * (h / out_h) - 0.5
    vals = sample_bilinear(img, sx, sy, BorderPolicy.EDGE_CLAMP)
    return ImageBuffer(vals.astype(np.float32), img.range_tag)


def to_signed(img):
    """Map a unit-range buffer onto [-1, 1] (v -> 2v - 1)."""
    if img.range_tag is not RangeTag.UNIT:
        raise ValueError(f"expected a unit-range buffer, got {img.range_tag.value}")
    return ImageBuffer(img.data * 2.0 - 1.0, RangeTag.SIGNED)


def to_unit(img):
    """Map a signed-range buffer onto [0, 1] ((v + 1) / 2)."""
    if img.range_tag is not RangeTag.SIGNED:
        raise ValueError(f"expected a signed-range buffer, got {img.range_tag.value}")
    return ImageBuffer((img.data + 1.0) * 0.5, RangeTag.UNIT)


def luma(img):
    """Rec. 601 luma plane, (H, W) float64.  1-channel input passes through."""
    arr = img.data if isinstance(img, ImageBuffer) else np.asarray(img)
    if arr.ndim == 2:
        return arr.astype(np.float64)
    if arr.shape[2] == 1:
        return arr[:, :, 0].astype(np.float64)
    r, g, b = (arr[:, :, i].astype(np.float64) for i in range(3))
    return 0.299 * r + 0.587 * g + 0.114 * b


def gaussian_blur(img, sigma):
    """Separable Gaussian blur with edge clamping, kernel radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = int(np.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (t / sigma) ** 2)
    kernel /= kernel.sum()
    arr = img.data.astype(np.float64)
    padded = np.pad(arr, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    arr = sum(kernel[i] * padded[i : i + img.height] for i in range(2 * radius + 1))
    padded = np.pad(arr, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    arr = sum(kernel[i] * padded[:, i : i + img.width] for i in range(2 * radius + 1))
    return ImageBuffer(arr.astype(np.float32), img.range_tag)


# --- PNG I/O ------------------------------------------------------------

def read_image(path, force_rgb=False):
    """Decode an 8-bit, 1- or 3-channel PNG into a unit-range buffer.

    Byte v decodes to v / 255.  With force_rgb a grayscale image is
    broadcast to 3 identical channels; otherwise channel count is kept.
    """
    try:
        with Image.open(path) as pil:
            if pil.format != "PNG":
                raise ImageFormatError(f"{path}: not a PNG file (format={pil.format})")
            if pil.mode == "I;16" or pil.mode.startswith("I"):
                raise ImageFormatError(f"{path}: unsupported bit depth (mode={pil.mode})")
            if pil.mode not in ("L", "RGB"):
                raise ImageFormatError(
                    f"{path}: unsupported channel layout (mode={pil.mode})"
                )
            raw = np.asarray(pil, dtype=np.uint8)
    except FileNotFoundError:
        raise
    except ImageFormatError:
        raise
    except Exception as exc:
        raise ImageFormatError(f"{path}: failed to decode PNG ({exc})") from exc
    if raw.ndim == 2:
        raw = raw[:, :, None]
    if force_rgb and raw.shape[2] == 1:
        raw = np.repeat(raw, 3, axis=2)
    return ImageBuffer(raw.astype(np.float32) / 255.0, RangeTag.UNIT)


def write_image(path, img):
    """Encode a unit-range buffer as an 8-bit non-interlaced PNG.

    Values are rounded to the nearest byte, so write(read(write(x)))
    produces the same file bytes as write(x).
    """
    if img.range_tag is not RangeTag.UNIT:
        raise ValueError(
            f"write_image expects a unit-range buffer, got {img.range_tag.value}; "
            "convert with to_unit first"
        )
    raw = np.clip(np.round(img.data * 255.0), 0, 255).astype(np.uint8)
    if raw.shape[2] == 1:
        pil = Image.fromarray(raw[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(raw, mode="RGB")
    pil.save(path, format="PNG")


def quantize_unit(img):
    """Round a unit buffer to the 8-bit lattice (what a PNG round trip keeps)."""
    if img.range_tag is not RangeTag.UNIT:
        raise ValueError("quantize_unit expects a unit-range buffer")
    return ImageBuffer(
        np.round(img.data * 255.0).astype(np.float32) / np.float32(255.0),
        RangeTag.UNIT,
    )


# --- Raw tensor files (RTF1) ---------------------------------------------
#
# Layout, all little-endian: magic "RTF1", u32 rank, rank x u32 dims,
# then prod(dims) float32 values in C order.

_RTF_MAGIC = b"RTF1"


def write_array(path, arr):
    """Write any float array as an RTF1 file (payload stored as float32)."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_RTF_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_array(path):
    """Read an RTF1 file back into a float32 ndarray."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != _RTF_MAGIC:
        raise TensorFormatError(f"{path}: bad magic, not an RTF1 file")
    (rank,) = struct.unpack_from("<I", blob, 4)
    if rank == 0 or rank > _MAX_TENSOR_RANK:
        raise TensorFormatError(f"{path}: unreasonable rank {rank}")
    header_end = 8 + 4 * rank
    if len(blob) < header_end:
        raise TensorFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    n_elems = 1
    for d in dims:
        if d == 0:
            raise TensorFormatError(f"{path}: zero-sized dimension")
        n_elems *= d
        if n_elems > _MAX_TENSOR_ELEMS:
            raise TensorFormatError(f"{path}: dimension overflow {dims}")
    if len(blob) != header_end + 4 * n_elems:
        raise TensorFormatError(
            f"{path}: payload length {len(blob) - header_end} does not match "
            f"dims {dims}"
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=header_end)
    return flat.reshape(dims).astype(np.float32)


def write_tensor_file(path, img):
    """Persist an ImageBuffer losslessly as RTF1 (rank 3: H, W, C)."""
    write_array(path, img.data)


def read_tensor_file(path):
    """Load an RTF1 file as an ImageBuffer.

    Rank 2 is treated as single-channel.  The format carries no range
    metadata, so the result is tagged as unclamped data; round trips
    through write_tensor_file are bit-exact.
    """
    arr = read_array(path)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise TensorFormatError(
            f"{path}: expected an image-shaped tensor, got dims {arr.shape}"
        )
    return ImageBuffer(arr, RangeTag.DATA)
