"""Minimal reverse-mode automatic differentiation on numpy arrays.

Tensors wrap float32 (training) or float64 (verification) arrays of up
to 4 dims; convolution-facing ops use NCHW layout.  Every op builds a
backward closure, backward() replays them in reverse topological order.
The op set is exactly what the networks in this package need: conv2d
with stride/dilation and optional wraparound padding on the width axis
(the periodic theta axis of polar rasters), 2x bilinear up/downsampling,
linear, instance norm, leaky-relu/relu/tanh, and elementwise/reduction
plumbing.  Kinked activations take their derivative at 0 from the
positive side.

adam_step applies bias-corrected Adam; grad_check verifies any
scalar-valued graph against central finite differences in a float64
shadow mode, skipping parameter coordinates whose perturbation crosses
an activation kink.
"""

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import TensorFormatError

ADAM_BETA1 = 0.5
ADAM_BETA2 = 0.9
ADAM_EPS = 1e-8
LEAKY_SLOPE = 0.2
INSTANCE_NORM_EPS = 1e-5
_MAX_CKP_ELEMS = 1 << 28


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ValueError(f"tensors support at most 4 dims, got {arr.ndim}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    @property
    def needs_grad(self):
        return self.requires_grad or bool(self._parents)

    # Python operator sugar; scalars and ndarrays become constants.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))


def _as_tensor(v, dtype=np.float32):
    if isinstance(v, Tensor):
        return v
    return Tensor(np.asarray(v, dtype=dtype))


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Run forwards without recording the graph (frozen nets, inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _node(data, parents, backward_fn):
    """Wrap an op result; constants stay graph-free."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.needs_grad for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t, g):
    # Gradients are only ever rebound (grad = grad + g), never mutated in
    # place, so views passed by backward closures are safe to keep.
    if not t.needs_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    t.grad = g if t.grad is None else t.grad + g


def _sum_to(g, shape):
    """Reduce a broadcast gradient back to the source shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss):
    """Backpropagate from a scalar tensor through its graph."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar, got shape {loss.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.needs_grad:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# --- Elementwise and reduction ops ----------------------------------------

def add(a, b):
    def bwd(g):
        _accum(a, _sum_to(g, a.data.shape))
        _accum(b, _sum_to(g, b.data.shape))

    return _node(a.data + b.data, (a, b), bwd)


def sub(a, b):
    def bwd(g):
        _accum(a, _sum_to(g, a.data.shape))
        _accum(b, _sum_to(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), bwd)


def mul(a, b):
    def bwd(g):
        _accum(a, _sum_to(g * b.data, a.data.shape))
        _accum(b, _sum_to(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), bwd)


def abs_(x):
    sign = np.where(x.data >= 0, 1.0, -1.0).astype(x.dtype)

    def bwd(g):
        _accum(x, g * sign)

    return _node(np.abs(x.data), (x,), bwd)


def _reduce_count(shape, axis):
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = axis if isinstance(axis, tuple) else (axis,)
    n = 1
    for ax in axes:
        n *= shape[ax]
    return n


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis if isinstance(axis, tuple) else (axis,))
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False):
    def bwd(g):
        _accum(x, np.ascontiguousarray(_expand_reduced(g, x.data.shape, axis, keepdims)))

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), bwd)


def mean(x, axis=None, keepdims=False):
    n = _reduce_count(x.data.shape, axis)

    def bwd(g):
        _accum(x, np.ascontiguousarray(_expand_reduced(g, x.data.shape, axis, keepdims)) / n)

    return _node(x.data.mean(axis=axis, keepdims=keepdims), (x,), bwd)


def reshape(x, shape):
    def bwd(g):
        _accum(x, g.reshape(x.data.shape))

    return _node(x.data.reshape(shape), (x,), bwd)


def concat(tensors, axis=1):
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, np.ascontiguousarray(g[tuple(sl)]))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def where_mask(cond, a, b):
    """Select a where cond else b; cond is a constant boolean array.

    The selection is exact (no arithmetic), so unselected values pass
    through bit-identically.
    """
    cond = np.asarray(cond, dtype=bool)

    def bwd(g):
        _accum(a, _sum_to(np.where(cond, g, 0.0), a.data.shape))
        _accum(b, _sum_to(np.where(cond, 0.0, g), b.data.shape))

    return _node(np.where(cond, a.data, b.data), (a, b), bwd)


# --- Activations -----------------------------------------------------------

_KINK_TRACE = None


@contextmanager
def _kink_trace():
    """Collect activation sign patterns during forwards (for grad_check)."""
    global _KINK_TRACE
    prev = _KINK_TRACE
    _KINK_TRACE = []
    try:
        yield _KINK_TRACE
    finally:
        _KINK_TRACE = prev


def _record_kink(nonneg):
    if _KINK_TRACE is not None:
        _KINK_TRACE.append(np.packbits(nonneg.reshape(-1)))


def leaky_relu(x, slope=LEAKY_SLOPE):
    nonneg = x.data >= 0  # derivative at the kink comes from the positive side
    _record_kink(nonneg)
    scale = np.where(nonneg, 1.0, slope).astype(x.dtype)

    def bwd(g):
        _accum(x, g * scale)

    return _node(x.data * scale, (x,), bwd)


def relu(x):
    return leaky_relu(x, slope=0.0)


def tanh_(x):
    y = np.tanh(x.data)
    one = x.dtype.type(1.0)
    # Keep the output strictly inside (-1, 1) even where tanh saturates
    # to the closed bound in finite precision.
    y = np.clip(y, np.nextafter(-one, one), np.nextafter(one, -one))

    def bwd(g):
        _accum(x, g * (1.0 - y * y))

    return _node(y, (x,), bwd)


# --- Linear and normalization ----------------------------------------------

def linear(x, w, b=None):
    """y = x @ w.T + b with x (N, K), w (M, K), b (M,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ValueError(f"linear shape mismatch: x {x.data.shape}, w {w.data.shape}")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data

    def bwd(g):
        _accum(x, g @ w.data)
        _accum(w, g.T @ x.data)
        if b is not None:
            _accum(b, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _node(y, parents, bwd)


def instance_norm(x, gain, shift, eps=INSTANCE_NORM_EPS):
    """Normalize each (batch, channel) plane to zero mean, unit variance.

    gain and shift are per-channel (C,) parameters shared across the
    batch.
    """
    if x.data.ndim != 4:
        raise ValueError(f"instance_norm expects NCHW, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if h * w < 2:
        raise ValueError("instance_norm needs at least 2 elements per plane")
    if gain.data.shape != (c,) or shift.data.shape != (c,):
        raise ValueError("gain/shift must be per-channel vectors")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    y = gain.data[None, :, None, None] * xhat + shift.data[None, :, None, None]
    m = h * w

    def bwd(g):
        _accum(shift, g.sum(axis=(0, 2, 3)))
        _accum(gain, (g * xhat).sum(axis=(0, 2, 3)))
        gx = g * gain.data[None, :, None, None]
        gx_mean = gx.mean(axis=(2, 3), keepdims=True)
        gxx_mean = (gx * xhat).mean(axis=(2, 3), keepdims=True)
        _accum(x, inv * (gx - gx_mean - xhat * gxx_mean))

    return _node(y, (x, gain, shift), bwd)


# --- Convolution ------------------------------------------------------------

def conv2d(x, w, b=None, stride=1, dilation=1, pad=(0, 0), pad_mode=("zero", "zero")):
    """2D convolution (cross-correlation) over NCHW tensors.

    pad is symmetric (pad_h, pad_w); pad_mode gives one mode per axis,
    "zero" or "wrap".  Wraparound is only meaningful on the periodic
    theta axis, which is the width of a polar raster, so requesting it
    on the height axis is an error.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects 4D input and weights")
    n, c, h, wid = x.data.shape
    f, wc, kh, kw = w.data.shape
    if wc != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {wc}")
    mode_h, mode_w = pad_mode
    if mode_h == "wrap":
        raise ValueError("wraparound padding is only available on the width axis")
    if mode_h != "zero" or mode_w not in ("zero", "wrap"):
        raise ValueError(f"unknown pad modes {pad_mode}")
    ph, pw = pad
    if mode_w == "wrap" and pw > wid:
        raise ValueError("wrap padding wider than the axis itself")

    xp = x.data
    if ph:
        xp = np.pad(xp, ((0, 0), (0, 0), (ph, ph), (0, 0)))
    if pw:
        wmode = "wrap" if mode_w == "wrap" else "constant"
        xp = np.pad(xp, ((0, 0), (0, 0), (0, 0), (pw, pw)), mode=wmode)
    hp, wp = xp.shape[2], xp.shape[3]
    out_h = (hp - dilation * (kh - 1) - 1) // stride + 1
    out_w = (wp - dilation * (kw - 1) - 1) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ValueError(f"conv2d output would be empty for input {x.data.shape}")

    # Patch extraction by kernel-offset slicing: 9 strided views for a
    # 3x3 kernel instead of one giant fancy-index gather.
    patches = np.empty((n, c, kh, kw, out_h, out_w), dtype=xp.dtype)
    for ki in range(kh):
        for kj in range(kw):
            patches[:, :, ki, kj] = xp[
                :,
                :,
                ki * dilation : ki * dilation + (out_h - 1) * stride + 1 : stride,
                kj * dilation : kj * dilation + (out_w - 1) * stride + 1 : stride,
            ]
    cols = patches.reshape(n, c * kh * kw, out_h * out_w)
    w2 = w.data.reshape(f, -1)
    y = np.matmul(w2, cols)
    if b is not None:
        y = y + b.data[:, None]
    y = y.reshape(n, f, out_h, out_w)

    def bwd(g):
        g2 = g.reshape(n, f, -1)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
        _accum(w, dw.reshape(w.data.shape))
        if b is not None:
            _accum(b, g2.sum(axis=(0, 2)))
        if not x.needs_grad:
            return
        dcols = np.matmul(w2.T.astype(g.dtype), g2)
        dpatch = dcols.reshape(n, c, kh, kw, out_h, out_w)
        dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for ki in range(kh):
            for kj in range(kw):
                dxp[
                    :,
                    :,
                    ki * dilation : ki * dilation + (out_h - 1) * stride + 1 : stride,
                    kj * dilation : kj * dilation + (out_w - 1) * stride + 1 : stride,
                ] += dpatch[:, :, ki, kj]
        dx = dxp[:, :, ph : ph + h, :]
        if pw:
            main = np.ascontiguousarray(dx[:, :, :, pw : pw + wid])
            if mode_w == "wrap":
                main[:, :, :, wid - pw :] += dx[:, :, :, :pw]
                main[:, :, :, :pw] += dx[:, :, :, pw + wid :]
            dx = main
        _accum(x, dx)

    parents = (x, w) if b is None else (x, w, b)
    return _node(y, parents, bwd)


# --- Resampling -------------------------------------------------------------
#
# 2x align-corners-false bilinear upsampling is a fixed sparse stencil:
# out[2i] = 0.25*x[i-1] + 0.75*x[i] and out[2i+1] = 0.75*x[i] + 0.25*x[i+1]
# per axis, with the out-of-range neighbor clamped to the border.  Forward
# and transpose are pure slice arithmetic.

def _up2_last_axis(a):
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = 0.25 * prev + 0.75 * a
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return out


def _up2_last_axis_transpose(g):
    ge = g[..., 0::2]
    go = g[..., 1::2]
    dx = 0.75 * (ge + go)
    dx[..., :-1] += 0.25 * ge[..., 1:]
    dx[..., 0] += 0.25 * ge[..., 0]
    dx[..., 1:] += 0.25 * go[..., :-1]
    dx[..., -1] += 0.25 * go[..., -1]
    return dx


def bilinear_upsample2x(x):
    """Double H and W with align-corners-false bilinear interpolation."""
    if x.data.ndim != 4:
        raise ValueError("bilinear_upsample2x expects NCHW")
    y = _up2_last_axis(x.data)
    y = _up2_last_axis(y.swapaxes(2, 3)).swapaxes(2, 3)

    def bwd(g):
        dx = _up2_last_axis_transpose(np.ascontiguousarray(g.swapaxes(2, 3)))
        dx = _up2_last_axis_transpose(np.ascontiguousarray(dx.swapaxes(2, 3)))
        _accum(x, dx)

    return _node(np.ascontiguousarray(y), (x,), bwd)


def avg_pool2x(x):
    """Halve H and W by averaging 2x2 blocks (the bilinear half-scale map)."""
    if x.data.ndim != 4:
        raise ValueError("avg_pool2x expects NCHW")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2x needs even dims, got {h}x{w}")
    y = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bwd(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        _accum(x, gx.astype(g.dtype))

    return _node(y, (x,), bwd)


# --- Parameters, Adam, checkpoints -----------------------------------------

class ParamStore:
    """Ordered, uniquely named collection of trainable tensors."""

    def __init__(self):
        self._params = {}

    def add(self, name, data):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params.keys())

    def zero_grads(self):
        for p in self._params.values():
            p.grad = None


def merge_params(*stores):
    """View several stores as one (tensors shared, names must not collide)."""
    out = ParamStore()
    for store in stores:
        for name, p in store.items():
            if name in out:
                raise ValueError(f"duplicate parameter name {name!r} across stores")
            out._params[name] = p
    return out


@dataclass
class AdamState:
    """Bias-corrected Adam with per-parameter moment buffers."""

    lr: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state):
    """Apply one Adam update to every parameter, then clear gradients."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient; run backward first")
        g = p.grad.astype(p.data.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    params.zero_grads()


def clip_params(params, bound):
    """Clamp every parameter into [-bound, bound] (WGAN critic clipping)."""
    for _, p in params.items():
        np.clip(p.data, -bound, bound, out=p.data)


# --- Gradient verification ---------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int


def _signs_differ(a, b):
    if len(a) != len(b):
        return True
    return any(not np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(fn, params, n_samples=8, step=1e-5, seed=0, rel_floor=1e-4):
    """Compare analytic gradients of fn() against central differences.

    fn must build and return a scalar Tensor from the params.  The check
    runs in a float64 shadow of the parameters and restores the original
    float32 data afterwards.  Parameter coordinates whose +/-step
    perturbation flips any activation sign (crosses a kink) are skipped
    and counted, not scored.  The relative error denominator is floored
    at rel_floor so near-zero gradient pairs compare absolutely.
    """
    originals = {name: p.data for name, p in params.items()}
    try:
        for _, p in params.items():
            p.data = p.data.astype(np.float64)
        with _kink_trace() as base_signs:
            loss = fn()
            backward(loss)
        analytic = {}
        for name, p in params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} received no gradient")
            analytic[name] = p.grad.astype(np.float64).copy()
        params.zero_grads()

        rng = np.random.default_rng(seed)
        max_rel = 0.0
        checked = 0
        skipped = 0
        for name, p in params.items():
            size = p.data.size
            count = min(n_samples, size)
            coords = rng.choice(size, size=count, replace=False) if size > count else np.arange(size)
            flat = p.data.reshape(-1)
            for c in coords:
                saved = flat[c]
                flat[c] = saved + step
                with _kink_trace() as plus_signs:
                    f_plus = fn().item()
                flat[c] = saved - step
                with _kink_trace() as minus_signs:
                    f_minus = fn().item()
                flat[c] = saved
                if _signs_differ(base_signs, plus_signs) or _signs_differ(
                    base_signs, minus_signs
                ):
                    skipped += 1
                    continue
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = float(analytic[name].reshape(-1)[c])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), rel_floor)
                max_rel = max(max_rel, rel)
                checked += 1
    finally:
        for name, p in params.items():
            p.data = originals[name]
        params.zero_grads()
    return GradCheckReport(max_rel_error=max_rel, checked=checked, skipped=skipped)


# --- Checkpoint files (CKP1) --------------------------------------------------
#
# Little-endian layout: magic "CKP1", u32 param count, then per parameter:
# u16 name length, utf-8 name, u32 rank, rank x u32 dims, float32 payload.

_CKP_MAGIC = b"CKP1"


def save_checkpoint(path, params):
    with open(path, "wb") as fh:
        fh.write(_CKP_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            raw = name.encode("utf-8")
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            arr = np.asarray(p.data, dtype="<f4", order="C")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path):
    """Parse a CKP1 file into an ordered {name: float32 array} dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != _CKP_MAGIC:
        raise TensorFormatError(f"{path}: bad magic, not a CKP1 file")
    (count,) = struct.unpack_from("<I", blob, 4)
    pos = 8
    out = {}
    for _ in range(count):
        if pos + 2 > len(blob):
            raise TensorFormatError(f"{path}: truncated at parameter name length")
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        if pos + nlen + 4 > len(blob):
            raise TensorFormatError(f"{path}: truncated parameter record")
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if rank > 4:
            raise TensorFormatError(f"{path}: parameter {name!r} has rank {rank} > 4")
        if pos + 4 * rank > len(blob):
            raise TensorFormatError(f"{path}: truncated dims for {name!r}")
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        n_elems = 1
        for d in dims:
            n_elems *= d
        if n_elems > _MAX_CKP_ELEMS:
            raise TensorFormatError(f"{path}: parameter {name!r} dims overflow {dims}")
        nbytes = 4 * n_elems
        if pos + nbytes > len(blob):
            raise TensorFormatError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=n_elems, offset=pos)
        pos += nbytes
        if name in out:
            raise TensorFormatError(f"{path}: duplicate parameter {name!r}")
        out[name] = arr.reshape(dims).astype(np.float32)
    if pos != len(blob):
        raise TensorFormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return out


def load_checkpoint(path, params):
    """Load a CKP1 file into an existing ParamStore (names and shapes must match)."""
    stored = read_checkpoint(path)
    names = set(params.names())
    if set(stored.keys()) != names:
        missing = sorted(names - set(stored.keys()))
        extra = sorted(set(stored.keys()) - names)
        raise TensorFormatError(
            f"{path}: parameter names do not match store "
            f"(missing {missing}, unexpected {extra})"
        )
    for name, arr in stored.items():
        p = params[name]
        if p.data.shape != arr.shape:
            raise TensorFormatError(
                f"{path}: shape mismatch for {name!r}: "
                f"{arr.shape} vs {p.data.shape}"
            )
        p.data = arr.astype(np.float32)
