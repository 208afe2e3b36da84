"""Toy-scale networks for outpainting, distortion perception, and revision.

All convolutions are 3x3 with same-padding.  Networks that operate on
polar rasters pad the width (theta) axis with wraparound so filters see
the seam as the periodic neighborhood it is; Cartesian networks use zero
padding.  Weights come from fan-in scaled uniform init (gain sqrt(2)
before leaky-relu, 1 before tanh or linear outputs), drawn from a seeded
generator so construction is deterministic.
"""

import hashlib
import math
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .distortion import DistortionLevelVector
from .errors import CheckpointError, NumericError

LAMBDA_AD = 0.05
LAMBDA_SD = 0.1
PYRAMID_LEVELS = 3


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 16
    hierarchies: int = 3
    convs_per_hierarchy: int = 2
    dilation_rates: tuple = (2, 4, 8, 16)
    wrap_width: bool = True


@dataclass(frozen=True)
class PerceptionConfig:
    channels: tuple = (8, 16, 24, 32)
    hidden: int = 128
    wrap_width: bool = True


@dataclass(frozen=True)
class RevisionConfig:
    base_channels: int = 16
    bottleneck_channels: int = 64
    residual_blocks: int = 9


@dataclass(frozen=True)
class CriticConfig:
    base_channels: int = 8
    clip_bound: float = 0.01
    n_critic: int = 5
    wrap_width: bool = False


def config_text(kind, config, **extra):
    """Canonical key=value description of an architecture."""
    pairs = {"kind": kind}
    for f in fields(config):
        pairs[f.name] = getattr(config, f.name)
    pairs.update(extra)
    return "\n".join(f"{k}={pairs[k]}" for k in sorted(pairs)) + "\n"


def config_fingerprint(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _conv_pair(store, rng, name, out_ch, in_ch, gain, k=3):
    bound = gain * math.sqrt(3.0 / (in_ch * k * k))
    w = store.add(f"{name}.w", rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k)))
    b = store.add(f"{name}.b", np.zeros(out_ch))
    return w, b


def _linear_pair(store, rng, name, out_f, in_f, gain):
    bound = gain * math.sqrt(3.0 / in_f)
    w = store.add(f"{name}.w", rng.uniform(-bound, bound, size=(out_f, in_f)))
    b = store.add(f"{name}.b", np.zeros(out_f))
    return w, b


_GAIN_LEAKY = math.sqrt(2.0)
_GAIN_LINEAR = 1.0


class _Net:
    seed_tag = 0

    def _rng(self, seed):
        return np.random.default_rng([int(seed), self.seed_tag])

    def _conv(self, x, name, stride=1, dilation=1, act="leaky"):
        w = self.params[f"{name}.w"]
        b = self.params[f"{name}.b"]
        pad = dilation  # same-padding for 3x3 kernels
        mode_w = "wrap" if self.wrap_width else "zero"
        y = ad.conv2d(
            x, w, b, stride=stride, dilation=dilation, pad=(pad, pad),
            pad_mode=("zero", mode_w),
        )
        if act == "leaky":
            return ad.leaky_relu(y)
        if act == "relu":
            return ad.relu(y)
        if act == "tanh":
            return ad.tanh_(y)
        return y

    def config_lines(self):
        raise NotImplementedError

    def fingerprint(self):
        return config_fingerprint(self.config_lines())


class OutpaintGenerator(_Net):
    """Hierarchical encoder/decoder that fills the masked polar band.

    Encoder hierarchies run convs_per_hierarchy 3x3 convs each and
    downsample (stride-2 conv) after every hierarchy except the last; a
    dilated residual group widens the receptive field at the bottom; the
    decoder mirrors the encoder with 2x bilinear upsampling and skip
    concatenations at matching resolutions, ending in a tanh head.
    """

    seed_tag = 1

    def __init__(self, config=GeneratorConfig(), in_channels=4, out_channels=3, seed=0):
        self.config = config
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.wrap_width = config.wrap_width
        self.params = ad.ParamStore()
        rng = self._rng(seed)
        ch = [config.base_channels * (1 << i) for i in range(config.hierarchies)]
        prev = in_channels
        for lvl, width in enumerate(ch):
            for ci in range(config.convs_per_hierarchy):
                _conv_pair(self.params, rng, f"enc{lvl}c{ci}", width, prev, _GAIN_LEAKY)
                prev = width
            if lvl + 1 < len(ch):
                _conv_pair(self.params, rng, f"down{lvl}", ch[lvl + 1], width, _GAIN_LEAKY)
                prev = ch[lvl + 1]
        for d in config.dilation_rates:
            _conv_pair(self.params, rng, f"dil{d}", ch[-1], ch[-1], _GAIN_LEAKY)
        for lvl in range(len(ch) - 2, -1, -1):
            prev = ch[lvl + 1] + ch[lvl]  # upsampled + skip
            for ci in range(config.convs_per_hierarchy):
                _conv_pair(self.params, rng, f"dec{lvl}c{ci}", ch[lvl], prev, _GAIN_LEAKY)
                prev = ch[lvl]
        _conv_pair(self.params, rng, "head", out_channels, ch[0], _GAIN_LINEAR)

    def forward(self, x):
        cfg = self.config
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(f"generator expects {self.in_channels} channels, got {c}")
        factor = 1 << (cfg.hierarchies - 1)
        if h % factor or w % factor:
            raise ValueError(
                f"generator input dims must be divisible by {factor}, got {h}x{w}"
            )
        skips = []
        for lvl in range(cfg.hierarchies):
            for ci in range(cfg.convs_per_hierarchy):
                x = self._conv(x, f"enc{lvl}c{ci}")
            if lvl + 1 < cfg.hierarchies:
                skips.append(x)
                x = self._conv(x, f"down{lvl}", stride=2)
        for d in cfg.dilation_rates:
            x = ad.add(x, self._conv(x, f"dil{d}", dilation=d))
        for lvl in range(cfg.hierarchies - 2, -1, -1):
            x = ad.bilinear_upsample2x(x)
            x = ad.concat([x, skips[lvl]], axis=1)
            for ci in range(cfg.convs_per_hierarchy):
                x = self._conv(x, f"dec{lvl}c{ci}")
        return self._conv(x, "head", act="tanh")

    def config_lines(self):
        return config_text(
            "outpaint_generator", self.config,
            in_channels=self.in_channels, out_channels=self.out_channels,
        )


def outpaint_forward(gen, polar_img, polar_fill_mask):
    """Run the generator and hard-composite: input survives where mask is 0.

    polar_img is (N, 3, n_rho, n_theta) in signed range; polar_fill_mask
    is (N, 1, n_rho, n_theta) with 1 marking the band to synthesize.
    """
    raw = gen.forward(ad.concat([polar_img, polar_fill_mask], axis=1))
    return ad.where_mask(polar_fill_mask.data > 0.5, raw, polar_img)


class DistortionPerceiver(_Net):
    """Stride-2 conv encoder plus a 2-layer head regressing the level vector.

    The encoder output is averaged over the theta axis (the distortion
    profile is rotation invariant by construction) before the fully
    connected layers.
    """

    seed_tag = 2

    def __init__(self, config, n_rho, rho_max, in_channels=3, seed=0):
        self.config = config
        self.n_rho = int(n_rho)
        self.rho_max = float(rho_max)
        self.in_channels = in_channels
        self.wrap_width = config.wrap_width
        self.params = ad.ParamStore()
        rng = self._rng(seed)
        prev = in_channels
        rows = self.n_rho
        for si, width in enumerate(config.channels):
            _conv_pair(self.params, rng, f"stage{si}", width, prev, _GAIN_LEAKY)
            prev = width
            rows = (rows + 1) // 2
        self._head_rows = rows
        _linear_pair(self.params, rng, "fc0", config.hidden, prev * rows, _GAIN_LEAKY)
        _linear_pair(self.params, rng, "fc1", self.n_rho, config.hidden, _GAIN_LINEAR)

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.in_channels or h != self.n_rho:
            raise ValueError(
                f"perceiver expects (N, {self.in_channels}, {self.n_rho}, *), "
                f"got {x.shape}"
            )
        for si in range(len(self.config.channels)):
            x = self._conv(x, f"stage{si}", stride=2)
        x = ad.mean(x, axis=3)  # collapse theta
        x = ad.reshape(x, (n, -1))
        x = ad.leaky_relu(ad.linear(x, self.params["fc0.w"], self.params["fc0.b"]))
        return ad.linear(x, self.params["fc1.w"], self.params["fc1.b"])

    def config_lines(self):
        return config_text(
            "distortion_perceiver", self.config,
            n_rho=self.n_rho, rho_max=self.rho_max, in_channels=self.in_channels,
        )


def perceive_distortion(net, polar_img):
    """Estimate the radial distortion-level vector from one polar raster."""
    data = polar_img.data if isinstance(polar_img, ad.Tensor) else polar_img
    if data.ndim == 3:
        data = data[None]
    out = net.forward(ad.Tensor(np.ascontiguousarray(data, dtype=np.float32)))
    return DistortionLevelVector(out.data.reshape(-1).astype(np.float64), net.rho_max)


class SceneReviser(_Net):
    """Residual refiner conditioned on the expanded distortion level map.

    Input is the 4-channel stack (image, level map); a 3-conv base group
    (the last two stride-2) reaches the bottleneck width, 9 residual
    blocks (conv + relu + instance norm) transform it, and two bilinear
    upsample + conv stages restore resolution before the tanh head.
    """

    seed_tag = 3
    wrap_width = False

    def __init__(self, config=RevisionConfig(), in_channels=4, out_channels=3, seed=0):
        self.config = config
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.params = ad.ParamStore()
        rng = self._rng(seed)
        base = config.base_channels
        mid = config.bottleneck_channels // 2
        bott = config.bottleneck_channels
        _conv_pair(self.params, rng, "base0", base, in_channels, _GAIN_LEAKY)
        _conv_pair(self.params, rng, "base1", mid, base, _GAIN_LEAKY)
        _conv_pair(self.params, rng, "base2", bott, mid, _GAIN_LEAKY)
        for bi in range(config.residual_blocks):
            _conv_pair(self.params, rng, f"res{bi}", bott, bott, _GAIN_LEAKY)
            self.params.add(f"res{bi}.gain", np.ones(bott))
            self.params.add(f"res{bi}.shift", np.zeros(bott))
        _conv_pair(self.params, rng, "up0", mid, bott, _GAIN_LEAKY)
        _conv_pair(self.params, rng, "up1", base, mid, _GAIN_LEAKY)
        _conv_pair(self.params, rng, "head", out_channels, base, _GAIN_LINEAR)

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(f"reviser expects {self.in_channels} channels, got {c}")
        if h % 4 or w % 4:
            raise ValueError(f"reviser input dims must be divisible by 4, got {h}x{w}")
        x = self._conv(x, "base0")
        x = self._conv(x, "base1", stride=2)
        x = self._conv(x, "base2", stride=2)
        for bi in range(self.config.residual_blocks):
            y = self._conv(x, f"res{bi}", act="relu")
            y = ad.instance_norm(y, self.params[f"res{bi}.gain"], self.params[f"res{bi}.shift"])
            x = ad.add(x, y)
        x = self._conv(ad.bilinear_upsample2x(x), "up0")
        x = self._conv(ad.bilinear_upsample2x(x), "up1")
        return self._conv(x, "head", act="tanh")

    def config_lines(self):
        return config_text(
            "scene_reviser", self.config,
            in_channels=self.in_channels, out_channels=self.out_channels,
        )


def revise_scene(net, cart_img, level_map):
    """Refine a Cartesian image given its expanded level map (both Tensors)."""
    return net.forward(ad.concat([cart_img, level_map], axis=1))


class Critic(_Net):
    """WGAN critic: 4 stride-2 convs, global average, linear score."""

    seed_tag = 4

    def __init__(self, config=CriticConfig(), in_channels=4, seed=0, seed_tag=None):
        if seed_tag is not None:
            self.seed_tag = seed_tag
        self.config = config
        self.in_channels = in_channels
        self.wrap_width = config.wrap_width
        self.params = ad.ParamStore()
        rng = self._rng(seed)
        prev = in_channels
        for si in range(4):
            width = config.base_channels * (1 << si)
            _conv_pair(self.params, rng, f"stage{si}", width, prev, _GAIN_LEAKY)
            prev = width
        _linear_pair(self.params, rng, "score", 1, prev, _GAIN_LINEAR)

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(f"critic expects {self.in_channels} channels, got {c}")
        for si in range(4):
            x = self._conv(x, f"stage{si}", stride=2)
        x = ad.mean(x, axis=(2, 3))
        return ad.linear(x, self.params["score.w"], self.params["score.b"])

    def clip(self):
        ad.clip_params(self.params, self.config.clip_bound)

    def config_lines(self):
        return config_text("critic", self.config, in_channels=self.in_channels)


# --- Losses -----------------------------------------------------------------

def pyramid_recon_loss(pred, target, exclude_mask=None, full_res_weight=1.0):
    """Masked MSE averaged over 3 bilinear pyramid scales.

    exclude_mask (N, 1, H, W) marks pixels left out of the loss (the
    corner-overrun region of polar rasters); it is downscaled alongside
    the images, so partially excluded coarse pixels get fractional
    weight.  full_res_weight > 1 shifts emphasis to the finest level
    (the stage-2 variant uses 2).
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    n, c, h, w = pred.shape
    if exclude_mask is None:
        weight = np.ones((n, 1, h, w), dtype=np.float32)
    else:
        wm = exclude_mask.data if isinstance(exclude_mask, ad.Tensor) else exclude_mask
        weight = (1.0 - wm).astype(np.float32)
    level_weights = [full_res_weight, 1.0, 1.0]
    total = None
    for li in range(PYRAMID_LEVELS):
        wsum = float(weight.sum()) * c
        if wsum == 0.0:
            raise ValueError("exclude mask leaves no pixels at some pyramid level")
        diff = ad.sub(pred, target)
        sq = ad.mul(diff, diff)
        lvl = ad.mul(ad.sum_(ad.mul(sq, ad.Tensor(weight))), ad.Tensor(
            np.asarray(level_weights[li] / wsum, dtype=np.float32)))
        total = lvl if total is None else ad.add(total, lvl)
        if li + 1 < PYRAMID_LEVELS:
            pred = avg_pool_tensor(pred)
            target = avg_pool_tensor(target)
            weight = avg_pool_array(weight)
    return ad.mul(total, ad.Tensor(np.asarray(1.0 / sum(level_weights), dtype=np.float32)))


def avg_pool_tensor(t):
    return ad.avg_pool2x(t)


def avg_pool_array(a):
    n, c, h, w = a.shape
    return a.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def wgan_losses(critic, real, fake, mask):
    """Wasserstein estimates: (critic_loss, gen_loss).

    critic_loss = mean C(fake) - mean C(real); gen_loss = -mean C(fake).
    Inputs are image tensors; the mask is concatenated as an extra
    channel on both.  Detach fake before the critic update so only the
    critic moves; weight clipping and the 5:1 update ratio live in the
    training loop.
    """
    mask_t = mask if isinstance(mask, ad.Tensor) else ad.Tensor(mask)
    c_fake = ad.mean(critic.forward(ad.concat([fake, mask_t], axis=1)))
    c_real = ad.mean(critic.forward(ad.concat([real, mask_t], axis=1)))
    return ad.sub(c_fake, c_real), -c_fake


def distortion_loss(pred, gt):
    """Mean absolute error between predicted and true level vectors."""
    if not isinstance(pred, ad.Tensor):
        pred = ad.Tensor(np.asarray(pred, dtype=np.float32))
    gt_arr = np.asarray(getattr(gt, "values", gt), dtype=np.float64)
    gt_t = ad.Tensor(np.broadcast_to(gt_arr, pred.shape).astype(np.float32))
    return ad.mean(ad.abs_(ad.sub(pred, gt_t)))


def stage1_total_loss(l_pr, l_ad=None, l_sd=None, lambda_ad=LAMBDA_AD, lambda_sd=LAMBDA_SD):
    """Weighted stage-1 objective; adversarial and distortion terms optional."""
    for name, term in (("l_pr", l_pr), ("l_ad", l_ad), ("l_sd", l_sd)):
        if term is not None and not np.isfinite(_term_value(term)):
            raise NumericError(f"non-finite loss term {name}")
    total = _as_loss(l_pr)
    if l_ad is not None:
        total = ad.add(total, ad.mul(_as_loss(l_ad), ad.Tensor(np.float32(lambda_ad))))
    if l_sd is not None:
        total = ad.add(total, ad.mul(_as_loss(l_sd), ad.Tensor(np.float32(lambda_sd))))
    return total


def _as_loss(v):
    return v if isinstance(v, ad.Tensor) else ad.Tensor(np.asarray(v, dtype=np.float32))


def _term_value(v):
    return float(v.data) if isinstance(v, ad.Tensor) else float(v)


# --- Checkpoint + config persistence -----------------------------------------

def save_net(path, net):
    """Write weights (CKP1) plus a .cfg sidecar with the architecture text."""
    ad.save_checkpoint(path, net.params)
    with open(str(path) + ".cfg", "w", encoding="utf-8") as fh:
        fh.write(net.config_lines())
        fh.write(f"fingerprint={net.fingerprint()}\n")


def load_net(path, net):
    """Load weights if the stored config fingerprint matches this net."""
    try:
        with open(str(path) + ".cfg", "r", encoding="utf-8") as fh:
            stored = fh.read()
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: missing .cfg sidecar") from exc
    expected = net.config_lines() + f"fingerprint={net.fingerprint()}\n"
    if stored != expected:
        raise CheckpointError(
            f"{path}: config fingerprint mismatch; checkpoint was written by a "
            f"different architecture"
        )
    ad.load_checkpoint(path, net.params)
