"""Dataset synthesis, two-stage training, inference, evaluation, comparison.

This is the orchestration layer: it composes the geometry (distortion,
polar), the networks, and the metrics into on-disk artifacts with fixed,
line-oriented formats.  Every random draw flows through a
``default_rng([seed, STREAM, index])`` construction so any single sample
or batch can be regenerated in isolation and runs are reproducible
bit-for-bit at a fixed thread count.
"""

from __future__ import annotations

import ast
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields as dc_fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step, merge_params, no_grad
from .distortion import (
    DistortionLevelVector,
    ParamRanges,
    expand_level_map,
    level_vector,
    profile_from_line,
    profile_to_line,
    sample_profile_with_stats,
    synthesize_fisheye,
    warp_radial,
)
from .errors import BorderDetectionError, DataError, NumericError
from .image import (
    BorderPolicy,
    ImageBuffer,
    Mask,
    RangeTag,
    luma,
    quantize_unit,
    read_array,
    read_image,
    resize_bilinear,
    sample_bilinear,
    to_signed,
    to_unit,
    write_array,
    write_image,
    write_tensor_file,
    read_tensor_file,
)
from .metrics import masked_psnr, masked_ssim, psnr, ssim, symmetry_metrics, vector_l1
from .networks import (
    Critic,
    CriticConfig,
    DistortionPerceiver,
    GeneratorConfig,
    OutpaintGenerator,
    PerceptionConfig,
    RevisionConfig,
    SceneReviser,
    distortion_loss,
    load_net,
    outpaint_forward,
    perceive_distortion,
    pyramid_recon_loss,
    revise_scene,
    save_net,
    stage1_total_loss,
    wgan_losses,
    LAMBDA_AD,
    LAMBDA_SD,
)
from .polar import (
    PolarGrid,
    default_grid,
    fill_band,
    grid_from_line,
    grid_to_line,
    polar_validity,
    to_cartesian,
    to_polar,
)

MANIFEST_MAGIC = "FXM1"
MANIFEST_NAME = "manifest.txt"
META_NAME = "meta.txt"

STAGE1_LR = 1e-3
STAGE2_LR = 5e-4
STAGE2_FULL_RES_WEIGHT = 2.0

DARK_THRESHOLD = 0.02
BORDER_RAYS = 360
SMOOTH_WINDOW = 50

# rng stream tags: every generator is default_rng([seed, STREAM, index])
_STREAM_SCENE = 1
_STREAM_PROFILE = 2
_STREAM_BATCH = 3
_STREAM_SPLIT = 4


# ---------------------------------------------------------------------------
# procedural scenes


def _draw_disc(img, cx, cy, radius, color):
    h, w = img.shape[:2]
    x0 = max(int(cx - radius) - 1, 0)
    x1 = min(int(cx + radius) + 2, w)
    y0 = max(int(cy - radius) - 1, 0)
    y1 = min(int(cy + radius) + 2, h)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.meshgrid(np.arange(y0, y1), np.arange(x0, x1), indexing="ij")
    inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius
    img[y0:y1, x0:x1][inside] = color


def _draw_line(img, p0, p1, color, thickness):
    h, w = img.shape[:2]
    steps = int(2 * max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1]))) + 2
    t = np.linspace(0.0, 1.0, steps)
    xs = np.round(p0[0] + (p1[0] - p0[0]) * t).astype(np.int64)
    ys = np.round(p0[1] + (p1[1] - p0[1]) * t).astype(np.int64)
    for off in range(thickness):
        img[np.clip(ys, 0, h - 1), np.clip(xs + off, 0, w - 1)] = color


def _scene(rng, h, w):
    """One synthetic outdoor-ish scene: sky gradient, textured ground,
    boxes on the horizon, discs in the sky, lines converging downward."""
    img = np.zeros((h, w, 3), dtype=np.float64)
    horizon = int(h * rng.uniform(0.45, 0.65))

    c_top = rng.uniform(0.35, 0.95, 3)
    c_bot = rng.uniform(0.35, 0.95, 3)
    ramp = np.linspace(0.0, 1.0, max(horizon, 1))[:, None, None]
    img[:horizon] = c_top[None, None, :] * (1.0 - ramp) + c_bot[None, None, :] * ramp

    ground = rng.uniform(0.15, 0.6, 3)
    img[horizon:] = ground[None, None, :]
    rows = h - horizon
    if rows > 0:
        amp = rng.uniform(0.03, 0.12)
        coarse = rng.uniform(-amp, amp, (5, 9, 3))
        tex = resize_bilinear(ImageBuffer(coarse.astype(np.float32), RangeTag.DATA), rows, w)
        img[horizon:] += tex.data.astype(np.float64)

    for _ in range(int(rng.integers(1, 4))):
        cx = rng.uniform(0, w - 1)
        cy = rng.uniform(0, max(horizon - 1, 1))
        radius = min(h, w) * rng.uniform(0.03, 0.10)
        _draw_disc(img, cx, cy, radius, rng.uniform(0.5, 1.0, 3))

    for _ in range(int(rng.integers(4, 10))):
        bw = max(int(w * rng.uniform(0.05, 0.22)), 1)
        bh = max(int(h * rng.uniform(0.08, 0.35)), 1)
        x0 = int(rng.uniform(0, max(w - bw, 1)))
        y1 = horizon + int(h * rng.uniform(-0.05, 0.15))
        y0 = max(y1 - bh, 0)
        y1 = min(max(y1, y0 + 1), h)
        img[y0:y1, x0 : min(x0 + bw, w)] = rng.uniform(0.1, 0.9, 3)

    for _ in range(int(rng.integers(2, 7))):
        x_bot = rng.uniform(0, w - 1)
        x_top = w / 2 + rng.uniform(-0.15, 0.15) * w
        y_top = horizon + rng.uniform(-0.05, 0.05) * h
        thickness = int(rng.integers(1, 3))
        _draw_line(img, (x_bot, h - 1), (x_top, y_top), rng.uniform(0.0, 0.4, 3), thickness)

    return ImageBuffer(np.clip(img, 0.0, 1.0).astype(np.float32))


def procedural_scenes(seed, n, height, width):
    """Deterministic list of n scenes; scene i depends only on (seed, i)."""
    if height < 16 or width < 16:
        raise ValueError("procedural scenes need at least 16x16 pixels")
    return [
        _scene(np.random.default_rng([seed, _STREAM_SCENE, i]), height, width)
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# dataset manifest

_SAMPLE_FIELDS = (
    "fisheye",
    "gt",
    "polar_fisheye",
    "polar_gt",
    "mask",
    "band",
    "validity",
    "profile",
    "levels",
)


@dataclass(frozen=True)
class SampleRecord:
    """Relative paths of one sample's files inside the dataset root."""

    sid: str
    fisheye: str
    gt: str
    polar_fisheye: str
    polar_gt: str
    mask: str
    band: str
    validity: str
    profile: str
    levels: str


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    height: int
    width: int
    grid: PolarGrid
    ranges: ParamRanges
    records: list

    def path(self, record, name):
        return self.root / getattr(record, name)

    def __len__(self):
        return len(self.records)


def _ranges_to_text(ranges):
    parts = []
    for (lo, hi), sign in zip(ranges.magnitudes, ranges.signs):
        parts.append(f"{lo:.17e},{hi:.17e},{sign}")
    return ";".join(parts)


def _ranges_from_text(text):
    magnitudes = []
    signs = []
    for part in text.split(";"):
        bits = part.split(",")
        if len(bits) != 3:
            raise DataError(f"malformed coefficient range {part!r}")
        magnitudes.append((float(bits[0]), float(bits[1])))
        signs.append(bits[2])
    return ParamRanges(tuple(magnitudes), tuple(signs))


def _sample_names(sid):
    return SampleRecord(
        sid=sid,
        fisheye=f"{sid}_fisheye.png",
        gt=f"{sid}_gt.png",
        polar_fisheye=f"{sid}_polar_fisheye.rtf",
        polar_gt=f"{sid}_polar_gt.rtf",
        mask=f"{sid}_mask.png",
        band=f"{sid}_band.png",
        validity=f"{sid}_validity.png",
        profile=f"{sid}_profile.txt",
        levels=f"{sid}_levels.rtf",
    )


def write_manifest(manifest):
    lines = [MANIFEST_MAGIC]
    lines.append(f"meta\tseed={manifest.seed}")
    lines.append(f"meta\theight={manifest.height}")
    lines.append(f"meta\twidth={manifest.width}")
    lines.append(f"meta\tgrid={grid_to_line(manifest.grid)}")
    lines.append(f"meta\tranges={_ranges_to_text(manifest.ranges)}")
    lines.append(f"meta\tcount={len(manifest.records)}")
    lines.append("columns\tid\t" + "\t".join(_SAMPLE_FIELDS))
    for rec in manifest.records:
        cells = [rec.sid] + [getattr(rec, f) for f in _SAMPLE_FIELDS]
        lines.append("sample\t" + "\t".join(cells))
    tmp = manifest.root / (MANIFEST_NAME + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, manifest.root / MANIFEST_NAME)


def load_manifest(root):
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise DataError(f"{path}: dataset manifest not found")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise DataError(f"{path}: bad manifest magic (expected {MANIFEST_MAGIC})")
    meta = {}
    records = []
    for ln in lines[1:]:
        if not ln.strip():
            continue
        cells = ln.split("\t")
        if cells[0] == "meta":
            if len(cells) != 2 or "=" not in cells[1]:
                raise DataError(f"{path}: malformed meta line {ln!r}")
            key, val = cells[1].split("=", 1)
            meta[key] = val
        elif cells[0] == "columns":
            expected = ["columns", "id"] + list(_SAMPLE_FIELDS)
            if cells != expected:
                raise DataError(f"{path}: unexpected column layout {cells[1:]!r}")
        elif cells[0] == "sample":
            if len(cells) != 2 + len(_SAMPLE_FIELDS):
                raise DataError(f"{path}: sample line has {len(cells) - 2} fields")
            records.append(SampleRecord(cells[1], *cells[2:]))
        else:
            raise DataError(f"{path}: unknown line kind {cells[0]!r}")
    for key in ("seed", "height", "width", "grid", "ranges", "count"):
        if key not in meta:
            raise DataError(f"{path}: manifest missing meta key {key!r}")
    if int(meta["count"]) != len(records):
        raise DataError(
            f"{path}: manifest count {meta['count']} != {len(records)} sample lines"
        )
    seen = set()
    for rec in records:
        if rec.sid in seen:
            raise DataError(f"{path}: duplicate sample id {rec.sid}")
        seen.add(rec.sid)
    manifest = DatasetManifest(
        root=root,
        seed=int(meta["seed"]),
        height=int(meta["height"]),
        width=int(meta["width"]),
        grid=grid_from_line(meta["grid"]),
        ranges=_ranges_from_text(meta["ranges"]),
        records=records,
    )
    for rec in records:
        for name in _SAMPLE_FIELDS:
            p = manifest.path(rec, name)
            if not p.is_file():
                raise DataError(f"{p}: sample file missing from dataset")
    return manifest


# ---------------------------------------------------------------------------
# dataset build


def _load_source_pool(source_dir):
    files = sorted(Path(source_dir).glob("*.png"))
    if not files:
        raise DataError(f"{source_dir}: no .png source images found")
    return files


def _source_scene(files, i, h, w):
    img = read_image(files[i % len(files)], force_rgb=True)
    side = min(img.height, img.width)
    y0 = (img.height - side) // 2
    x0 = (img.width - side) // 2
    crop = ImageBuffer(img.data[y0 : y0 + side, x0 : x0 + side], img.range_tag)
    return resize_bilinear(crop, h, w)


def _build_one_sample(root, sid, scene, seed, index, ranges, grid, h, w, r_valid):
    rec = _sample_names(sid)
    profile, _ = sample_profile_with_stats(
        np.random.default_rng([seed, _STREAM_PROFILE, index]),
        ranges,
        grid.center,
        r_valid,
        validate_to=grid.rho_max,
    )
    fish, mask = synthesize_fisheye(scene, profile, h, w)
    gt, _ = warp_radial(scene, profile, h, w)

    write_image(root / rec.fisheye, fish)
    write_image(root / rec.gt, gt)
    # polar rasters are computed from the decoded PNGs so that rebuilding
    # them from the stored images reproduces the exact same bytes
    fish_q = read_image(root / rec.fisheye)
    gt_q = read_image(root / rec.gt)
    write_tensor_file(root / rec.polar_fisheye, to_polar(fish_q, grid))
    write_tensor_file(root / rec.polar_gt, to_polar(gt_q, grid))

    write_image(root / rec.mask, ImageBuffer(mask.data.astype(np.float32)[..., None]))
    band = fill_band(grid, r_valid)
    write_image(root / rec.band, ImageBuffer(band.data.astype(np.float32)[..., None]))
    validity = polar_validity(grid, h, w)
    write_image(root / rec.validity, ImageBuffer(validity.data.astype(np.float32)[..., None]))

    (root / rec.profile).write_text(profile_to_line(profile) + "\n", encoding="utf-8")
    vec = level_vector(profile, grid.n_rho, grid.rho_max)
    write_array(root / rec.levels, vec.values.astype(np.float32))
    return rec


def build_dataset(
    out_dir,
    n,
    seed,
    *,
    height=128,
    width=128,
    grid=None,
    ranges=None,
    source_dir=None,
    threads=1,
):
    """Synthesize an n-sample dataset under out_dir and write its manifest.

    Sources are procedural scenes unless source_dir points at a directory
    of PNGs (center-cropped square and resized).  The manifest is written
    last, atomically; a directory with sample files but no manifest is
    treated as a failed earlier run and rejected.
    """
    if n < 1:
        raise DataError("dataset needs at least one sample")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    if not (root / MANIFEST_NAME).exists():
        leftovers = [p for p in root.iterdir() if p.suffix in (".png", ".rtf", ".txt")]
        if leftovers:
            raise DataError(
                f"{root}: contains files but no manifest (partial earlier build?); "
                f"remove the directory and rerun"
            )
    grid = grid if grid is not None else default_grid(height, width)
    ranges = ranges if ranges is not None else ParamRanges()
    r_valid = min(height, width) / 2.0

    files = _load_source_pool(source_dir) if source_dir is not None else None

    def build(i):
        sid = f"s{i:06d}"
        if files is not None:
            scene = _source_scene(files, i, height, width)
        else:
            scene = _scene(np.random.default_rng([seed, _STREAM_SCENE, i]), height, width)
        return _build_one_sample(root, sid, scene, seed, i, ranges, grid, height, width, r_valid)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(build, range(n)))
    else:
        records = [build(i) for i in range(n)]

    manifest = DatasetManifest(root, seed, height, width, grid, ranges, records)
    write_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# array loading for training


def _read_mask_png(path):
    img = read_image(path)
    return (img.data[:, :, 0] > 0.5).astype(np.float32)


def load_training_arrays(manifest, include_cartesian=False):
    """Stack a dataset into in-memory training arrays (signed range, NCHW)."""
    n = len(manifest.records)
    nr, nt = manifest.grid.n_rho, manifest.grid.n_theta
    h, w = manifest.height, manifest.width
    out = {
        "polar_fisheye": np.empty((n, 3, nr, nt), np.float32),
        "polar_gt": np.empty((n, 3, nr, nt), np.float32),
        "band": np.empty((n, 1, nr, nt), np.float32),
        "validity": np.empty((n, 1, nr, nt), np.float32),
        "levels": np.empty((n, manifest.grid.n_rho), np.float32),
    }
    if include_cartesian:
        out["fisheye"] = np.empty((n, 3, h, w), np.float32)
        out["gt"] = np.empty((n, 3, h, w), np.float32)
        out["mask"] = np.empty((n, 1, h, w), np.float32)
    for i, rec in enumerate(manifest.records):
        pf = read_tensor_file(manifest.path(rec, "polar_fisheye")).data
        pg = read_tensor_file(manifest.path(rec, "polar_gt")).data
        out["polar_fisheye"][i] = (pf * 2.0 - 1.0).transpose(2, 0, 1)
        out["polar_gt"][i] = (pg * 2.0 - 1.0).transpose(2, 0, 1)
        out["band"][i, 0] = _read_mask_png(manifest.path(rec, "band"))
        out["validity"][i, 0] = _read_mask_png(manifest.path(rec, "validity"))
        vec = read_array(manifest.path(rec, "levels"))
        if vec.shape != (manifest.grid.n_rho,):
            raise DataError(
                f"{manifest.path(rec, 'levels')}: level vector shape {vec.shape} "
                f"does not match grid n_rho {manifest.grid.n_rho}"
            )
        out["levels"][i] = vec
        if include_cartesian:
            fi = read_image(manifest.path(rec, "fisheye"), force_rgb=True).data
            gi = read_image(manifest.path(rec, "gt"), force_rgb=True).data
            out["fisheye"][i] = (fi * 2.0 - 1.0).transpose(2, 0, 1)
            out["gt"][i] = (gi * 2.0 - 1.0).transpose(2, 0, 1)
            out["mask"][i, 0] = _read_mask_png(manifest.path(rec, "mask"))
    return out


# ---------------------------------------------------------------------------
# training configuration and checkpoint metadata


@dataclass
class TrainConfig:
    stage: int = 1
    iters: int = 200
    batch: int = 4
    lr: float = None  # None -> stage default (1e-3 / 5e-4)
    lambda_ad: float = LAMBDA_AD
    lambda_sd: float = LAMBDA_SD
    adversarial: bool = True
    seed: int = 0
    checkpoint_every: int = 0
    holdout_fraction: float = 0.1
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    revision: RevisionConfig = field(default_factory=RevisionConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.iters < 1 or self.batch < 1:
            raise ValueError("iters and batch must be positive")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in [0, 1)")

    def resolved_lr(self):
        if self.lr is not None:
            return float(self.lr)
        return STAGE1_LR if self.stage == 1 else STAGE2_LR


def _config_pairs(prefix, cfg):
    return [(f"{prefix}.{f.name}", repr(getattr(cfg, f.name))) for f in dc_fields(cfg)]


def _config_from_pairs(cls, prefix, pairs):
    kwargs = {}
    for f in dc_fields(cls):
        key = f"{prefix}.{f.name}"
        if key not in pairs:
            raise DataError(f"checkpoint metadata missing key {key!r}")
        kwargs[f.name] = ast.literal_eval(pairs[key])
    return cls(**kwargs)


def _parse_kv_lines(text, where):
    pairs = {}
    for ln in text.splitlines():
        if not ln.strip():
            continue
        if "=" not in ln:
            raise DataError(f"{where}: malformed line {ln!r}")
        key, val = ln.split("=", 1)
        pairs[key] = val
    return pairs


def _write_meta(out_dir, height, width, grid, sections):
    lines = [f"image_h={height}", f"image_w={width}", f"grid={grid_to_line(grid)}"]
    for prefix, cfg in sections.items():
        lines.extend(f"{k}={v}" for k, v in _config_pairs(prefix, cfg))
    (Path(out_dir) / META_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_meta(ckpt_dir):
    path = Path(ckpt_dir) / META_NAME
    if not path.is_file():
        raise DataError(f"{path}: checkpoint metadata not found")
    pairs = _parse_kv_lines(path.read_text(encoding="utf-8"), str(path))
    for key in ("image_h", "image_w", "grid"):
        if key not in pairs:
            raise DataError(f"{path}: missing key {key!r}")
    return pairs


def _write_loss_rows(path, rows):
    lines = [f"{it} {a:.17e} {b:.17e} {c:.17e}" for it, a, b, c in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_loss_rows(path):
    rows = []
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        if not ln.strip():
            continue
        cells = ln.split()
        if len(cells) != 4:
            raise DataError(f"{path}: loss row has {len(cells)} fields, expected 4")
        rows.append((int(cells[0]), float(cells[1]), float(cells[2]), float(cells[3])))
    return rows


@dataclass
class TrainResult:
    out_dir: Path
    stage: int
    loss_rows: list
    checkpoints: dict
    holdout_vector_l1: float = None
    duration_s: float = 0.0

    def final_smoothed_loss(self, window=SMOOTH_WINDOW):
        tail = [r[1] for r in self.loss_rows[-window:]]
        return float(np.mean(tail))


def _split_indices(n, seed, holdout_fraction):
    perm = np.random.default_rng([seed, _STREAM_SPLIT]).permutation(n)
    hold = int(round(n * holdout_fraction))
    hold = min(hold, n - 1)  # keep at least one training sample
    return perm[hold:], perm[:hold]


def _check_finite(value, name, it):
    if not np.isfinite(value):
        raise NumericError(f"non-finite {name} ({value!r}) at iteration {it}")
    return float(value)


def _critic_round(critic, opt_c, rng, train_idx, batch, make_fake, reals, masks):
    """n_critic WGAN critic updates on fresh batches, then weight clipping."""
    for _ in range(critic.config.n_critic):
        b = train_idx[rng.integers(0, len(train_idx), batch)]
        with no_grad():
            fake = make_fake(b)
        c_loss, _ = wgan_losses(
            critic, Tensor(reals[b]), Tensor(fake), Tensor(masks[b])
        )
        ad.backward(c_loss)
        adam_step(critic.params, opt_c)
        critic.clip()


# ---------------------------------------------------------------------------
# stage 1: polar outpainting generator + distortion perception


def train_stage1(manifest, config, out_dir):
    """Jointly train the polar outpainting generator and the perceiver.

    Loss = pyramid reconstruction + lambda_ad * adversarial (polar critic,
    optional) + lambda_sd * level-vector MAE.  Writes gen.ckp,
    perception.ckp, critic_polar.ckp (when adversarial), stage1_loss.txt
    and meta.txt into out_dir.
    """
    if config.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 config")
    t0 = time.monotonic()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = load_training_arrays(manifest)
    grid = manifest.grid
    n = len(manifest)
    train_idx, hold_idx = _split_indices(n, config.seed, config.holdout_fraction)

    gen = OutpaintGenerator(config.generator, in_channels=4, out_channels=3, seed=config.seed)
    perc = DistortionPerceiver(
        config.perception, n_rho=grid.n_rho, rho_max=grid.rho_max, seed=config.seed
    )
    gen_params = merge_params(gen.params, perc.params)
    opt_g = AdamState(config.resolved_lr())
    critic = None
    opt_c = None
    if config.adversarial:
        critic = Critic(replace(config.critic, wrap_width=True), in_channels=4, seed=config.seed)
        opt_c = AdamState(config.resolved_lr())

    pf, pg = data["polar_fisheye"], data["polar_gt"]
    band, validity = data["band"], data["validity"]
    levels = data["levels"]
    rng = np.random.default_rng([config.seed, _STREAM_BATCH])

    def make_fake(b):
        return outpaint_forward(gen, Tensor(pf[b]), Tensor(band[b])).data

    rows = []
    for it in range(config.iters):
        if critic is not None:
            _critic_round(critic, opt_c, rng, train_idx, config.batch, make_fake, pg, band)
        b = train_idx[rng.integers(0, len(train_idx), config.batch)]
        img_t = Tensor(pf[b])
        mask_t = Tensor(band[b])
        target_t = Tensor(pg[b])
        fake = outpaint_forward(gen, img_t, mask_t)
        l_pr = pyramid_recon_loss(fake, target_t, exclude_mask=validity[b])
        l_sd = distortion_loss(perc.forward(img_t), levels[b])
        l_ad = None
        if critic is not None:
            _, l_ad = wgan_losses(critic, target_t, fake, mask_t)
        total = stage1_total_loss(l_pr, l_ad, l_sd, config.lambda_ad, config.lambda_sd)
        ad.backward(total)
        adam_step(gen_params, opt_g)
        if critic is not None:
            critic.params.zero_grads()  # drop grads that leaked through l_ad
        rows.append(
            (
                it,
                _check_finite(l_pr.data, "l_pr", it),
                _check_finite(l_ad.data, "l_ad", it) if l_ad is not None else 0.0,
                _check_finite(l_sd.data, "l_sd", it),
            )
        )
        if config.checkpoint_every > 0 and (it + 1) % config.checkpoint_every == 0:
            save_net(out_dir / f"gen_{it + 1:06d}.ckp", gen)
            save_net(out_dir / f"perception_{it + 1:06d}.ckp", perc)

    checkpoints = {"gen": out_dir / "gen.ckp", "perception": out_dir / "perception.ckp"}
    save_net(checkpoints["gen"], gen)
    save_net(checkpoints["perception"], perc)
    if critic is not None:
        checkpoints["critic_polar"] = out_dir / "critic_polar.ckp"
        save_net(checkpoints["critic_polar"], critic)
    _write_loss_rows(out_dir / "stage1_loss.txt", rows)
    _write_meta(
        out_dir,
        manifest.height,
        manifest.width,
        grid,
        {"gen": config.generator, "perception": config.perception},
    )

    holdout_l1 = None
    if len(hold_idx):
        errs = []
        with no_grad():
            for i in hold_idx:
                vec = perceive_distortion(perc, pf[i])
                errs.append(vector_l1(vec.values, levels[i].astype(np.float64)))
        holdout_l1 = float(np.mean(errs))

    return TrainResult(
        out_dir=out_dir,
        stage=1,
        loss_rows=rows,
        checkpoints=checkpoints,
        holdout_vector_l1=holdout_l1,
        duration_s=time.monotonic() - t0,
    )


# ---------------------------------------------------------------------------
# stage 2: Cartesian revision on top of a frozen stage 1


def _load_stage1_nets(ckpt_dir, meta):
    grid = grid_from_line(meta["grid"])
    gen_cfg = _config_from_pairs(GeneratorConfig, "gen", meta)
    perc_cfg = _config_from_pairs(PerceptionConfig, "perception", meta)
    gen = OutpaintGenerator(gen_cfg, in_channels=4, out_channels=3, seed=0)
    perc = DistortionPerceiver(perc_cfg, n_rho=grid.n_rho, rho_max=grid.rho_max, seed=0)
    load_net(Path(ckpt_dir) / "gen.ckp", gen)
    load_net(Path(ckpt_dir) / "perception.ckp", perc)
    return gen, perc, grid


def _stage1_revision_inputs(gen, perc, grid, data, height, width):
    """Frozen stage-1 pass over the whole dataset: Cartesian outpaint
    composites concatenated with expanded level maps, (N, 4, H, W)."""
    n = data["polar_fisheye"].shape[0]
    out = np.empty((n, 4, height, width), np.float32)
    with no_grad():
        for i in range(n):
            comp = outpaint_forward(
                gen,
                Tensor(data["polar_fisheye"][i : i + 1]),
                Tensor(data["band"][i : i + 1]),
            ).data[0]
            raster = ImageBuffer(
                np.ascontiguousarray(comp.transpose(1, 2, 0)), RangeTag.DATA
            )
            cart = to_cartesian(raster, grid, height, width)
            out[i, :3] = cart.data.transpose(2, 0, 1)
            vec = perceive_distortion(perc, data["polar_fisheye"][i])
            lm = expand_level_map(vec, height, width, grid.center)
            out[i, 3] = lm.data[:, :, 0].astype(np.float32)
    return out


def train_stage2(manifest, config, out_dir, stage1_dir):
    """Train the Cartesian reviser against ground truth, stage 1 frozen.

    The stage-1 generator and perceiver are loaded from stage1_dir, run
    once over the dataset to precompute revision inputs, and never
    updated.  out_dir receives revision.ckp, critic_cart.ckp (when
    adversarial), stage2_loss.txt, copies of the stage-1 nets, and a
    meta.txt covering all four configs.
    """
    if config.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 config")
    t0 = time.monotonic()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = _read_meta(stage1_dir)
    if int(meta["image_h"]) != manifest.height or int(meta["image_w"]) != manifest.width:
        raise DataError(
            f"stage-1 checkpoint is for {meta['image_h']}x{meta['image_w']} images, "
            f"dataset is {manifest.height}x{manifest.width}"
        )
    gen, perc, grid = _load_stage1_nets(stage1_dir, meta)
    if grid_to_line(grid) != grid_to_line(manifest.grid):
        raise DataError("stage-1 checkpoint grid does not match the dataset grid")

    data = load_training_arrays(manifest, include_cartesian=True)
    rev_in = _stage1_revision_inputs(gen, perc, grid, data, manifest.height, manifest.width)
    targets, masks = data["gt"], data["mask"]
    n = rev_in.shape[0]
    train_idx, _ = _split_indices(n, config.seed, config.holdout_fraction)

    reviser = SceneReviser(config.revision, in_channels=4, out_channels=3, seed=config.seed)
    opt_r = AdamState(config.resolved_lr())
    critic = None
    opt_c = None
    if config.adversarial:
        critic = Critic(replace(config.critic, wrap_width=False), in_channels=4, seed=config.seed)
        opt_c = AdamState(config.resolved_lr())

    rng = np.random.default_rng([config.seed, _STREAM_BATCH])

    def make_fake(b):
        return reviser.forward(Tensor(rev_in[b])).data

    rows = []
    for it in range(config.iters):
        if critic is not None:
            _critic_round(critic, opt_c, rng, train_idx, config.batch, make_fake, targets, masks)
        b = train_idx[rng.integers(0, len(train_idx), config.batch)]
        pred = reviser.forward(Tensor(rev_in[b]))
        l_pr = pyramid_recon_loss(
            pred, Tensor(targets[b]), full_res_weight=STAGE2_FULL_RES_WEIGHT
        )
        l_ad = None
        if critic is not None:
            _, l_ad = wgan_losses(critic, Tensor(targets[b]), pred, Tensor(masks[b]))
        total = stage1_total_loss(l_pr, l_ad, None, config.lambda_ad, config.lambda_sd)
        ad.backward(total)
        adam_step(reviser.params, opt_r)
        if critic is not None:
            critic.params.zero_grads()
        rows.append(
            (
                it,
                _check_finite(l_pr.data, "l_pr", it),
                _check_finite(l_ad.data, "l_ad", it) if l_ad is not None else 0.0,
                0.0,
            )
        )
        if config.checkpoint_every > 0 and (it + 1) % config.checkpoint_every == 0:
            save_net(out_dir / f"revision_{it + 1:06d}.ckp", reviser)

    checkpoints = {
        "gen": out_dir / "gen.ckp",
        "perception": out_dir / "perception.ckp",
        "revision": out_dir / "revision.ckp",
    }
    save_net(checkpoints["revision"], reviser)
    # re-save the frozen nets so out_dir is self-contained for inference
    save_net(checkpoints["gen"], gen)
    save_net(checkpoints["perception"], perc)
    if critic is not None:
        checkpoints["critic_cart"] = out_dir / "critic_cart.ckp"
        save_net(checkpoints["critic_cart"], critic)
    _write_loss_rows(out_dir / "stage2_loss.txt", rows)
    _write_meta(
        out_dir,
        manifest.height,
        manifest.width,
        grid,
        {
            "gen": _config_from_pairs(GeneratorConfig, "gen", meta),
            "perception": _config_from_pairs(PerceptionConfig, "perception", meta),
            "revision": config.revision,
        },
    )
    return TrainResult(
        out_dir=out_dir,
        stage=2,
        loss_rows=rows,
        checkpoints=checkpoints,
        duration_s=time.monotonic() - t0,
    )


# ---------------------------------------------------------------------------
# border detection and inference


def detect_valid_radius(img):
    """Estimate the valid-circle radius from the dark border.

    Casts 360 rays from the image center and takes, per ray, the first
    distance whose outward suffix-mean luma drops below DARK_THRESHOLD;
    the estimate is the median over rays that found a border.
    """
    y = luma(img)
    h, w = y.shape
    buf = ImageBuffer(y.astype(np.float32)[..., None], RangeTag.DATA)
    xc, yc = (w - 1) / 2.0, (h - 1) / 2.0
    estimates = []
    for k in range(BORDER_RAYS):
        phi = 2.0 * np.pi * k / BORDER_RAYS
        dx, dy = np.cos(phi), np.sin(phi)
        t_max = np.inf
        if dx > 1e-12:
            t_max = min(t_max, (w - 1 - xc) / dx)
        elif dx < -1e-12:
            t_max = min(t_max, (0 - xc) / dx)
        if dy > 1e-12:
            t_max = min(t_max, (h - 1 - yc) / dy)
        elif dy < -1e-12:
            t_max = min(t_max, (0 - yc) / dy)
        t = np.arange(int(np.floor(t_max)) + 1, dtype=np.float64)
        vals = sample_bilinear(buf, xc + t * dx, yc + t * dy, BorderPolicy.EDGE_CLAMP)[:, 0]
        # suffix means, innermost to edge
        csum = np.cumsum(vals[::-1])[::-1]
        counts = np.arange(vals.size, 0, -1, dtype=np.float64)
        dark = np.nonzero(csum / counts < DARK_THRESHOLD)[0]
        if dark.size:
            # border starts at the first dark sample; content ends one inward
            estimates.append(max(float(t[dark[0]]) - 1.0, 0.0))
    if not estimates:
        raise BorderDetectionError(
            "no dark border found on any ray (full-frame image?); "
            "pass the valid radius explicitly"
        )
    r = float(np.median(estimates))
    if r <= 0.0:
        raise BorderDetectionError("degenerate image: dark from the center outward")
    return r


@dataclass
class InferResult:
    image: ImageBuffer
    levels: DistortionLevelVector
    level_map: ImageBuffer
    grid: PolarGrid
    r_valid: float


def load_stage1_nets(ckpt_dir):
    """Rebuild generator + perceiver from a stage-1 (or stage-2) run dir."""
    meta = _read_meta(ckpt_dir)
    gen, perc, grid = _load_stage1_nets(ckpt_dir, meta)
    return gen, perc, grid, int(meta["image_h"]), int(meta["image_w"])


def load_inference_nets(ckpt_dir):
    """Rebuild generator + perceiver + reviser from a stage-2 run dir."""
    meta = _read_meta(ckpt_dir)
    if "revision.base_channels" not in meta:
        raise DataError(
            f"{ckpt_dir}: no revision net in checkpoint metadata; "
            f"inference needs a stage-2 training run"
        )
    gen, perc, grid = _load_stage1_nets(ckpt_dir, meta)
    rev_cfg = _config_from_pairs(RevisionConfig, "revision", meta)
    reviser = SceneReviser(rev_cfg, in_channels=4, out_channels=3, seed=0)
    load_net(Path(ckpt_dir) / "revision.ckp", reviser)
    return gen, perc, reviser, grid, int(meta["image_h"]), int(meta["image_w"])


def infer(img, ckpt_dir, r_valid=None):
    """Outpaint one fisheye image with a trained model directory.

    The valid circle of the input is preserved bit-exactly; everything
    outside it is synthesized.  Returns the final image, the estimated
    level vector, and its expanded map.
    """
    gen, perc, reviser, grid, h, w = load_inference_nets(ckpt_dir)
    if img.height != h or img.width != w:
        raise DataError(
            f"input is {img.height}x{img.width}, checkpoint was trained on {h}x{w}"
        )
    if img.channels != 3:
        raise DataError("inference input must have 3 channels")
    if r_valid is None:
        r_valid = detect_valid_radius(img)
    if not 0.0 < r_valid < grid.rho_max:
        raise DataError(f"valid radius {r_valid} outside (0, {grid.rho_max})")

    polar_img = to_polar(img, grid)
    signed = (polar_img.data.astype(np.float32) * 2.0 - 1.0).transpose(2, 0, 1)[None]
    band = fill_band(grid, r_valid)
    band_arr = band.data.astype(np.float32)[None, None]

    with no_grad():
        comp = outpaint_forward(gen, Tensor(signed), Tensor(band_arr)).data[0]
        vec = perceive_distortion(perc, signed[0])
        raster = ImageBuffer(np.ascontiguousarray(comp.transpose(1, 2, 0)), RangeTag.DATA)
        cart = to_cartesian(raster, grid, h, w)
        level_map = expand_level_map(vec, h, w, grid.center)
        cart_t = Tensor(cart.data.transpose(2, 0, 1)[None].astype(np.float32))
        lm_t = Tensor(level_map.data.transpose(2, 0, 1)[None].astype(np.float32))
        revised = revise_scene(reviser, cart_t, lm_t).data[0].transpose(1, 2, 0)

    revised_unit = (revised.astype(np.float32) + 1.0) * 0.5
    yy, xx = np.meshgrid(
        np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij"
    )
    dx = xx - grid.center[0]
    dy = yy - grid.center[1]
    inside = (np.sqrt(dx * dx + dy * dy) <= r_valid)[..., None]
    final = np.where(inside, img.data, np.clip(revised_unit, 0.0, 1.0))
    return InferResult(
        image=ImageBuffer(final.astype(np.float32)),
        levels=vec,
        level_map=level_map,
        grid=grid,
        r_valid=float(r_valid),
    )


def write_infer_outputs(result, out_path):
    """PNG plus level vector / level map tensor files next to it."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_image(out_path, result.image)
    stem = out_path.with_suffix("")
    write_array(Path(str(stem) + "_levels.rtf"), result.levels.values.astype(np.float32))
    write_tensor_file(Path(str(stem) + "_levelmap.rtf"), result.level_map)
    return out_path


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    per_sample: list
    means: dict

    _MEAN_KEYS = (
        "psnr",
        "ssim",
        "psnr_fill",
        "ssim_fill",
        "vector_l1",
        "m_hs",
        "m_vs",
        "m_cs",
        "m_rd",
    )

    def lines(self):
        out = []
        for row in self.per_sample:
            cells = " ".join(f"{k}={row[k]:.6e}" for k in self._MEAN_KEYS)
            out.append(f"{row['id']} {cells}")
        for k in self._MEAN_KEYS:
            out.append(f"mean_{k}={self.means[k]:.6e}")
        return out


def evaluate(manifest, pred_dir):
    """Score predictions in pred_dir against a dataset's ground truth.

    Expects, per sample sNNNNNN: sNNNNNN_out.png, sNNNNNN_out_levels.rtf
    and sNNNNNN_out_levelmap.rtf (the infer output layout).
    """
    pred_dir = Path(pred_dir)
    per_sample = []
    for rec in manifest.records:
        out_png = pred_dir / f"{rec.sid}_out.png"
        out_lv = pred_dir / f"{rec.sid}_out_levels.rtf"
        out_lm = pred_dir / f"{rec.sid}_out_levelmap.rtf"
        for p in (out_png, out_lv, out_lm):
            if not p.is_file():
                raise DataError(f"{p}: prediction file missing")
        pred = read_image(out_png, force_rgb=True)
        gt = read_image(manifest.path(rec, "gt"), force_rgb=True)
        mask = Mask(_read_mask_png(manifest.path(rec, "mask")).astype(np.float64))

        pred_vec = read_array(out_lv).astype(np.float64)
        gt_vec = read_array(manifest.path(rec, "levels")).astype(np.float64)

        profile = profile_from_line(
            manifest.path(rec, "profile").read_text(encoding="utf-8").strip()
        )
        exact_vec = level_vector(profile, manifest.grid.n_rho, manifest.grid.rho_max)
        gt_map = expand_level_map(exact_vec, manifest.height, manifest.width, manifest.grid.center)
        pred_map = read_tensor_file(out_lm)
        if pred_map.data.shape[:2] != (manifest.height, manifest.width):
            raise DataError(
                f"{out_lm}: level map is {pred_map.data.shape[:2]}, dataset is "
                f"{(manifest.height, manifest.width)}"
            )
        map_l1 = float(
            np.mean(np.abs(pred_map.data[:, :, 0].astype(np.float64) - gt_map.data[:, :, 0]))
        )
        sym = symmetry_metrics(pred_map, manifest.grid.center, l1=map_l1)

        per_sample.append(
            {
                "id": rec.sid,
                "psnr": psnr(pred, gt),
                "ssim": ssim(pred, gt),
                "psnr_fill": masked_psnr(pred, gt, mask),
                "ssim_fill": masked_ssim(pred, gt, mask),
                "vector_l1": vector_l1(pred_vec, gt_vec),
                "m_hs": sym.m_hs,
                "m_vs": sym.m_vs,
                "m_cs": sym.m_cs,
                "m_rd": sym.m_rd,
            }
        )
    means = {
        k: float(np.mean([row[k] for row in per_sample])) for k in EvalReport._MEAN_KEYS
    }
    return EvalReport(per_sample=per_sample, means=means)


# ---------------------------------------------------------------------------
# polar vs Cartesian training comparison


@dataclass
class CompareReport:
    seeds: tuple
    polar_final: dict
    cartesian_final: dict
    wins: int
    polar_better: bool

    def lines(self):
        out = []
        for s in self.seeds:
            p, c = self.polar_final[s], self.cartesian_final[s]
            winner = "polar" if p <= c else "cartesian"
            out.append(f"seed={s} polar={p:.6e} cartesian={c:.6e} winner={winner}")
        out.append(f"wins={self.wins}/{len(self.seeds)}")
        if self.polar_better:
            out.append("verdict=polar_better")
        else:
            out.append("verdict=polar_not_better (negative result: the polar domain "
                       "did not win the majority of seeds)")
        return out


def _generator_only_run(inputs, targets, masks, excludes, gen_cfg, seed, iters, batch, lr):
    gen = OutpaintGenerator(gen_cfg, in_channels=4, out_channels=3, seed=seed)
    opt = AdamState(lr)
    rng = np.random.default_rng([seed, _STREAM_BATCH])
    n = inputs.shape[0]
    rows = []
    for it in range(iters):
        b = rng.integers(0, n, batch)
        fake = outpaint_forward(gen, Tensor(inputs[b]), Tensor(masks[b]))
        l_pr = pyramid_recon_loss(
            fake,
            Tensor(targets[b]),
            exclude_mask=None if excludes is None else excludes[b],
        )
        ad.backward(l_pr)
        adam_step(gen.params, opt)
        rows.append((it, _check_finite(l_pr.data, "l_pr", it), 0.0, 0.0))
    return rows


def compare_domains(manifest, config, out_dir, seeds=(0, 1, 2)):
    """Train the same generator on polar vs Cartesian rasters of one dataset.

    Reconstruction loss only (no critics, no perceiver); each seed gives
    both runs identical init draws and identical batch index sequences.
    The per-seed score is the mean loss over the last SMOOTH_WINDOW
    iterations; polar wins a seed when its score is <= the Cartesian one.
    Writes loss curves, an SVG chart, and verdict.txt into out_dir.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = load_training_arrays(manifest, include_cartesian=True)
    lr = STAGE1_LR if config.lr is None else float(config.lr)
    polar_final = {}
    cart_final = {}
    curves = []
    for seed in seeds:
        p_rows = _generator_only_run(
            data["polar_fisheye"],
            data["polar_gt"],
            data["band"],
            data["validity"],
            replace(config.generator, wrap_width=True),
            seed,
            config.iters,
            config.batch,
            lr,
        )
        c_rows = _generator_only_run(
            data["fisheye"],
            data["gt"],
            data["mask"],
            None,
            replace(config.generator, wrap_width=False),
            seed,
            config.iters,
            config.batch,
            lr,
        )
        _write_loss_rows(out_dir / f"polar_seed{seed}.txt", p_rows)
        _write_loss_rows(out_dir / f"cartesian_seed{seed}.txt", c_rows)
        window = min(SMOOTH_WINDOW, len(p_rows))
        polar_final[seed] = float(np.mean([r[1] for r in p_rows[-window:]]))
        cart_final[seed] = float(np.mean([r[1] for r in c_rows[-window:]]))
        curves.append((f"polar s{seed}", "#2060c0", [r[1] for r in p_rows]))
        curves.append((f"cartesian s{seed}", "#c03020", [r[1] for r in c_rows]))

    wins = sum(1 for s in seeds if polar_final[s] <= cart_final[s])
    report = CompareReport(
        seeds=tuple(seeds),
        polar_final=polar_final,
        cartesian_final=cart_final,
        wins=wins,
        polar_better=wins * 2 > len(seeds),
    )
    (out_dir / "verdict.txt").write_text("\n".join(report.lines()) + "\n", encoding="utf-8")
    write_curve_svg(out_dir / "compare.svg", curves, title="reconstruction loss by domain")
    return report


# ---------------------------------------------------------------------------
# loss-curve SVG


def write_curve_svg(path, series, title=""):
    """Plot (label, color, values) series as polylines in a standalone SVG."""
    width, height = 720, 440
    ml, mr, mt, mb = 60, 20, 40, 40
    pw, ph = width - ml - mr, height - mt - mb
    all_vals = [v for _, _, vals in series for v in vals]
    if not all_vals:
        raise ValueError("no curve data to plot")
    lo, hi = float(min(all_vals)), float(max(all_vals))
    if hi <= lo:
        hi = lo + 1.0
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    n_max = max(len(vals) for _, _, vals in series)

    def sx(i):
        return ml + pw * (i / max(n_max - 1, 1))

    def sy(v):
        return mt + ph * (1.0 - (v - lo) / (hi - lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{ml}" y="24" font-family="monospace" font-size="14">{title}</text>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
        f'<text x="4" y="{mt + 10}" font-family="monospace" font-size="11">{hi:.3e}</text>',
        f'<text x="4" y="{mt + ph}" font-family="monospace" font-size="11">{lo:.3e}</text>',
        f'<text x="{ml + pw - 30}" y="{mt + ph + 24}" font-family="monospace" '
        f'font-size="11">{n_max - 1}</text>',
        f'<text x="{ml}" y="{mt + ph + 24}" font-family="monospace" font-size="11">0</text>',
    ]
    for li, (label, color, vals) in enumerate(series):
        pts = " ".join(f"{sx(i):.2f},{sy(v):.2f}" for i, v in enumerate(vals))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1"/>')
        parts.append(
            f'<text x="{ml + 8 + 150 * (li // 6)}" y="{mt + 14 + 14 * (li % 6)}" '
            f'font-family="monospace" font-size="11" fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
