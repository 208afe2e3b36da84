"""Command-line interface.

Exit codes: 0 success, 1 usage problems, 2 malformed or missing data,
3 numeric failures.  Set FISHEYEX_LOG=debug|info|warning|error to change
log verbosity.  Subcommands that accept --config read a key=value file
('#' starts a comment); explicit flags win over file values.
"""

from __future__ import annotations

import argparse
import ast
import logging
import os
import shlex
import sys
from dataclasses import fields as dc_fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .distortion import expand_level_map
from .errors import DataError, NumericError, UsageError
from .image import ImageBuffer, RangeTag, read_image, read_tensor_file, write_array, write_image, write_tensor_file
from .networks import CriticConfig, GeneratorConfig, PerceptionConfig, RevisionConfig
from .pipeline import (
    TrainConfig,
    build_dataset,
    compare_domains,
    evaluate,
    infer,
    load_manifest,
    load_stage1_nets,
    train_stage1,
    train_stage2,
    write_infer_outputs,
)
from .polar import PolarGrid, default_grid, grid_from_line, grid_to_line, to_cartesian, to_polar

log = logging.getLogger("fisheyex")

_LOG_LEVELS = {
    "debug": logging.DEBUG,
    "info": logging.INFO,
    "warning": logging.WARNING,
    "error": logging.ERROR,
}

_NET_PREFIXES = {
    "gen": GeneratorConfig,
    "perception": PerceptionConfig,
    "revision": RevisionConfig,
    "critic": CriticConfig,
}

_TRAIN_SCALARS = {
    "stage": int,
    "iters": int,
    "batch": int,
    "lr": float,
    "lambda_ad": float,
    "lambda_sd": float,
    "adversarial": "bool",
    "seed": int,
    "checkpoint_every": int,
    "holdout_fraction": float,
}

_SYNTH_KEYS = {
    "height": int,
    "width": int,
    "grid_nrho": int,
    "grid_ntheta": int,
    "threads": int,
}


class _Parser(argparse.ArgumentParser):
    """argparse variant whose errors map to exit code 1, not 2."""

    def error(self, message):
        raise UsageError(message)


def _parse_bool(raw):
    text = str(raw).strip().lower()
    if text in ("on", "true", "1", "yes"):
        return True
    if text in ("off", "false", "0", "no"):
        return False
    raise UsageError(f"expected on/off, got {raw!r}")


def _read_config_file(path):
    pairs = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot read config file: {exc}") from exc
    for ln in text.splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        if "=" not in ln:
            raise UsageError(f"{path}: malformed config line {ln!r}")
        key, val = ln.split("=", 1)
        pairs[key.strip()] = val.strip()
    return pairs


def _convert(key, raw, conv):
    if not isinstance(raw, str):
        return raw
    try:
        if conv == "bool":
            return _parse_bool(raw)
        return conv(raw)
    except (ValueError, UsageError) as exc:
        raise UsageError(f"config key {key}: {exc}") from exc


def _train_config_from(file_pairs, flag_pairs):
    merged = dict(file_pairs)
    merged.update({k: v for k, v in flag_pairs.items() if v is not None})
    scalars = {}
    nets = {prefix: {} for prefix in _NET_PREFIXES}
    for key, raw in merged.items():
        if "." in key:
            prefix, fname = key.split(".", 1)
            if prefix not in _NET_PREFIXES:
                raise UsageError(f"unknown config section {prefix!r} in key {key!r}")
            cls = _NET_PREFIXES[prefix]
            if fname not in {f.name for f in dc_fields(cls)}:
                raise UsageError(f"unknown config key {key!r}")
            try:
                nets[prefix][fname] = ast.literal_eval(raw) if isinstance(raw, str) else raw
            except (ValueError, SyntaxError) as exc:
                raise UsageError(f"config key {key}: bad literal {raw!r}") from exc
        elif key in _TRAIN_SCALARS:
            scalars[key] = _convert(key, raw, _TRAIN_SCALARS[key])
        else:
            raise UsageError(f"unknown config key {key!r}")
    try:
        return TrainConfig(
            generator=GeneratorConfig(**nets["gen"]),
            perception=PerceptionConfig(**nets["perception"]),
            revision=RevisionConfig(**nets["revision"]),
            critic=CriticConfig(**nets["critic"]),
            **scalars,
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training configuration: {exc}") from exc


def _effective_pairs(config):
    out = {}
    for f in dc_fields(TrainConfig):
        val = getattr(config, f.name)
        if f.name in ("generator", "perception", "revision", "critic"):
            prefix = "gen" if f.name == "generator" else f.name
            for nf in dc_fields(val):
                out[f"{prefix}.{nf.name}"] = repr(getattr(val, nf.name))
        else:
            out[f.name] = repr(val)
    return out


def _write_run_record(target, command, argv, pairs):
    """Deterministic record of what ran: no timestamps, sorted keys."""
    lines = [f"command={command}", f"version={__version__}"]
    if argv is not None:
        lines.append(f"argv={shlex.join(argv)}")
    lines.extend(f"{k}={v}" for k, v in sorted(pairs.items()))
    target = Path(target)
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _custom_grid(height, width, n_rho, n_theta):
    base = default_grid(height, width)
    if n_rho is None and n_theta is None:
        return base
    return PolarGrid(
        center=base.center,
        rho_max=base.rho_max,
        n_rho=n_rho if n_rho is not None else base.n_rho,
        n_theta=n_theta if n_theta is not None else base.n_theta,
    )


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args, argv):
    pairs = _read_config_file(args.config) if args.config else {}
    for key in pairs:
        if key not in _SYNTH_KEYS:
            raise UsageError(f"unknown config key {key!r}")
    merged = {k: _convert(k, v, _SYNTH_KEYS[k]) for k, v in pairs.items()}
    for key in _SYNTH_KEYS:
        flag = getattr(args, key)
        if flag is not None:
            merged[key] = flag
    height = merged.get("height", 128)
    width = merged.get("width", 128)
    threads = merged.get("threads", 1)
    if args.source is not None and args.procedural:
        raise UsageError("--source and --procedural are mutually exclusive")
    grid = _custom_grid(height, width, merged.get("grid_nrho"), merged.get("grid_ntheta"))
    manifest = build_dataset(
        args.out,
        args.n,
        args.seed,
        height=height,
        width=width,
        grid=grid,
        source_dir=args.source,
        threads=threads,
    )
    record = {
        "n": args.n,
        "seed": args.seed,
        "height": height,
        "width": width,
        "grid": grid_to_line(grid),
        "source": args.source or "procedural",
        "threads": threads,
    }
    _write_run_record(Path(args.out) / "run_record.txt", "synth", argv, record)
    print(f"wrote {len(manifest)} samples to {args.out} (grid: {grid_to_line(grid)})")
    return 0


def _ensure_parent(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _cmd_polar(args, argv):
    if args.to_polar == args.to_cartesian:
        raise UsageError("pass exactly one of --to-polar / --to-cartesian")
    out = _ensure_parent(args.out)
    if args.to_polar:
        img = read_image(args.infile, force_rgb=True)
        grid = _custom_grid(img.height, img.width, args.grid_nrho, args.grid_ntheta)
        write_tensor_file(out, to_polar(img, grid))
        Path(str(out) + ".grid").write_text(grid_to_line(grid) + "\n", encoding="utf-8")
        record = {"in": args.infile, "grid": grid_to_line(grid), "direction": "to_polar"}
        print(f"wrote polar raster {out} (grid: {grid_to_line(grid)})")
    else:
        raster = read_tensor_file(args.infile)
        if args.grid_line is not None:
            grid = grid_from_line(args.grid_line)
        else:
            sidecar = Path(args.grid_file if args.grid_file else str(args.infile) + ".grid")
            if not sidecar.is_file():
                raise UsageError(
                    "to-cartesian needs --grid-line or a .grid sidecar next to the input"
                )
            grid = grid_from_line(sidecar.read_text(encoding="utf-8").strip())
        height = args.height if args.height is not None else int(round(2 * grid.center[1] + 1))
        width = args.width if args.width is not None else int(round(2 * grid.center[0] + 1))
        img = to_cartesian(raster, grid, height, width)
        unit = ImageBuffer(np.clip(img.data, 0.0, 1.0))
        write_image(out, unit)
        record = {"in": args.infile, "grid": grid_to_line(grid), "direction": "to_cartesian"}
        print(f"wrote image {out} ({height}x{width})")
    _write_run_record(Path(str(out) + ".run"), "polar", argv, record)
    return 0


def _cmd_estimate(args, argv):
    _, perc, grid, h, w = load_stage1_nets(args.ckpt)
    img = read_image(args.infile, force_rgb=True)
    if img.height != h or img.width != w:
        raise DataError(f"input is {img.height}x{img.width}, checkpoint expects {h}x{w}")
    from .networks import perceive_distortion
    from .autodiff import no_grad

    raster = to_polar(img, grid)
    signed = (raster.data.astype(np.float32) * 2.0 - 1.0).transpose(2, 0, 1)
    with no_grad():
        vec = perceive_distortion(perc, signed)
    out = _ensure_parent(args.out)
    write_array(out, vec.values.astype(np.float32))
    if args.map_out:
        write_tensor_file(_ensure_parent(args.map_out), expand_level_map(vec, h, w, grid.center))
    _write_run_record(
        Path(str(out) + ".run"), "estimate", argv, {"in": args.infile, "ckpt": args.ckpt}
    )
    print(
        f"levels n={vec.values.size} rho_max={vec.rho_max:.6g} "
        f"min={vec.values.min():.6g} mean={vec.values.mean():.6g} max={vec.values.max():.6g}"
    )
    return 0


def _cmd_outpaint(args, argv):
    img = read_image(args.infile, force_rgb=True)
    result = infer(img, args.ckpt, r_valid=args.r_valid)
    out = write_infer_outputs(result, args.out)
    _write_run_record(
        Path(str(out) + ".run"),
        "outpaint",
        argv,
        {"in": args.infile, "ckpt": args.ckpt, "r_valid": f"{result.r_valid:.17e}"},
    )
    print(f"outpainted {args.infile} -> {out} (r_valid={result.r_valid:.3f})")
    return 0


def _cmd_train(args, argv):
    manifest = load_manifest(args.data)
    file_pairs = _read_config_file(args.config) if args.config else {}
    flag_pairs = {
        "stage": args.stage,
        "iters": args.iters,
        "batch": args.batch,
        "lr": args.lr,
        "lambda_ad": args.lambda_ad,
        "lambda_sd": args.lambda_sd,
        "adversarial": args.adversarial,
        "seed": args.seed,
    }
    config = _train_config_from(file_pairs, flag_pairs)
    if config.stage == 1:
        result = train_stage1(manifest, config, args.out)
    else:
        stage1_dir = args.ckpt if args.ckpt is not None else args.out
        result = train_stage2(manifest, config, args.out, stage1_dir)
    record = _effective_pairs(config)
    record["data"] = str(args.data)
    _write_run_record(Path(args.out) / "run_record.txt", "train", argv, record)
    final = result.loss_rows[-1]
    print(
        f"stage {config.stage}: {config.iters} iters in {result.duration_s:.1f}s; "
        f"final l_pr={final[1]:.6e} l_ad={final[2]:.6e} l_sd={final[3]:.6e}"
    )
    if result.holdout_vector_l1 is not None:
        print(f"holdout vector_l1={result.holdout_vector_l1:.6e}")
    return 0


def _cmd_eval(args, argv):
    manifest = load_manifest(args.ref)
    report = evaluate(manifest, args.infile)
    out = _ensure_parent(args.out) if args.out else Path(args.infile) / "eval_report.txt"
    out.write_text("\n".join(report.lines()) + "\n", encoding="utf-8")
    _write_run_record(
        Path(str(out) + ".run"), "eval", argv, {"ref": str(args.ref), "pred": str(args.infile)}
    )
    for key, val in report.means.items():
        print(f"mean_{key}={val:.6e}")
    print(f"report: {out}")
    return 0


def _cmd_compare(args, argv):
    manifest = load_manifest(args.data)
    file_pairs = _read_config_file(args.config) if args.config else {}
    flag_pairs = {"iters": args.iters, "batch": args.batch, "lr": args.lr}
    config = _train_config_from(file_pairs, flag_pairs)
    seeds = tuple(range(args.seed, args.seed + args.n))
    report = compare_domains(manifest, config, args.out, seeds=seeds)
    record = _effective_pairs(config)
    record["data"] = str(args.data)
    record["seeds"] = ",".join(str(s) for s in seeds)
    _write_run_record(Path(args.out) / "run_record.txt", "compare", argv, record)
    for ln in report.lines():
        print(ln)
    return 0


def _cmd_selftest(args, argv):
    from .selftest import run_selftest

    failures = 0
    for name, ok, detail in run_selftest():
        mark = "ok  " if ok else "FAIL"
        suffix = f": {detail}" if detail else ""
        print(f"{mark} {name}{suffix}")
        failures += 0 if ok else 1
    if failures:
        print(f"{failures} selftest check(s) failed")
        return 3
    print("all selftest checks passed")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    top = _Parser(prog="fisheyex", description="fisheye synthesis and polar outpainting")
    top.add_argument("--version", action="version", version=f"fisheyex {__version__}")
    sub = top.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="synthesize a fisheye dataset", parents=[])
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--grid-nrho", dest="grid_nrho", type=int, default=None)
    p.add_argument("--grid-ntheta", dest="grid_ntheta", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--source", default=None, help="directory of source PNGs")
    p.add_argument("--procedural", action="store_true", help="force procedural scenes")
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("polar", help="transform between Cartesian and polar rasters")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--to-polar", dest="to_polar", action="store_true")
    p.add_argument("--to-cartesian", dest="to_cartesian", action="store_true")
    p.add_argument("--grid-nrho", dest="grid_nrho", type=int, default=None)
    p.add_argument("--grid-ntheta", dest="grid_ntheta", type=int, default=None)
    p.add_argument("--grid-line", dest="grid_line", default=None, help="'xc yc rho_max n_rho n_theta'")
    p.add_argument("--grid-file", dest="grid_file", default=None, help="path to a .grid sidecar")
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.set_defaults(func=_cmd_polar)

    p = sub.add_parser("estimate", help="estimate the distortion-level vector")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--ckpt", required=True, help="training run directory")
    p.add_argument("--out", required=True, help="output level-vector tensor file")
    p.add_argument("--map-out", dest="map_out", default=None, help="also write the expanded map")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("outpaint", help="outpaint one fisheye image")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--ckpt", required=True, help="stage-2 training run directory")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--r-valid", dest="r_valid", type=float, default=None)
    p.set_defaults(func=_cmd_outpaint)

    p = sub.add_parser("train", help="train stage 1 or stage 2")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--stage", type=int, choices=(1, 2), default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lambda-ad", dest="lambda_ad", type=float, default=None)
    p.add_argument("--lambda-sd", dest="lambda_sd", type=float, default=None)
    p.add_argument("--adversarial", choices=("on", "off"), default=None)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--ckpt", default=None, help="stage-1 run dir (stage 2 only)")
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score predictions against a dataset")
    p.add_argument("--ref", required=True, help="reference dataset directory")
    p.add_argument("--in", dest="infile", required=True, help="prediction directory")
    p.add_argument("--out", default=None, help="report path (default: <pred>/eval_report.txt)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("compare", help="polar vs Cartesian training comparison")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--n", type=int, default=3, help="number of seeds")
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("selftest", help="run fast internal consistency checks")
    p.set_defaults(func=_cmd_selftest)

    return top


def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    level = _LOG_LEVELS.get(os.environ.get("FISHEYEX_LOG", "").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            raise UsageError("missing subcommand (see --help)")
        return args.func(args, argv)
    except (UsageError, ValueError) as exc:
        # library-level ValueErrors (bad grid dims, bad config values) are
        # invocation problems from the CLI's point of view
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
