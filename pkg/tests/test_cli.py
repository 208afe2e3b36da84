"""End-to-end CLI behavior: exit codes, artifacts, config handling."""

import shutil

import numpy as np
import pytest

from fisheyex.cli import main
from fisheyex.distortion import expand_level_map, level_vector, profile_from_line
from fisheyex.errors import NumericError
from fisheyex.image import read_array, read_image, read_tensor_file, write_tensor_file
from fisheyex.pipeline import MANIFEST_NAME, load_manifest, read_loss_rows
from fisheyex.polar import grid_from_line

TINY_NET_LINES = [
    "gen.base_channels=4",
    "gen.dilation_rates=(2, 4)",
    "perception.channels=(4, 8, 8, 8)",
    "perception.hidden=32",
    "revision.base_channels=4",
    "revision.bottleneck_channels=8",
    "revision.residual_blocks=2",
    "critic.base_channels=4",
]


def _write_config(path, *extra):
    path.write_text("\n".join(["# tiny test run", *TINY_NET_LINES, *extra]) + "\n")
    return path


def _perfect_predictions(dataset, pred):
    pred.mkdir(parents=True, exist_ok=True)
    for rec in dataset.records:
        shutil.copy(dataset.path(rec, "gt"), pred / f"{rec.sid}_out.png")
        shutil.copy(dataset.path(rec, "levels"), pred / f"{rec.sid}_out_levels.rtf")
        profile = profile_from_line(dataset.path(rec, "profile").read_text().strip())
        vec = level_vector(profile, dataset.grid.n_rho, dataset.grid.rho_max)
        write_tensor_file(
            pred / f"{rec.sid}_out_levelmap.rtf",
            expand_level_map(vec, dataset.height, dataset.width, dataset.grid.center),
        )
    return pred


# -------------------------------------------------------------- exit codes


def test_version_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "fisheyex" in capsys.readouterr().out


def test_missing_subcommand(capsys):
    assert main([]) == 1
    assert "usage error" in capsys.readouterr().err


def test_unknown_flag(capsys):
    assert main(["synth", "--bogus"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_train_requires_seed(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path)]) == 1
    assert "--seed" in capsys.readouterr().err


def test_train_missing_dataset_is_data_error(tmp_path, capsys):
    code = main(
        ["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path), "--seed", "0"]
    )
    assert code == 2
    assert "data error" in capsys.readouterr().err


def test_numeric_failures_exit_three(tmp_path, dataset, monkeypatch, capsys):
    def boom(manifest, config, out_dir):
        raise NumericError("non-finite loss term l_pr at iteration 1")

    monkeypatch.setattr("fisheyex.cli.train_stage1", boom)
    code = main(
        ["train", "--data", str(dataset.root), "--out", str(tmp_path), "--seed", "0"]
    )
    assert code == 3
    assert "numeric error" in capsys.readouterr().err


def test_library_value_errors_map_to_usage(tmp_path, capsys):
    code = main(
        ["synth", "--out", str(tmp_path / "ds"), "--n", "1", "--seed", "0",
         "--height", "32", "--width", "32", "--grid-ntheta", "7"]
    )
    assert code == 1
    assert "divisible by 8" in capsys.readouterr().err


def test_missing_input_file_is_data_error(tmp_path, capsys):
    code = main(
        ["polar", "--in", str(tmp_path / "nope.png"), "--out", str(tmp_path / "o.rtf"),
         "--to-polar"]
    )
    assert code == 2
    assert "data error" in capsys.readouterr().err


# ------------------------------------------------------------------- synth


@pytest.fixture()
def synth_args(tmp_path):
    out = tmp_path / "ds"
    return out, [
        "synth", "--out", str(out), "--n", "2", "--seed", "5",
        "--height", "32", "--width", "32", "--grid-nrho", "8", "--grid-ntheta", "8",
    ]


def test_synth_writes_dataset_and_record(synth_args, capsys):
    out, argv = synth_args
    assert main(argv) == 0
    assert "wrote 2 samples" in capsys.readouterr().out
    manifest = load_manifest(out)
    assert len(manifest) == 2
    assert manifest.grid.n_rho == 8 and manifest.grid.n_theta == 8
    record = (out / "run_record.txt").read_text()
    assert record.startswith("command=synth\n")
    assert "argv=" in record and "seed=5" in record


def test_synth_rerun_is_byte_identical(synth_args):
    out, argv = synth_args
    assert main(argv) == 0
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert main(argv) == 0  # rebuild over an existing manifest is allowed
    second = {p.name: p.read_bytes() for p in out.iterdir()}
    assert first == second


def test_synth_source_and_procedural_conflict(tmp_path, capsys):
    code = main(
        ["synth", "--out", str(tmp_path / "d"), "--n", "1", "--seed", "0",
         "--source", str(tmp_path), "--procedural"]
    )
    assert code == 1
    assert "mutually exclusive" in capsys.readouterr().err


def test_synth_config_file(tmp_path, capsys):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text("height=32\nwidth=32\ngrid_nrho=8\ngrid_ntheta=8\n# comment\n")
    out = tmp_path / "ds"
    code = main(
        ["synth", "--out", str(out), "--n", "1", "--seed", "1", "--config", str(cfg)]
    )
    assert code == 0
    assert load_manifest(out).height == 32


def test_synth_config_rejects_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text("bogus=1\n")
    code = main(
        ["synth", "--out", str(tmp_path / "d"), "--n", "1", "--seed", "0",
         "--config", str(cfg)]
    )
    assert code == 1
    assert "unknown config key" in capsys.readouterr().err


# ------------------------------------------------------------------- polar


def test_polar_round_trip_and_grid_line(dataset, tmp_path, capsys):
    src = str(dataset.path(dataset.records[0], "gt"))
    rtf = tmp_path / "r.rtf"
    assert main(["polar", "--in", src, "--out", str(rtf), "--to-polar"]) == 0
    sidecar = tmp_path / "r.rtf.grid"
    assert sidecar.is_file()
    grid = grid_from_line(sidecar.read_text().strip())
    assert read_tensor_file(rtf).data.shape == (grid.n_rho, grid.n_theta, 3)
    assert (tmp_path / "r.rtf.run").is_file()

    back = tmp_path / "back.png"
    assert main(["polar", "--in", str(rtf), "--out", str(back), "--to-cartesian"]) == 0
    img = read_image(back)
    assert img.data.shape == (64, 64, 3)

    # an explicit --grid-line must reproduce the sidecar-driven output
    back2 = tmp_path / "back2.png"
    code = main(
        ["polar", "--in", str(rtf), "--out", str(back2), "--to-cartesian",
         "--grid-line", sidecar.read_text().strip()]
    )
    assert code == 0
    assert back.read_bytes() == back2.read_bytes()


def test_polar_requires_exactly_one_direction(tmp_path, capsys):
    argv = ["polar", "--in", "x", "--out", "y"]
    assert main(argv) == 1
    assert main(argv + ["--to-polar", "--to-cartesian"]) == 1


def test_polar_to_cartesian_needs_grid(dataset, tmp_path, capsys):
    src = str(dataset.path(dataset.records[0], "polar_gt"))
    code = main(["polar", "--in", src, "--out", str(tmp_path / "b.png"), "--to-cartesian"])
    assert code == 1
    assert "--grid-line or a .grid sidecar" in capsys.readouterr().err


# ------------------------------------------------------------------- train


def test_train_cli_stage1_and_stage2(dataset, trained_run, tmp_path, capsys):
    cfg = _write_config(tmp_path / "train.cfg", "iters=2", "batch=2", "adversarial=off")
    run = tmp_path / "run"
    code = main(
        ["train", "--data", str(dataset.root), "--out", str(run), "--seed", "3",
         "--config", str(cfg), "--iters", "3"]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "stage 1: 3 iters" in out  # the flag overrides the file value
    assert "holdout vector_l1=" in out
    assert (run / "gen.ckp").is_file()
    assert len(read_loss_rows(run / "stage1_loss.txt")) == 3
    record = (run / "run_record.txt").read_text()
    assert "command=train" in record and "iters=3" in record

    cfg2 = _write_config(tmp_path / "t2.cfg", "stage=2", "iters=2", "batch=2")
    run2 = tmp_path / "run2"
    code = main(
        ["train", "--data", str(dataset.root), "--out", str(run2), "--seed", "3",
         "--config", str(cfg2), "--ckpt", str(trained_run)]
    )
    assert code == 0
    assert "stage 2: 2 iters" in capsys.readouterr().out
    assert (run2 / "revision.ckp").is_file()


def test_train_config_rejects_bad_section(dataset, tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("foo.bar=1\n")
    code = main(
        ["train", "--data", str(dataset.root), "--out", str(tmp_path / "r"),
         "--seed", "0", "--config", str(cfg)]
    )
    assert code == 1
    assert "unknown config section" in capsys.readouterr().err


def test_train_config_rejects_bad_literal(dataset, tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("gen.dilation_rates=(2,\n")
    code = main(
        ["train", "--data", str(dataset.root), "--out", str(tmp_path / "r"),
         "--seed", "0", "--config", str(cfg)]
    )
    assert code == 1
    assert "bad literal" in capsys.readouterr().err


def test_train_config_rejects_malformed_line(dataset, tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("just some words\n")
    code = main(
        ["train", "--data", str(dataset.root), "--out", str(tmp_path / "r"),
         "--seed", "0", "--config", str(cfg)]
    )
    assert code == 1
    assert "malformed config line" in capsys.readouterr().err


def test_train_adversarial_flag_validated(dataset, tmp_path, capsys):
    code = main(
        ["train", "--data", str(dataset.root), "--out", str(tmp_path / "r"),
         "--seed", "0", "--adversarial", "maybe"]
    )
    assert code == 1


# -------------------------------------------------------- estimate/outpaint


def test_estimate_cli(dataset, trained_run, tmp_path, capsys):
    src = str(dataset.path(dataset.records[0], "fisheye"))
    out = tmp_path / "levels.rtf"
    argv = [
        "estimate", "--in", src, "--ckpt", str(trained_run), "--out", str(out),
        "--map-out", str(tmp_path / "map.rtf"),
    ]
    assert main(argv) == 0
    assert "levels n=16" in capsys.readouterr().out
    vec = read_array(out)
    assert vec.shape == (16,)
    assert read_tensor_file(tmp_path / "map.rtf").data.shape == (64, 64, 1)
    first = (tmp_path / "levels.rtf.run").read_bytes()
    # reruns are deterministic down to the run record
    assert main(argv) == 0
    assert np.array_equal(read_array(out), vec)
    assert (tmp_path / "levels.rtf.run").read_bytes() == first


def test_single_file_outputs_create_parent_dirs(dataset, trained_run, tmp_path):
    src = str(dataset.path(dataset.records[0], "fisheye"))
    levels = tmp_path / "est" / "levels.rtf"
    argv = [
        "estimate", "--in", src, "--ckpt", str(trained_run), "--out", str(levels),
        "--map-out", str(tmp_path / "maps" / "map.rtf"),
    ]
    assert main(argv) == 0
    assert levels.is_file() and (tmp_path / "maps" / "map.rtf").is_file()
    polar_out = tmp_path / "rasters" / "p.rtf"
    assert main(["polar", "--in", src, "--to-polar", "--out", str(polar_out)]) == 0
    assert polar_out.is_file()


def test_estimate_rejects_wrong_size(trained_run, tmp_path, dataset, capsys):
    from fisheyex.image import ImageBuffer, write_image

    img = read_image(dataset.path(dataset.records[0], "fisheye"))
    small = tmp_path / "small.png"
    write_image(small, ImageBuffer(img.data[:32, :32]))
    code = main(
        ["estimate", "--in", str(small), "--ckpt", str(trained_run),
         "--out", str(tmp_path / "l.rtf")]
    )
    assert code == 2
    assert "input is 32x32" in capsys.readouterr().err


def test_outpaint_cli(dataset, trained_run, tmp_path, capsys):
    src = str(dataset.path(dataset.records[1], "fisheye"))
    out = tmp_path / "deep" / "pred.png"
    argv = [
        "outpaint", "--in", src, "--ckpt", str(trained_run), "--out", str(out),
        "--r-valid", "32",
    ]
    assert main(argv) == 0
    assert "r_valid=32.000" in capsys.readouterr().out
    for name in ("pred.png", "pred_levels.rtf", "pred_levelmap.rtf", "pred.png.run"):
        assert (tmp_path / "deep" / name).is_file(), name
    first = {p.name: p.read_bytes() for p in (tmp_path / "deep").iterdir()}
    assert main(argv) == 0
    second = {p.name: p.read_bytes() for p in (tmp_path / "deep").iterdir()}
    assert first == second  # bitwise reproducible, run record included


def test_outpaint_needs_stage2_checkpoint(dataset, tmp_path, capsys):
    cfg = _write_config(tmp_path / "c.cfg", "iters=2", "batch=2", "adversarial=off")
    run = tmp_path / "s1"
    assert main(
        ["train", "--data", str(dataset.root), "--out", str(run), "--seed", "0",
         "--config", str(cfg)]
    ) == 0
    capsys.readouterr()
    code = main(
        ["outpaint", "--in", str(dataset.path(dataset.records[0], "fisheye")),
         "--ckpt", str(run), "--out", str(tmp_path / "o.png"), "--r-valid", "32"]
    )
    assert code == 2
    assert "no revision net" in capsys.readouterr().err


# -------------------------------------------------------------------- eval


def test_eval_cli(dataset, tmp_path, capsys):
    pred = _perfect_predictions(dataset, tmp_path / "pred")
    code = main(["eval", "--ref", str(dataset.root), "--in", str(pred)])
    assert code == 0
    out = capsys.readouterr().out
    assert "mean_psnr=9.900000e+01" in out
    assert "mean_vector_l1=0.000000e+00" in out
    report = pred / "eval_report.txt"
    assert report.is_file()
    assert (pred / "eval_report.txt.run").is_file()
    explicit = tmp_path / "r.txt"
    assert main(
        ["eval", "--ref", str(dataset.root), "--in", str(pred), "--out", str(explicit)]
    ) == 0
    assert explicit.read_text() == report.read_text()


def test_eval_missing_predictions(dataset, tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    code = main(["eval", "--ref", str(dataset.root), "--in", str(tmp_path / "empty")])
    assert code == 2
    assert "prediction file missing" in capsys.readouterr().err


# ----------------------------------------------------------------- compare


def test_compare_cli(dataset, tmp_path, capsys):
    cfg = _write_config(tmp_path / "c.cfg")
    out = tmp_path / "cmp"
    code = main(
        ["compare", "--data", str(dataset.root), "--out", str(out), "--iters", "2",
         "--batch", "2", "--n", "2", "--seed", "4", "--config", str(cfg)]
    )
    assert code == 0
    stdout = capsys.readouterr().out
    assert "verdict=" in stdout and "wins=" in stdout
    for name in (
        "polar_seed4.txt", "polar_seed5.txt", "cartesian_seed4.txt",
        "cartesian_seed5.txt", "verdict.txt", "compare.svg", "run_record.txt",
    ):
        assert (out / name).is_file(), name


# ---------------------------------------------------------------- selftest


def test_selftest_cli(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "all selftest checks passed" in out
    assert "FAIL" not in out


def test_log_env_var_accepted(monkeypatch, dataset, tmp_path):
    monkeypatch.setenv("FISHEYEX_LOG", "debug")
    src = str(dataset.path(dataset.records[0], "gt"))
    assert main(["polar", "--in", src, "--out", str(tmp_path / "r.rtf"), "--to-polar"]) == 0
