import csv
from pathlib import Path

import numpy as np
import pytest

from modnet_cli.cli import build_parser, main
from modnet_cli.geom import read_xyz
from modnet_cli.model import ModelDims, ModNetParams, zero_displacement
from modnet_cli.train import save_checkpoint

SMALL = "encoder_widths = 8,16\nfuse_width = 16\nweight_hidden = 8\ndecoder_widths = 8\n"


def run(*argv):
    with pytest.raises(SystemExit) as exc:
        main([str(a) for a in argv])
    return exc.value.code


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    code = run("synth", "--shapes", "cube,sphere", "--points", 600, "--noise", "gaussian:0.01",
               "--resolution", 2, "--seed", 3, "--out", out)
    assert code == 0
    return out


def test_no_command_prints_help(capsys):
    assert run() == 0
    assert "synth" in capsys.readouterr().out


def test_usage_errors_exit_1(tmp_path):
    assert run("train") == 1
    assert run("synth", "--points", "many") == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("epoch = 3\n")
    assert run("config", "--config", bad) == 1


def test_data_errors_exit_2(tmp_path):
    assert run("eval", "--filtered", tmp_path / "nope.xyz", "--gt", tmp_path / "nope.xyz") == 2
    assert run("train", "--data", tmp_path, "--out", tmp_path / "runs") == 2


def test_synth_layout(synth_dir):
    assert (synth_dir / "manifest.json").exists()
    assert len(list(synth_dir.glob("*_clean.xyz"))) == 2
    assert len(list(synth_dir.glob("*.off"))) == 2
    assert len(list(synth_dir.glob("*.xyz"))) == 4
    clean = read_xyz(synth_dir / "00_cube_clean.xyz")
    assert len(clean) == 600 and clean.normals is not None


def test_config_echo(capsys, tmp_path):
    assert run("config", "--seed", 7, "--out", tmp_path) == 0
    out = capsys.readouterr().out
    assert "⚙️  Effective configuration:" in out
    assert "   seed = 7" in out
    assert (tmp_path / "config.txt").exists()


def test_eval_clean_against_itself(synth_dir, tmp_path):
    clean = synth_dir / "00_cube_clean.xyz"
    code = run("eval", "--filtered", clean, "--gt", clean, "--mesh", synth_dir / "00_cube.off",
               "--names", "cube", "--out", tmp_path)
    assert code == 0
    with open(tmp_path / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["name"] == "cube"
    assert float(rows[0]["cd"]) == 0.0
    assert float(rows[0]["p2m"]) < 1e-12


def test_eval_mismatched_lists_exit_1(synth_dir, tmp_path):
    clean = synth_dir / "00_cube_clean.xyz"
    assert run("eval", "--filtered", clean, clean, "--gt", clean, "--out", tmp_path) == 1


def test_zero_displacement_denoise_is_identity(synth_dir, tmp_path):
    params = ModNetParams.init(ModelDims((8, 16), 16, 8, (8,)), 0)
    zero_displacement(params)
    ckpt = save_checkpoint(params, tmp_path / "zero.modn")
    noisy = next(synth_dir.glob("00_cube_*gaussian*.xyz"))
    code = run("denoise", "--checkpoint", ckpt, "--input", noisy, "--radii", "0.1,0.15,0.2",
               "--n-patch", 16, "--export-weights", "--out", tmp_path)
    assert code == 0
    out = read_xyz(tmp_path / f"{noisy.stem}_denoised.xyz")
    np.testing.assert_array_equal(out.points, read_xyz(noisy).points)
    weights = np.loadtxt(tmp_path / f"{noisy.stem}_weights.txt")
    assert weights.shape == (600, 9)
    np.testing.assert_allclose(weights.reshape(-1, 3, 3).sum(axis=1), 1.0, atol=1e-12)


def test_train_then_denoise(synth_dir, tmp_path):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL + "radii_frac = 0.1,0.15,0.2\nn_patch = 16\nm_final = 32\nr_final_frac = 0.1\n")
    runs = tmp_path / "runs"
    code = run("train", "--data", synth_dir, "--config", cfg, "--epochs", 2, "--batch-size", 2,
               "--patches-per-shape", 2, "--out", runs)
    assert code == 0
    assert (runs / "model.modn").exists()
    assert (runs / "config.txt").exists()
    with open(runs / "train_log.csv") as f:
        assert next(csv.reader(f))[:3] == ["epoch", "step", "lr"]

    noisy = next(synth_dir.glob("01_sphere_*gaussian*.xyz"))
    assert run("denoise", "--checkpoint", runs / "model.modn", "--input", noisy, "--config", cfg,
               "--out", tmp_path / "den") == 0
    assert len(read_xyz(tmp_path / "den" / f"{noisy.stem}_denoised.xyz")) == 600

    wide = tmp_path / "wide.cfg"
    wide.write_text(SMALL.replace("8,16", "8,32"))
    assert run("denoise", "--checkpoint", runs / "model.modn", "--input", noisy, "--config", wide,
               "--out", tmp_path / "den") == 2


def test_unwritable_output_is_a_data_error(tmp_path, capsys):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory\n")
    code = run("synth", "--shapes", "cube", "--points", 50, "--resolution", 1, "--out", blocker / "data")
    assert code == 2
    err = capsys.readouterr().err
    assert "❌ FileIOError:" in err
    assert "Traceback" not in err


@pytest.mark.parametrize("flag", ["--paper-scale", "--display-scale"])
def test_eval_display_scaling_keeps_csv_raw(synth_dir, tmp_path, capsys, flag):
    clean = synth_dir / "00_cube_clean.xyz"
    noisy = next(synth_dir.glob("00_cube_*gaussian*.xyz"))
    assert run("eval", "--filtered", noisy, "--gt", clean, "--out", tmp_path / "raw") == 0
    assert "x1e-4" not in capsys.readouterr().out
    assert run("eval", "--filtered", noisy, "--gt", clean, flag, "--out", tmp_path / "scaled") == 0
    assert "x1e-4" in capsys.readouterr().out
    with open(tmp_path / "raw" / "metrics.csv") as f:
        raw = list(csv.DictReader(f))
    with open(tmp_path / "scaled" / "metrics.csv") as f:
        scaled = list(csv.DictReader(f))
    assert raw == scaled
    assert 0.0 < float(raw[0]["cd"]) < 1e-2


def test_report_error_codes(capsys):
    from modnet_cli.error_reporter import (
        CheckpointError,
        ConfigError,
        NonFiniteError,
        VerificationError,
        report_error,
    )

    assert report_error(ConfigError("bad key")) == 1
    assert report_error(CheckpointError("truncated checkpoint")) == 2
    assert report_error(VerificationError("1 gradient check(s) failed")) == 3
    err = capsys.readouterr().err
    assert "❌ ConfigError: bad key" in err
    try:
        raise NonFiniteError("softmax")
    except NonFiniteError as e:
        assert report_error(e, verbose=True) == 2
    err = capsys.readouterr().err
    assert "op 'softmax'" in err and "Traceback" in err


def test_installer_runs_known_commands():
    script = Path(__file__).resolve().parents[1] / "install.sh"
    calls = [line.split()[1:] for line in script.read_text().splitlines() if line.startswith("modnet ")]
    assert calls
    parser = build_parser()
    for argv in calls:
        if argv[0].startswith("--"):
            continue
        args = parser.parse_args(argv)
        assert args.command == argv[0]
