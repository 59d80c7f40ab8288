"""End-to-end CLI tests on a tiny synthetic clip."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from midline3d.cli import main


@pytest.fixture(scope="module")
def tiny_clip(tmp_path_factory):
    out = tmp_path_factory.mktemp("cliclip")
    from midline3d.curvemodel import CurveConstraints
    from midline3d.renderer import RenderLimits
    from midline3d.synthgen import SceneSpec, SequenceSpec, generate_sequence, write_clip

    seq = SequenceSpec(
        scene=SceneSpec(
            constraints=CurveConstraints(n_vertices=32, l_min=0.7, l_max=1.4),
            limits=RenderLimits(sigma_min=2.0, iota_min=0.2, image_size=64),
            length=1.0,
            noise_sigma=0.01,
            camera_error_px=0.0,
            sigma_true=(2.4, 2.8),
            rho_true=(1.0, 1.4),
            iota_true=(0.6, 0.8),
            focal_px=1500.0,
            depth_mm=60.0,
        ),
        n_frames=2,
        curvature_walk=0.05,
    )
    sequence, images = generate_sequence(seq, np.random.default_rng(99))
    write_clip(sequence.scenes, images, out)
    config = out / "run.toml"
    config.write_text(
        "\n".join(
            [
                "w = 64",
                "n = 32",
                "sigma_min = 2.0",
                "iota_min = 0.2",
                "omega_sm = 1e-5",
                "omega_t = 1e-5",
                "max_steps_first = 20",
                "max_steps_frame = 12",
                "length_growth_steps = 8",
                "allow_out_of_range = true",
            ]
        )
    )
    return out


def test_reconstruct_then_evaluate(tiny_clip, tmp_path):
    runner = CliRunner()
    out_dir = tmp_path / "run"
    result = runner.invoke(
        main,
        [
            "reconstruct",
            "--config", str(tiny_clip / "run.toml"),
            "--frames", str(tiny_clip / "frames"),
            "--calib", str(tiny_clip / "calibration.json"),
            "--out", str(out_dir),
            "--seed", "3",
        ],
        catch_exceptions=False,
    )
    # exit code 2: frames cannot converge within the tiny budget (partial)
    assert result.exit_code in (0, 2), result.output
    assert (out_dir / "records.jsonl").exists()

    eval_result = runner.invoke(
        main,
        [
            "evaluate",
            "--records", str(out_dir / "records.jsonl"),
            "--truth", str(tiny_clip / "groundtruth.jsonl"),
            "--out", str(tmp_path / "eval"),
        ],
        catch_exceptions=False,
    )
    assert eval_result.exit_code == 0, eval_result.output
    report = json.loads(eval_result.output)
    assert report["frames"] == 2
    assert (tmp_path / "eval" / "distance_profile.csv").exists()


def test_reconstruct_rejects_out_of_range_without_flag(tiny_clip, tmp_path):
    runner = CliRunner()
    bad_config = tiny_clip / "bad.toml"
    bad_config.write_text("w = 64\n")  # below the documented minimum
    result = runner.invoke(
        main,
        [
            "reconstruct",
            "--config", str(bad_config),
            "--frames", str(tiny_clip / "frames"),
            "--calib", str(tiny_clip / "calibration.json"),
            "--out", str(tmp_path / "x"),
        ],
    )
    assert result.exit_code != 0
    assert "range" in result.output


def test_ablate_flag_recorded(tiny_clip, tmp_path):
    runner = CliRunner()
    out_dir = tmp_path / "ablated"
    result = runner.invoke(
        main,
        [
            "reconstruct",
            "--config", str(tiny_clip / "run.toml"),
            "--frames", str(tiny_clip / "frames"),
            "--calib", str(tiny_clip / "calibration.json"),
            "--out", str(out_dir),
            "--ablate", "e",
            "--ablate", "c",
            "--max-steps-frame", "10",
        ],
        catch_exceptions=False,
    )
    assert result.exit_code in (0, 2), result.output
    from midline3d.records import read_records

    records = list(read_records(out_dir / "records.jsonl"))
    assert all(r.toggles == "ce" for r in records)


def test_synth_command(tmp_path):
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["synth", "--out", str(tmp_path / "clip"), "--frames", "2", "--w", "200",
         "--seed", "1", "--camera-error", "6"],
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    assert (tmp_path / "clip" / "frames" / "frame_000001_cam2.png").exists()
    assert (tmp_path / "clip" / "calibration.json").exists()


def test_gradcheck_command():
    runner = CliRunner()
    result = runner.invoke(
        main, ["gradcheck", "--points", "1", "--seed", "2"], catch_exceptions=False
    )
    assert result.exit_code == 0, result.output
    assert "max relative error" in result.output
