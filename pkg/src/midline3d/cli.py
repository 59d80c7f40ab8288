"""Command-line interface: reconstruct, synth, evaluate, gradcheck."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np
import torch

from .config import ConfigRangeError, RunConfig, load_config


@click.group()
def main() -> None:
    """3D midline reconstruction from grayscale camera-triplet recordings."""


def _config_from_options(config_path, **overrides) -> RunConfig:
    try:
        return load_config(config_path, overrides)
    except ConfigRangeError as err:
        raise click.ClickException(str(err)) from err


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="TOML run configuration.")
@click.option("--frames", "frames_dir", type=click.Path(exists=True), required=True,
              help="Directory of frame_NNNNNN_camC.png images.")
@click.option("--calib", "calib_path", type=click.Path(exists=True), required=True,
              help="Calibration file (JSON).")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--overlays", is_flag=True, default=False,
              help="Write per-frame overlay PNGs.")
@click.option("--ablate", multiple=True,
              type=click.Choice(["a", "b", "c", "d", "e", "f"]),
              help="Disable a component (repeatable).")
@click.option("--max-steps-first", type=int, default=None)
@click.option("--max-steps-frame", type=int, default=None)
@click.option("--invert/--no-invert", default=None,
              help="Invert input intensities (default: invert).")
@click.option("--override-ranges", is_flag=True, default=False,
              help="Allow out-of-range configuration values.")
def reconstruct(config_path, frames_dir, calib_path, out_dir, seed, overlays,
                ablate, max_steps_first, max_steps_frame, invert, override_ranges):
    """Reconstruct a recorded clip into per-frame midline records."""
    from .pipeline import reconstruct as run_reconstruct

    overrides = dict(
        seed=seed,
        ablate="".join(ablate) if ablate else None,
        max_steps_first=max_steps_first,
        max_steps_frame=max_steps_frame,
        invert=invert,
    )
    if override_ranges:
        overrides["allow_out_of_range"] = True
    config = _config_from_options(config_path, **overrides)
    try:
        summary = run_reconstruct(
            config, frames_dir, calib_path, out_dir, overlays=overlays
        )
    except Exception as err:  # hard failure
        click.echo(f"error: {err}", err=True)
        sys.exit(1)
    click.echo(json.dumps(summary, indent=2))
    sys.exit(0 if summary["converged"] == summary["frames"] else 2)


@main.command()
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=0)
@click.option("--frames", "n_frames", type=int, default=10)
@click.option("--w", type=int, default=200)
@click.option("--full-size", type=int, default=None)
@click.option("--noise", type=float, default=0.02)
@click.option("--distractors", type=int, default=0)
@click.option("--camera-error", type=float, default=0.0,
              help="Reprojection-error budget of the delivered calibration, px.")
@click.option("--translation", type=float, default=0.0,
              help="Rigid drift of the body, mm per frame.")
@click.option("--sigma-drift", type=float, default=0.0,
              help="True blob-scale drift per frame (focus change).")
def synth(out_dir, seed, n_frames, w, full_size, noise, distractors,
          camera_error, translation, sigma_drift):
    """Generate a synthetic clip with ground truth."""
    from .curvemodel import CurveConstraints
    from .renderer import RenderLimits
    from .synthgen import (
        DistractorSpec, SceneSpec, SequenceSpec, generate_sequence, write_clip,
    )

    spec = SequenceSpec(
        scene=SceneSpec(
            constraints=CurveConstraints(n_vertices=128, l_min=0.7, l_max=1.4),
            limits=RenderLimits(sigma_min=2.5, iota_min=0.2, image_size=w),
            full_size=full_size,
            noise_sigma=noise,
            distractors=DistractorSpec(count=distractors),
            camera_error_px=camera_error,
        ),
        n_frames=n_frames,
        translation_mm=(translation, 0.0, 0.0),
        sigma_drift=(sigma_drift, sigma_drift, sigma_drift),
    )
    rng = np.random.default_rng(seed)
    sequence, images = generate_sequence(spec, rng)
    write_clip(sequence.scenes, images, out_dir)
    click.echo(f"wrote {n_frames} frames to {out_dir}")


@main.command()
@click.option("--records", "records_path", type=click.Path(exists=True), required=True)
@click.option("--truth", "truth_path", type=click.Path(exists=True), required=True,
              help="Ground-truth JSONL from the synthetic generator.")
@click.option("--out", "out_dir", type=click.Path(), default=None)
def evaluate(records_path, truth_path, out_dir):
    """Distance statistics of reconstructed midlines against ground truth."""
    from .pipeline import evaluate as run_evaluate
    from .records import read_records

    try:
        report = run_evaluate(list(read_records(records_path)), truth_path, out_dir)
    except ValueError as err:
        click.echo(f"error: {err}", err=True)
        sys.exit(1)
    click.echo(json.dumps(report, indent=2))


@main.command()
@click.option("--seed", type=int, default=0)
@click.option("--points", type=int, default=3, help="Random evaluation points.")
@click.option("--tolerance", type=float, default=1e-4)
def gradcheck(seed, points, tolerance):
    """Validate pipeline gradients against central finite differences."""
    from .gradcheck import pipeline_gradient_check

    worst, excluded = pipeline_gradient_check(np.random.default_rng(seed), points)
    click.echo(f"max relative error (smooth points): {worst:.3e}")
    click.echo(f"excluded non-smooth fraction: {excluded * 100:.2f}%")
    sys.exit(0 if worst < tolerance else 1)
