"""Tests for the synthetic scene/sequence generator."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from midline3d.curvemodel import CurveConstraints, check_state
from midline3d.losses import FrameSnapshot, intersection_loss, smoothness_loss, temporal_loss
from midline3d.optimizer import pixel_scale_mm
from midline3d.renderer import RenderLimits, render, taper_params
from midline3d.camera import project_curve
from midline3d.synthgen import (
    DistractorSpec,
    SceneSpec,
    SequenceSpec,
    generate_scene,
    generate_sequence,
    reprojection_rms,
    scene_images,
    write_clip,
)

DT = torch.float64


def _spec(**kw) -> SceneSpec:
    base = dict(
        constraints=CurveConstraints(n_vertices=48, l_min=0.7, l_max=1.4),
        limits=RenderLimits(sigma_min=2.0, iota_min=0.2, image_size=96),
        length=1.0,
        noise_sigma=0.02,
        camera_error_px=0.0,
        sigma_true=(2.5, 3.2),
        rho_true=(1.0, 1.6),
        iota_true=(0.6, 0.8),
        focal_px=2200.0,
        depth_mm=60.0,
    )
    base.update(kw)
    return SceneSpec(**base)


def test_determinism_under_seed():
    spec = _spec(distractors=DistractorSpec(count=2), camera_error_px=6.0)
    a_scene, a_img = generate_scene(spec, np.random.default_rng(55))
    b_scene, b_img = generate_scene(spec, np.random.default_rng(55))
    assert torch.equal(a_img, b_img)
    assert torch.equal(a_scene.state.positions, b_scene.state.positions)
    assert torch.equal(a_scene.triplet_true.to_vector(), b_scene.triplet_true.to_vector())


def test_noise_free_scene_is_bitwise_forward_render():
    spec = _spec(noise_sigma=0.0)
    scene, images = generate_scene(spec, np.random.default_rng(56))
    q = project_curve(scene.triplet_true, scene.state.positions)
    clean = render(q, scene.render_true, spec.limits).images
    assert torch.equal(images, clean)


def test_zero_intensity_distractors_match_zero_count():
    spec0 = _spec(noise_sigma=0.0, distractors=DistractorSpec(count=0))
    spec1 = _spec(
        noise_sigma=0.0,
        distractors=DistractorSpec(count=3, intensity_range=(0.0, 0.0)),
    )
    scene0, img0 = generate_scene(spec0, np.random.default_rng(57))
    scene1, img1 = generate_scene(spec1, np.random.default_rng(57))
    assert torch.equal(img0, img1)


def test_perturbation_budget_reprojection_rms():
    spec = _spec(camera_error_px=10.0)
    for seed in range(5):
        scene, _ = generate_scene(spec, np.random.default_rng(200 + seed))
        rms = reprojection_rms(scene)
        assert 5.0 <= rms <= 10.0


def test_ground_truth_always_feasible():
    spec = _spec(distractors=DistractorSpec(count=2))
    for seed in range(5):
        scene, images = generate_scene(spec, np.random.default_rng(300 + seed))
        check_state(scene.state, spec.constraints)
        sb, _ = taper_params(scene.render_true, spec.limits, spec.constraints.n_vertices)
        px_mm = pixel_scale_mm(scene.state.positions, scene.triplet_true.to_vector())
        assert float(
            intersection_loss(scene.state.positions, sb, spec.constraints.k_max, px_mm)
        ) == 0.0
        assert float(images.min()) >= 0.0 and float(images.max()) <= 1.0


def test_near_body_distractor_placement():
    spec = _spec(
        distractors=DistractorSpec(count=1, near_view=1, gap_px=8.0),
        noise_sigma=0.0,
    )
    scene, _ = generate_scene(spec, np.random.default_rng(58))
    assert len(scene.distractors) == 1
    d = scene.distractors[0]
    assert d.view == 1
    q = project_curve(scene.triplet_true, scene.state.positions)
    gaps = torch.sqrt(
        (q[1, :, 0] - d.u) ** 2 + (q[1, :, 1] - d.v) ** 2
    )
    assert abs(float(gaps.min()) - 8.0) < 0.15 * 8.0


def test_sequence_zero_walk_static_up_to_noise():
    seq = SequenceSpec(scene=_spec(noise_sigma=0.0), n_frames=3, curvature_walk=0.0)
    sequence, images = generate_sequence(seq, np.random.default_rng(59))
    assert torch.equal(images[0], images[1])
    assert torch.equal(
        sequence.scenes[0].state.positions, sequence.scenes[2].state.positions
    )


def test_sequence_temporal_caps_hold():
    seq = SequenceSpec(
        scene=_spec(),
        n_frames=8,
        curvature_walk=0.1,
        temporal_cap=2.0,
        translation_mm=(0.003, 0.0, 0.0),
    )
    sequence, _ = generate_sequence(seq, np.random.default_rng(60))
    prev = None
    for scene in sequence.scenes:
        assert float(smoothness_loss(scene.state.curvature)) < 50.0
        if prev is not None:
            dk = float(((scene.state.curvature - prev.state.curvature) ** 2).sum())
            assert dk <= 2.0 + 1e-9
        prev = scene


def test_sequence_focus_drift_monotone():
    seq = SequenceSpec(
        scene=_spec(),
        n_frames=5,
        curvature_walk=0.05,
        sigma_drift=(0.05, 0.0, -0.03),
    )
    sequence, _ = generate_sequence(seq, np.random.default_rng(61))
    sig0 = [float(s.render_true.sigma[0]) for s in sequence.scenes]
    sig2 = [float(s.render_true.sigma[2]) for s in sequence.scenes]
    assert all(b > a for a, b in zip(sig0, sig0[1:]))
    assert all(b < a for a, b in zip(sig2, sig2[1:]))
    # intensity not drifting
    i1 = [float(s.render_true.iota[1]) for s in sequence.scenes]
    assert all(a == i1[0] for a in i1)


def test_write_clip_layout(tmp_path):
    seq = SequenceSpec(scene=_spec(camera_error_px=5.0), n_frames=2, curvature_walk=0.05)
    sequence, images = generate_sequence(seq, np.random.default_rng(62))
    write_clip(sequence.scenes, images, tmp_path)
    assert (tmp_path / "calibration.json").exists()
    assert (tmp_path / "groundtruth.jsonl").exists()
    for t in range(2):
        for c in range(3):
            assert (tmp_path / "frames" / f"frame_{t:06d}_cam{c}.png").exists()
    from midline3d.camera import load_calibration

    triplet = load_calibration(tmp_path / "calibration.json")
    # the delivered calibration carries no shifts (they are the perturbation)
    assert triplet.shifts.dx == 0.0
    import json

    lines = (tmp_path / "groundtruth.jsonl").read_text().strip().splitlines()
    assert len(lines) == 2
    doc = json.loads(lines[0])
    assert len(doc["camera_true"]) == 48
    assert len(doc["positions"]) == 48
