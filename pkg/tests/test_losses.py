"""Tests for the loss terms, with brute-force summation oracles."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from midline3d.losses import (
    SCORES_LOSS_SENTINEL,
    CoincidentVerticesError,
    FrameSnapshot,
    LossBreakdown,
    LossWeights,
    NonFiniteLossError,
    intersection_loss,
    pixel_loss,
    scores_loss,
    smoothness_loss,
    temporal_loss,
    total_loss,
)

DT = torch.float64


def _snapshot(rng, n=16) -> FrameSnapshot:
    return FrameSnapshot.of(
        length=rng.uniform(0.5, 1.5),
        curvature=rng.normal(size=(n, 2)),
        positions=rng.normal(size=(n, 3)),
        camera=rng.normal(size=48),
        sigma=rng.uniform(3, 6, size=3),
        iota=rng.uniform(0.3, 0.9, size=3),
        rho=rng.uniform(0.8, 2.0, size=3),
    )


# ---------------------------------------------------------------------------
# pixel loss
# ---------------------------------------------------------------------------


def test_pixel_loss_zero_at_match():
    r = torch.rand(3, 16, 16, dtype=DT, generator=torch.Generator().manual_seed(0))
    assert float(pixel_loss(r, r)) == 0.0


def test_pixel_loss_constant_residual():
    r = torch.zeros(3, 8, 8, dtype=DT)
    t = torch.full_like(r, 0.25)
    assert abs(float(pixel_loss(r, t)) - 0.25**2) < 1e-15


def test_pixel_loss_brute_force():
    rng = np.random.default_rng(61)
    r = torch.as_tensor(rng.uniform(size=(3, 12, 12)))
    t = torch.as_tensor(rng.uniform(size=(3, 12, 12)))
    brute = 0.0
    for c in range(3):
        for i in range(12):
            for j in range(12):
                brute += (float(r[c, i, j]) - float(t[c, i, j])) ** 2
    brute /= 3 * 12 * 12
    assert abs(float(pixel_loss(r, t)) - brute) < 1e-12 * brute


# ---------------------------------------------------------------------------
# scores loss
# ---------------------------------------------------------------------------


def test_scores_loss_hand_example():
    loss = scores_loss(torch.ones(3, dtype=DT))
    assert abs(float(loss) - 1.5) < 1e-12


def test_scores_loss_sentinel_for_centre_only_mass():
    s = torch.zeros(5, dtype=DT)
    s[2] = 4.0  # exact centre of an odd profile has weight zero
    assert float(scores_loss(s)) == SCORES_LOSS_SENTINEL


def test_scores_loss_scale_invariant():
    rng = np.random.default_rng(62)
    s = torch.as_tensor(rng.uniform(0.1, 1.0, size=33))
    assert abs(float(scores_loss(s)) - float(scores_loss(2.0 * s))) < 1e-12


# ---------------------------------------------------------------------------
# smoothness loss
# ---------------------------------------------------------------------------


def test_smoothness_constant_zero():
    k = torch.ones(32, 2, dtype=DT) * 1.7
    assert float(smoothness_loss(k)) == 0.0


def test_smoothness_single_jump():
    k = torch.zeros(16, 2, dtype=DT)
    k[8:, 0] = 3.0  # one jump of magnitude 3 between rows 7 and 8
    assert abs(float(smoothness_loss(k)) - 9.0) < 1e-12


def test_smoothness_brute_force():
    rng = np.random.default_rng(63)
    k = torch.as_tensor(rng.normal(size=(40, 2)))
    brute = 0.0
    for n in range(1, 40):
        dx = float(k[n, 0] - k[n - 1, 0])
        dy = float(k[n, 1] - k[n - 1, 1])
        brute += dx * dx + dy * dy
    assert abs(float(smoothness_loss(k)) - brute) < 1e-12 * brute


# ---------------------------------------------------------------------------
# temporal loss
# ---------------------------------------------------------------------------


def test_temporal_zero_at_snapshot():
    rng = np.random.default_rng(64)
    snap = _snapshot(rng)
    assert float(temporal_loss(snap, snap)) == 0.0


def test_temporal_single_variable_change():
    rng = np.random.default_rng(65)
    snap = _snapshot(rng)
    cur = FrameSnapshot.of(
        length=float(snap.length) + 0.25,
        curvature=snap.curvature,
        positions=snap.positions,
        camera=snap.camera,
        sigma=snap.sigma,
        iota=snap.iota,
        rho=snap.rho,
    )
    assert abs(float(temporal_loss(cur, snap)) - 0.25**2) < 1e-12


def test_temporal_first_frame_is_zero():
    rng = np.random.default_rng(66)
    assert float(temporal_loss(_snapshot(rng), None)) == 0.0


def test_temporal_shape_mismatch_raises():
    rng = np.random.default_rng(67)
    snap = _snapshot(rng, n=16)
    cur = _snapshot(rng, n=17)
    with pytest.raises(ValueError):
        temporal_loss(cur, snap)


# ---------------------------------------------------------------------------
# intersection loss
# ---------------------------------------------------------------------------


def _straight_positions(n=128, length=1.0):
    s = torch.linspace(0, length, n, dtype=DT)
    return torch.stack([s, torch.zeros_like(s), torch.zeros_like(s)], dim=1)


def test_straight_line_no_intersections():
    p = _straight_positions()
    sigma_bar = torch.full((3, 128), 4.0, dtype=DT)
    # radii ~ 4 px * 0.00625 mm/px = 0.025 mm each; separated pairs are
    # at least 43 segments = 0.34 mm apart
    loss = intersection_loss(p, sigma_bar, k_max=3.0, px_to_mm=0.00625)
    assert float(loss) == 0.0


def test_hairpin_pair_contribution():
    # coarse spacing (0.1 mm) isolates the constructed pair from neighbours
    n = 128
    p = _straight_positions(n, length=12.7)
    sigma_bar = torch.full((3, n), 4.0, dtype=DT)
    px_to_mm = 0.00625
    d_prime = 2 * 4.0 * px_to_mm  # 0.05 mm
    p[100] = p[10] + torch.tensor([0.0, d_prime / 2, 0.0], dtype=DT)
    loss = intersection_loss(p, sigma_bar, k_max=3.0, px_to_mm=px_to_mm)
    assert abs(float(loss) - 2.0) < 1e-9


def test_min_separation_bound_n128():
    # with k_max=3, N=128 pairs with m - n < 43 never contribute
    n = 128
    p = _straight_positions(n, length=12.7)
    sigma_bar = torch.full((3, n), 4.0, dtype=DT)
    p2 = p.clone()
    p2[80] = p[40] + torch.tensor([0.0, 1e-6, 0.0], dtype=DT)  # separation 40
    assert float(intersection_loss(p2, sigma_bar, 3.0, 0.00625)) == 0.0
    p3 = p.clone()
    p3[40 + 43] = p[40] + torch.tensor([0.0, 1e-3, 0.0], dtype=DT)  # separation 43
    assert float(intersection_loss(p3, sigma_bar, 3.0, 0.00625)) > 0.0


def test_coincident_far_pair_raises():
    n = 128
    p = _straight_positions(n)
    p[100] = p[10]
    sigma_bar = torch.full((3, n), 4.0, dtype=DT)
    with pytest.raises(CoincidentVerticesError):
        intersection_loss(p, sigma_bar, 3.0, 0.00625)


def test_rigid_motion_invariance():
    rng = np.random.default_rng(68)
    n = 64
    p = torch.as_tensor(rng.normal(size=(n, 3)) * 0.1)
    sigma_bar = torch.full((3, n), 4.0, dtype=DT)
    base = intersection_loss(p, sigma_bar, 3.0, 0.01)
    from midline3d.camera import rotation_matrix

    rot = rotation_matrix(0.3, 1.1, 2.2)
    moved = p @ rot.T + torch.tensor([5.0, -2.0, 1.0], dtype=DT)
    out = intersection_loss(moved, sigma_bar, 3.0, 0.01)
    assert abs(float(base) - float(out)) < 1e-9 * max(1.0, float(base))


# ---------------------------------------------------------------------------
# total loss
# ---------------------------------------------------------------------------


def _terms(v=1.0):
    t = torch.tensor(v, dtype=DT)
    return dict(pixel=t, scores=t, smoothness=t, temporal=t, intersection=t)


def test_total_zero_weights():
    out = total_loss(weights=LossWeights(0, 0, 0, 0, 0), **_terms())
    assert float(out.total) == 0.0


def test_total_single_weight():
    out = total_loss(weights=LossWeights(0, 0, 1.0, 0, 0), **_terms(2.5))
    assert abs(float(out.total) - 2.5) < 1e-15


def test_total_default_weights_unit_terms():
    w = LossWeights(w_px=0.1, w_sc=0.01, w_sm=25.0, w_t=40.0, w_i=0.7)
    out = total_loss(weights=w, **_terms())
    assert abs(float(out.total) - (0.1 + 0.01 + 25.0 + 40.0 + 0.7)) < 1e-12


def test_total_rejects_nan_by_name():
    terms = _terms()
    terms["temporal"] = torch.tensor(float("nan"), dtype=DT)
    with pytest.raises(NonFiniteLossError) as err:
        total_loss(weights=LossWeights(), **terms)
    assert err.value.term == "temporal"


def test_all_terms_non_negative_randomized():
    rng = np.random.default_rng(69)
    for _ in range(100):
        s = torch.as_tensor(rng.uniform(0, 1, size=17))
        k = torch.as_tensor(rng.normal(size=(17, 2)))
        r = torch.as_tensor(rng.uniform(size=(3, 8, 8)))
        t = torch.as_tensor(rng.uniform(size=(3, 8, 8)))
        assert float(pixel_loss(r, t)) >= 0
        assert float(scores_loss(s)) >= 0
        assert float(smoothness_loss(k)) >= 0
