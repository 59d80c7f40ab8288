"""Tests for the Bishop-frame curve model."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from midline3d.curvemodel import (
    CentreShiftConfig,
    CurveConstraints,
    CurveDivergedError,
    CurveState,
    bishop_to_frenet,
    build_state,
    centre_shift,
    check_state,
    integrate_curve,
    project_curvature,
    recompute_state,
    sample_start_index,
    score_imbalance,
)

N = 128
EX = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
EY = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)


def _random_state(rng: np.random.Generator, constraints: CurveConstraints) -> CurveState:
    """A consistent random curve with smooth curvature well inside the bound."""
    n = constraints.n_vertices
    s = np.linspace(0.0, 1.0, n)
    k = np.zeros((n, 2))
    for comp in range(2):
        for mode in range(1, 4):
            k[:, comp] += rng.normal(0, 1.2 / mode) * np.sin(
                mode * np.pi * s + rng.uniform(0, 2 * np.pi)
            )
    t0 = rng.normal(size=3)
    t0 /= np.linalg.norm(t0)
    m0 = rng.normal(size=3)
    m0 -= m0 @ t0 * t0
    m0 /= np.linalg.norm(m0)
    length = rng.uniform(constraints.l_min + 0.05, constraints.l_max - 0.05)
    n0 = int(rng.integers(1, n - 1))
    return build_state(rng.normal(size=3), t0, m0, k, length, n0)


# ---------------------------------------------------------------------------
# integrate_curve
# ---------------------------------------------------------------------------


def test_zero_curvature_gives_straight_line():
    k = torch.zeros(N, 2, dtype=torch.float64)
    p, t, m1 = integrate_curve(torch.zeros(3), EX, EY, k, 1.0, 0)
    spacing = 1.0 / (N - 1)
    expected = torch.arange(N, dtype=torch.float64)[:, None] * spacing * EX
    assert torch.allclose(p, expected, atol=1e-12)
    assert torch.allclose(t, EX.expand(N, 3), atol=1e-12)
    assert torch.allclose(m1, EY.expand(N, 3), atol=1e-12)


def test_full_turn_closes_circle_against_analytic():
    # One full turn: planar circle of radius 1/(2*pi) in the T-M1 plane,
    # x(s) = r (sin 2*pi*s, 1 - cos 2*pi*s, 0).
    k = torch.zeros(N, 2, dtype=torch.float64)
    k[:, 0] = 2 * math.pi
    p, t, _ = integrate_curve(torch.zeros(3), EX, EY, k, 1.0, 0)
    closure = float(torch.linalg.norm(p[0] - p[-1]))
    assert closure < 0.05

    r = 1.0 / (2 * math.pi)
    s = torch.linspace(0, 1, N, dtype=torch.float64)
    analytic = torch.stack(
        [r * torch.sin(2 * math.pi * s), r * (1 - torch.cos(2 * math.pi * s)), 0 * s],
        dim=1,
    )
    assert float((p - analytic).norm(dim=1).max()) < 0.01


def test_reintegration_from_other_start_vertex_matches():
    k = torch.zeros(N, 2, dtype=torch.float64)
    k[:, 0] = 2 * math.pi
    ref = build_state(torch.zeros(3), EX, EY, k, 1.0, 0)
    again = build_state(
        ref.positions[64], ref.tangents[64], ref.m1[64], k, 1.0, 64
    )
    assert float((ref.positions - again.positions).abs().max()) < 1e-6
    assert float((ref.tangents - again.tangents).abs().max()) < 1e-6


def test_start_index_consistency_randomized():
    rng = np.random.default_rng(7)
    constraints = CurveConstraints()
    for _ in range(20):
        ref = _random_state(rng, constraints)
        for _ in range(10):
            n0 = int(rng.integers(0, N))
            again = build_state(
                ref.positions[n0], ref.tangents[n0], ref.m1[n0],
                ref.curvature, ref.length, n0,
            )
            assert float((ref.positions - again.positions).abs().max()) < 1e-6


def test_frame_orthonormality_and_equidistance_randomized():
    rng = np.random.default_rng(11)
    constraints = CurveConstraints()
    for _ in range(25):
        state = _random_state(rng, constraints)
        check_state(state, constraints)


def test_rejects_bad_inputs():
    k = torch.zeros(N, 2, dtype=torch.float64)
    with pytest.raises(ValueError):
        integrate_curve(torch.zeros(3), EX, EX, k, 1.0, 0)  # not orthogonal
    with pytest.raises(ValueError):
        integrate_curve(torch.zeros(3), 2 * EX, EY, k, 1.0, 0)  # not unit
    with pytest.raises(ValueError):
        integrate_curve(torch.zeros(3), EX, EY, torch.zeros(N, 3), 1.0, 0)  # bad shape
    with pytest.raises(ValueError):
        integrate_curve(torch.zeros(3), EX, EY, k, 1.0, N)  # start out of range


def test_frenet_roundtrip_rotation_invariance():
    # Rotating M1_init about T_init by phi while rotating (m1, m2) rows by
    # R(-phi) leaves the curve unchanged; bishop_to_frenet is invariant.
    rng = np.random.default_rng(3)
    constraints = CurveConstraints()
    state = _random_state(rng, constraints)
    # keep curvature away from zero so tau is defined
    k = state.curvature + torch.tensor([2.5, 0.0], dtype=torch.float64)
    base = build_state(state.positions[5], state.tangents[5], state.m1[5], k, 1.0, 5)

    phi = 0.7
    c, s = math.cos(phi), math.sin(phi)
    t5, m15, m25 = base.tangents[5], base.m1[5], base.m2[5]
    m1_rot = c * m15 + s * m25
    rot = torch.tensor([[c, s], [-s, c]], dtype=torch.float64)
    k_rot = k @ rot.T

    other = build_state(base.positions[5], t5, m1_rot, k_rot, 1.0, 5)
    assert float((base.positions - other.positions).abs().max()) < 1e-9

    kap1, tau1 = bishop_to_frenet(k, 1.0)
    kap2, tau2 = bishop_to_frenet(k_rot, 1.0)
    assert torch.allclose(kap1, kap2, atol=1e-6)
    assert torch.allclose(tau1, tau2, atol=1e-6, equal_nan=True)


# ---------------------------------------------------------------------------
# sample_start_index
# ---------------------------------------------------------------------------


def test_sample_start_index_deterministic_and_clamped():
    a = sample_start_index(N, np.random.default_rng(42))
    b = sample_start_index(N, np.random.default_rng(42))
    assert a == b
    rng = np.random.default_rng(0)
    draws = [sample_start_index(N, rng) for _ in range(2000)]
    assert min(draws) >= 1 and max(draws) <= N - 2


def test_sample_start_index_mean():
    rng = np.random.default_rng(123)
    draws = np.array([sample_start_index(N, rng) for _ in range(100_000)])
    assert 60.0 <= draws.mean() <= 68.0


# ---------------------------------------------------------------------------
# recompute_state / constraint projection
# ---------------------------------------------------------------------------


def test_recompute_is_idempotent_on_consistent_state():
    rng = np.random.default_rng(5)
    constraints = CurveConstraints()
    state = _random_state(rng, constraints)
    out = recompute_state(state, constraints)
    assert float((out.positions - state.positions).abs().max()) < 1e-9
    assert float((out.curvature - state.curvature).abs().max()) < 1e-9
    assert abs(out.length - state.length) < 1e-9


def test_recompute_clamps_length():
    rng = np.random.default_rng(6)
    constraints = CurveConstraints()
    state = _random_state(rng, constraints)
    state.length = 2.0 * constraints.l_max
    out = recompute_state(state, constraints)
    assert out.length < constraints.l_max


def test_recompute_projects_curvature_radially():
    rng = np.random.default_rng(8)
    constraints = CurveConstraints()
    state = _random_state(rng, constraints)
    bound = constraints.curvature_bound
    direction = torch.tensor([0.6, 0.8], dtype=torch.float64)
    state.curvature[40] = 10.0 * bound * direction
    out = recompute_state(state, constraints)
    row = out.curvature[40]
    assert float(torch.linalg.norm(row)) <= bound
    unit = row / torch.linalg.norm(row)
    assert torch.allclose(unit, direction, atol=1e-12)


def test_projection_idempotent():
    rng = np.random.default_rng(9)
    constraints = CurveConstraints()
    for _ in range(100):
        k = torch.as_tensor(rng.normal(0, 15.0, size=(N, 2)))
        once = project_curvature(k, constraints)
        twice = project_curvature(once, constraints)
        assert torch.equal(once, twice)
        assert float(torch.linalg.norm(once, dim=-1).max()) < constraints.curvature_bound


def test_recompute_rejects_nan():
    rng = np.random.default_rng(10)
    constraints = CurveConstraints()
    state = _random_state(rng, constraints)
    state.curvature[3, 0] = float("nan")
    with pytest.raises(CurveDivergedError):
        recompute_state(state, constraints)


# ---------------------------------------------------------------------------
# bishop_to_frenet
# ---------------------------------------------------------------------------


def test_frenet_planar_constant_curvature():
    kappa0 = 3.0
    length = 1.2
    k = torch.zeros(N, 2, dtype=torch.float64)
    k[:, 0] = kappa0 * length
    kappa, tau = bishop_to_frenet(k, length)
    assert torch.allclose(kappa, torch.full((N,), kappa0, dtype=torch.float64))
    assert torch.allclose(tau, torch.zeros(N, dtype=torch.float64), atol=1e-12)


def test_frenet_helix_recovery():
    kappa0, omega, length = 2.0, 5.0, 1.3
    s = torch.linspace(0, 1, N, dtype=torch.float64)
    k = kappa0 * length * torch.stack([torch.cos(omega * s), torch.sin(omega * s)], dim=1)
    kappa, tau = bishop_to_frenet(k, length)
    assert float((kappa - kappa0).abs().max()) < 1e-3 * kappa0
    interior = tau[1:-1]
    assert float((interior - omega / length).abs().max()) < 1e-3 * abs(omega / length)


def test_frenet_zero_curvature_tau_absent():
    k = torch.zeros(N, 2, dtype=torch.float64)
    kappa, tau = bishop_to_frenet(k, 1.0)
    assert float(kappa.max()) == 0.0
    assert torch.isnan(tau).all()


# ---------------------------------------------------------------------------
# centre_shift
# ---------------------------------------------------------------------------


def _cfg(**kw) -> CentreShiftConfig:
    base = dict(alpha=1, beta=0.01, gamma=2)
    base.update(kw)
    return CentreShiftConfig(**base)


def test_raw_imbalance_hand_example():
    assert score_imbalance(torch.tensor([0.0, 0.0, 1.0, 1.0])) == 1


def test_symmetric_profile_unchanged():
    rng = np.random.default_rng(12)
    state = _random_state(rng, CurveConstraints())
    s_hat = torch.ones(N, dtype=torch.float64)
    out, applied = centre_shift(state, s_hat, _cfg(), step=4)
    assert applied == 0
    assert out is state


def test_shift_respects_alpha_and_beta():
    rng = np.random.default_rng(13)
    state = _random_state(rng, CurveConstraints())
    s_hat = torch.zeros(N, dtype=torch.float64)
    s_hat[: N // 2] = 1.0  # heavily unbalanced toward low indices
    # off-cycle step: no shift
    _, applied = centre_shift(state, s_hat, _cfg(alpha=5), step=3)
    assert applied == 0
    # beta too large: no shift
    _, applied = centre_shift(state, s_hat, _cfg(beta=0.49), step=5)
    assert applied == 0
    # triggered and clamped to gamma
    out, applied = centre_shift(state, s_hat, _cfg(alpha=5, gamma=2), step=5)
    assert applied == -2
    check_state(out, CurveConstraints())


def test_shift_moves_curvature_rows_and_tapers():
    rng = np.random.default_rng(14)
    state = _random_state(rng, CurveConstraints())
    s_hat = torch.zeros(N, dtype=torch.float64)
    s_hat[N // 2 + 20 :] = 1.0  # mass toward high indices -> positive shift
    out, applied = centre_shift(state, s_hat, _cfg(gamma=1), step=2)
    assert applied == 1
    assert torch.allclose(out.curvature[: N - 1], state.curvature[1:])
    assert torch.allclose(out.curvature[N - 1], torch.zeros(2, dtype=torch.float64))
    # overlapping geometry is preserved: new vertex n sits at old vertex n+1
    assert float((out.positions[:- 1] - state.positions[1:]).abs().max()) < 1e-9


def test_shift_taper_two_vertices():
    rng = np.random.default_rng(15)
    state = _random_state(rng, CurveConstraints())
    s_hat = torch.zeros(N, dtype=torch.float64)
    s_hat[-1] = 1.0
    out, applied = centre_shift(state, s_hat, _cfg(gamma=2, beta=0.05), step=2)
    assert applied == 2
    assert torch.allclose(out.curvature[: N - 2], state.curvature[2:])
    assert torch.allclose(out.curvature[N - 2], 0.5 * state.curvature[N - 1])
    assert torch.allclose(out.curvature[N - 1], torch.zeros(2, dtype=torch.float64))


def test_degenerate_scores_do_not_shift():
    rng = np.random.default_rng(16)
    state = _random_state(rng, CurveConstraints())
    out, applied = centre_shift(state, torch.zeros(N, dtype=torch.float64), _cfg(), 2)
    assert applied == 0 and out is state
