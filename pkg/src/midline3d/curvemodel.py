"""Intrinsic Bishop-frame curve model.

The midline is a discrete space curve of N equidistant vertices whose shape is
encoded by a dimensionless curvature field K (N x 2, curvature per unit
normalized arclength, i.e. physical curvature times body length) and a length
l. Together with a position and an orthonormal frame (T, M1, M2) at a single
start vertex, integrating the Bishop equations

    dT/ds = m1 M1 + m2 M2,   dM1/ds = -m1 T,   dM2/ds = -m2 T

in both directions reproduces the full curve. Each discrete segment applies
the exact rotation of the frame by angle |K_n|*h about the local axis
(0, -m2, m1) (h = 1/(N-1)), so a backward pass is the exact inverse of a
forward pass and re-integration from any vertex of a consistent state
reproduces it to machine precision.

All tensor operations run in float64 and are differentiable, so the same code
serves both the optimizer's forward pass and standalone geometry queries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import Tensor

DTYPE = torch.float64

# Frame orthonormality tolerance accepted on integration inputs.
_FRAME_ATOL = 1e-8


class CurveDivergedError(RuntimeError):
    """Raised when curve parameters contain NaN/Inf (optimization diverged)."""


@dataclass(frozen=True)
class CurveConstraints:
    """Non-optimizable bounds on the curve.

    Attributes:
        n_vertices: Number of discrete vertices N.
        l_min: Lower length bound (mm), exclusive.
        l_max: Upper length bound (mm), exclusive.
        k_max: Maximum winding number; curvature rows satisfy |K_n| < 2*pi*k_max.
    """

    n_vertices: int = 128
    l_min: float = 0.5
    l_max: float = 1.5
    k_max: float = 3.0

    def __post_init__(self) -> None:
        if not (0.0 < self.l_min < self.l_max):
            raise ValueError(f"need 0 < l_min < l_max, got ({self.l_min}, {self.l_max})")
        if self.k_max <= 0:
            raise ValueError(f"k_max must be > 0, got {self.k_max}")
        if self.n_vertices < 8:
            raise ValueError(f"need at least 8 vertices, got {self.n_vertices}")

    @property
    def curvature_bound(self) -> float:
        return 2.0 * math.pi * self.k_max


@dataclass(frozen=True)
class CentreShiftConfig:
    """Controls the periodic re-centering of the curve parametrization.

    Attributes:
        alpha: Apply a shift only every ``alpha`` optimization steps.
        beta: Trigger threshold as a fraction of N; shift only when
            |n_s| > beta * N.
        gamma: Maximum shift magnitude in vertices.
    """

    alpha: int = 4
    beta: float = 0.075
    gamma: int = 2

    def __post_init__(self) -> None:
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if not (0.0 < self.beta < 0.5):
            raise ValueError("beta must lie in (0, 0.5)")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")


@dataclass
class CurveState:
    """A consistent discretized curve with its Bishop frame.

    Attributes:
        positions: (N, 3) vertex positions, mm.
        tangents: (N, 3) unit tangents T.
        m1: (N, 3) unit normals M1.
        m2: (N, 3) unit binormals M2 = T x M1.
        curvature: (N, 2) dimensionless Bishop curvature components.
        length: body length, mm.
        start_index: vertex the state was last integrated from.
    """

    positions: Tensor
    tangents: Tensor
    m1: Tensor
    m2: Tensor
    curvature: Tensor
    length: float
    start_index: int

    @property
    def n_vertices(self) -> int:
        return int(self.positions.shape[0])

    def detach_clone(self) -> "CurveState":
        return CurveState(
            positions=self.positions.detach().clone(),
            tangents=self.tangents.detach().clone(),
            m1=self.m1.detach().clone(),
            m2=self.m2.detach().clone(),
            curvature=self.curvature.detach().clone(),
            length=float(self.length),
            start_index=int(self.start_index),
        )


def _as_tensor(x, shape=None) -> Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if shape is not None and tuple(t.shape) != tuple(shape):
        raise ValueError(f"expected shape {shape}, got {tuple(t.shape)}")
    return t


def _cross_matrices(omega: Tensor) -> Tensor:
    """Skew matrices [w]_x for a batch of 3-vectors, shape (M, 3, 3)."""
    zero = torch.zeros_like(omega[:, 0])
    wx, wy, wz = omega[:, 0], omega[:, 1], omega[:, 2]
    rows = [
        torch.stack([zero, -wz, wy], dim=-1),
        torch.stack([wz, zero, -wx], dim=-1),
        torch.stack([-wy, wx, zero], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def _segment_rotations(curvature: Tensor, h: float) -> Tensor:
    """Exact per-segment frame rotations in local (T, M1, M2) coordinates.

    For curvature row (m1, m2) the frame rotates by angle |K|*h about the
    local axis (0, -m2, m1). Written with the unnormalized axis so the map is
    smooth (analytic in K) through |K| = 0.

    Args:
        curvature: (M, 2) curvature rows of the traversed segments.
        h: normalized arclength step, 1/(N-1).

    Returns:
        (M, 3, 3) rotation matrices R such that E_next = E @ R.
    """
    m1c, m2c = curvature[:, 0], curvature[:, 1]
    kappa_sq = m1c * m1c + m2c * m2c
    # 1e-300 keeps sqrt's gradient finite on exactly-straight segments
    kappa = torch.sqrt(kappa_sq + 1e-300)
    theta = kappa * h

    small = kappa < 1e-12
    kappa_safe = torch.where(small, torch.ones_like(kappa), kappa)
    # f1 = sin(theta)/kappa -> h, f2 = (1-cos(theta))/kappa^2 -> h^2/2 as kappa -> 0
    f1 = torch.where(small, torch.full_like(kappa, h), torch.sin(theta) / kappa_safe)
    f2 = torch.where(
        small,
        torch.full_like(kappa, 0.5 * h * h),
        (1.0 - torch.cos(theta)) / (kappa_safe * kappa_safe),
    )

    zero = torch.zeros_like(m1c)
    omega = torch.stack([zero, -m2c, m1c], dim=-1)
    w = _cross_matrices(omega)
    eye = torch.eye(3, dtype=curvature.dtype).expand(curvature.shape[0], 3, 3)
    return eye + f1[:, None, None] * w + f2[:, None, None] * (w @ w)


def _prefix_products(mats: Tensor) -> Tensor:
    """Inclusive prefix products out[k] = mats[0] @ mats[1] @ ... @ mats[k].

    Hillis-Steele scan: log2(M) batched matmul levels instead of a Python
    loop over segments.
    """
    out = mats
    step = 1
    m = mats.shape[0]
    while step < m:
        out = torch.cat([out[:step], out[:-step] @ out[step:]], dim=0)
        step *= 2
    return out


def _integrate_frames(
    e0: Tensor, curvature: Tensor, n0: int
) -> Tensor:
    """Frames at every vertex from the frame at vertex n0.

    Args:
        e0: (3, 3) frame matrix at n0, columns (T, M1, M2).
        curvature: (N, 2) curvature rows.
        n0: start vertex.

    Returns:
        (N, 3, 3) frame matrices.
    """
    n = curvature.shape[0]
    parts = []
    if n0 > 0:
        # E_{n0-1-k} = E_{n0} @ (R_{n0-1}^T R_{n0-2}^T ... R_{n0-1-k}^T)
        back = _segment_rotations(curvature[:n0].flip(0), h=1.0 / (n - 1))
        back_prod = _prefix_products(back.transpose(-1, -2))
        parts.append((e0 @ back_prod).flip(0))
    parts.append(e0.unsqueeze(0))
    if n0 < n - 1:
        fwd = _segment_rotations(curvature[n0 : n - 1], h=1.0 / (n - 1))
        fwd_prod = _prefix_products(fwd)
        parts.append(e0 @ fwd_prod)
    return torch.cat(parts, dim=0)


def _positions_from_tangents(
    p0: Tensor, tangents: Tensor, length, n0: int
) -> Tensor:
    """Vertex positions by normalized-chord accumulation from vertex n0.

    Each segment has exact length l/(N-1) and points along the bisector of
    the adjacent tangents, so spacing is exactly equidistant while closure
    stays second order in the step.
    """
    n = tangents.shape[0]
    h = 1.0 / (n - 1)
    chords = tangents[:-1] + tangents[1:]
    chords = chords / torch.linalg.norm(chords, dim=-1, keepdim=True)
    seg = (length * h) * chords

    parts = []
    if n0 > 0:
        back = -torch.cumsum(seg[:n0].flip(0), dim=0)
        parts.append((p0 + back).flip(0))
    parts.append(p0.unsqueeze(0))
    if n0 < n - 1:
        parts.append(p0 + torch.cumsum(seg[n0:], dim=0))
    return torch.cat(parts, dim=0)


def integrate_curve(
    p_init,
    t_init,
    m1_init,
    curvature,
    length,
    start_index: int,
) -> tuple[Tensor, Tensor, Tensor]:
    """Integrate the discrete Bishop equations from a start vertex.

    Runs two passes from ``start_index``: toward N-1 and, with reversed step
    sign, toward 0. Vertex ``start_index`` carries exactly the given position
    and frame.

    Args:
        p_init: (3,) position at the start vertex, mm.
        t_init: (3,) unit tangent at the start vertex.
        m1_init: (3,) unit normal at the start vertex, orthogonal to t_init.
        curvature: (N, 2) dimensionless curvature rows.
        length: body length, mm.
        start_index: integer in [0, N-1].

    Returns:
        (positions (N,3), tangents (N,3), m1 (N,3)).

    Raises:
        ValueError: non-orthonormal initial frame, bad shapes, or start index
            out of range.
    """
    k = _as_tensor(curvature)
    if k.ndim != 2 or k.shape[1] != 2:
        raise ValueError(f"curvature must be (N, 2), got {tuple(k.shape)}")
    n = k.shape[0]
    if not 0 <= start_index <= n - 1:
        raise ValueError(f"start_index {start_index} out of range [0, {n - 1}]")
    p0 = _as_tensor(p_init, (3,))
    t0 = _as_tensor(t_init, (3,))
    m10 = _as_tensor(m1_init, (3,))
    with torch.no_grad():
        if abs(float(torch.linalg.norm(t0)) - 1.0) > _FRAME_ATOL:
            raise ValueError("t_init is not a unit vector")
        if abs(float(torch.linalg.norm(m10)) - 1.0) > _FRAME_ATOL:
            raise ValueError("m1_init is not a unit vector")
        if abs(float(torch.dot(t0, m10))) > _FRAME_ATOL:
            raise ValueError("t_init and m1_init are not orthogonal")

    m20 = torch.linalg.cross(t0, m10)
    e0 = torch.stack([t0, m10, m20], dim=-1)
    frames = _integrate_frames(e0, k, start_index)
    tangents = frames[:, :, 0]
    positions = _positions_from_tangents(p0, tangents, length, start_index)
    return positions, tangents, frames[:, :, 1]


def build_state(
    p_init, t_init, m1_init, curvature, length, start_index: int
) -> CurveState:
    """Integrate and package a full CurveState (including M2)."""
    positions, tangents, m1 = integrate_curve(
        p_init, t_init, m1_init, curvature, length, start_index
    )
    return CurveState(
        positions=positions,
        tangents=tangents,
        m1=m1,
        m2=torch.linalg.cross(tangents, m1),
        curvature=_as_tensor(curvature),
        length=float(length),
        start_index=int(start_index),
    )


def sample_start_index(n_vertices: int, rng: np.random.Generator) -> int:
    """Draw the integration start vertex for one optimization step.

    Normal(N/2, N/10), rounded to the nearest integer and clamped to
    [1, N-2]. Resampling every step diffuses the discontinuity that would
    otherwise accumulate at a fixed start vertex.
    """
    if n_vertices < 8:
        raise ValueError("n_vertices must be >= 8")
    draw = rng.normal(loc=n_vertices / 2.0, scale=n_vertices / 10.0)
    return int(np.clip(int(np.floor(draw + 0.5)), 1, n_vertices - 2))


def project_curvature(curvature: Tensor, constraints: CurveConstraints) -> Tensor:
    """Radially rescale rows violating |K_n| < 2*pi*k_max back onto the bound.

    The projection is idempotent: rescaled rows land strictly inside the
    bound (factor 1 - 1e-12), so a second call leaves them untouched.
    """
    threshold = constraints.curvature_bound * (1.0 - 1e-12)
    target = constraints.curvature_bound * (1.0 - 1e-9)
    norms = torch.linalg.norm(curvature, dim=-1, keepdim=True)
    factor = torch.where(
        norms > threshold,
        target / torch.clamp(norms, min=1e-300),
        torch.ones_like(norms),
    )
    return curvature * factor


def clamp_length(length: float, constraints: CurveConstraints) -> float:
    """Clamp a length into the open interval (l_min, l_max)."""
    inset = 1e-9 * (constraints.l_max - constraints.l_min)
    return float(min(max(length, constraints.l_min + inset), constraints.l_max - inset))


def length_from_raw(length_raw, constraints: CurveConstraints):
    """Bounded length reparametrization l = l_min + (l_max - l_min) * sigmoid(raw).

    Keeps gradients alive at the bounds instead of clamping them dead.
    """
    raw = torch.as_tensor(length_raw, dtype=DTYPE)
    return constraints.l_min + (constraints.l_max - constraints.l_min) * torch.sigmoid(raw)


def raw_from_length(length: float, constraints: CurveConstraints) -> float:
    """Inverse of :func:`length_from_raw` (length strictly inside the bounds)."""
    frac = (clamp_length(length, constraints) - constraints.l_min) / (
        constraints.l_max - constraints.l_min
    )
    frac = min(max(frac, 1e-12), 1.0 - 1e-12)
    return float(math.log(frac / (1.0 - frac)))


def recompute_state(state: CurveState, constraints: CurveConstraints) -> CurveState:
    """Project a possibly-inconsistent state back onto the constraint set.

    Clamps the length into (l_min, l_max), rescales violating curvature rows,
    re-orthonormalizes the frame at the start vertex, and re-integrates from
    it. A state that already satisfies every invariant is reproduced within
    1e-9.

    Raises:
        CurveDivergedError: any parameter is NaN/Inf.
    """
    if not (
        torch.isfinite(state.curvature).all()
        and torch.isfinite(state.positions).all()
        and math.isfinite(state.length)
    ):
        raise CurveDivergedError("NaN/Inf in curve parameters")
    n0 = int(state.start_index)
    k = project_curvature(state.curvature, constraints)
    length = clamp_length(state.length, constraints)
    t0 = state.tangents[n0]
    t0 = t0 / torch.linalg.norm(t0)
    m10 = state.m1[n0]
    m10 = m10 - torch.dot(m10, t0) * t0
    m10 = m10 / torch.linalg.norm(m10)
    return build_state(state.positions[n0], t0, m10, k, length, n0)


def check_state(
    state: CurveState,
    constraints: CurveConstraints,
    frame_atol: float = 1e-9,
    spacing_rtol: float = 1e-6,
) -> None:
    """Assert every CurveState invariant; raises AssertionError with context."""
    t, m1, m2 = state.tangents, state.m1, state.m2
    assert torch.isfinite(state.positions).all()
    assert float((torch.linalg.norm(t, dim=-1) - 1).abs().max()) < frame_atol
    assert float((torch.linalg.norm(m1, dim=-1) - 1).abs().max()) < frame_atol
    assert float((t * m1).sum(-1).abs().max()) < frame_atol
    assert float((m2 - torch.linalg.cross(t, m1)).abs().max()) < frame_atol
    seg = torch.linalg.norm(state.positions[1:] - state.positions[:-1], dim=-1)
    target = state.length / (state.n_vertices - 1)
    assert float((seg - target).abs().max()) < spacing_rtol * state.length
    assert constraints.l_min < state.length < constraints.l_max
    norms = torch.linalg.norm(state.curvature, dim=-1)
    assert float(norms.max()) < constraints.curvature_bound
    assert 0 <= state.start_index < state.n_vertices


def bishop_to_frenet(curvature, length) -> tuple[Tensor, Tensor]:
    """Recover Frenet curvature and torsion from Bishop components.

    kappa_n = |K_n| / l. Torsion is the discrete arclength derivative of the
    unwrapped polar angle theta_n = atan2(m2, m1), divided by l; it is
    undefined (returned as NaN) wherever kappa_n < 1e-8.

    Args:
        curvature: (N, 2) dimensionless curvature rows.
        length: body length, mm.

    Returns:
        (kappa (N,), tau (N,)) in 1/mm; tau is NaN where undefined.
    """
    k = _as_tensor(curvature).detach().numpy()
    n = k.shape[0]
    h = 1.0 / (n - 1)
    kappa = np.linalg.norm(k, axis=1) / length
    theta = np.unwrap(np.arctan2(k[:, 1], k[:, 0]))
    tau = np.gradient(theta, h) / length
    tau = np.where(kappa < 1e-8, np.nan, tau)
    return torch.as_tensor(kappa, dtype=DTYPE), torch.as_tensor(tau, dtype=DTYPE)


def _shift_rows(curvature: Tensor, n_s: int) -> Tensor:
    """Shift curvature rows by n_s vertices, ramping the boundary row to zero.

    For n_s > 0 rows move toward lower indices (the curve slides toward its
    high-index end); the vacated tail interpolates the last real row linearly
    down to exactly zero. Mirrored for n_s < 0.
    """
    n = curvature.shape[0]
    d = abs(n_s)
    out = torch.zeros_like(curvature)
    if n_s > 0:
        out[: n - d] = curvature[d:]
        boundary = out[n - d - 1]
        for j in range(1, d + 1):
            out[n - d - 1 + j] = boundary * (1.0 - j / d)
    else:
        out[d:] = curvature[: n - d]
        boundary = out[d]
        for j in range(1, d + 1):
            out[d - j] = boundary * (1.0 - j / d)
    return out


def score_imbalance(s_hat) -> int | None:
    """Raw (unclamped) shift n_s = round(n_bar) - N//2, or None when Ŝ sums to 0."""
    s = _as_tensor(s_hat).detach()
    n = s.shape[0]
    total = float(s.sum())
    if total <= 0.0:
        return None
    n_bar = float((torch.arange(n, dtype=DTYPE) * s).sum()) / total
    return int(math.floor(n_bar + 0.5)) - n // 2


def centre_shift(
    state: CurveState,
    s_hat: Tensor,
    cfg: CentreShiftConfig,
    step: int,
) -> tuple[CurveState, int]:
    """Re-centre the curve parametrization over the score profile.

    Computes the centre of mass n_bar of the normalized scores and the
    imbalance n_s = round(n_bar) - N//2. When the step counter is a multiple
    of ``cfg.alpha`` and |n_s| > beta*N, shifts the curvature rows by n_s
    (clamped to gamma) and re-integrates from the new midpoint frame, i.e.
    the old frame at vertex N//2 + n_s becomes the frame of vertex N//2.

    Args:
        state: current consistent curve state.
        s_hat: (N,) normalized score profile (max 1; all zero disables).
        cfg: trigger/clamp settings.
        step: optimization step counter (shift allowed when step % alpha == 0).

    Returns:
        (possibly shifted state, applied shift; 0 when unchanged).
    """
    n = state.n_vertices
    n_s = score_imbalance(s_hat)
    if n_s is None:
        return state, 0
    if step % cfg.alpha != 0 or abs(n_s) <= cfg.beta * n:
        return state, 0
    n_s = int(np.clip(n_s, -cfg.gamma, cfg.gamma))
    if n_s == 0:
        return state, 0

    shifted = _shift_rows(state.curvature.detach(), n_s)
    mid = n // 2
    src = mid + n_s
    new_state = build_state(
        state.positions[src].detach(),
        state.tangents[src].detach(),
        state.m1[src].detach(),
        shifted,
        state.length,
        mid,
    )
    return new_state, n_s
