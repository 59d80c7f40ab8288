"""Per-frame Adam loop with tiered learning rates and sequence processing.

One optimization step of a frame:

1. resample the integration start vertex and re-anchor the pose parameters
   there, 2. run the differentiable forward pass (integrate, project, render,
   score, mask, losses), 3. take an Adam step with the per-group rates
   (curve > render > camera), 4. project the constraints (curvature bound,
   render-parameter bounds) and re-integrate the curve, 5. periodically
   centre-shift. Learning rates decay by 0.8 after every ``patience``
   consecutive steps without improvement of the total loss, floored at
   ``lambda_min``; a frame converges when all rates sit at the floor and the
   relative improvement over a trailing window falls below tolerance.

Subsequent frames warm-start from the previous solution and pull toward it
through the temporal loss.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator

import numpy as np
import torch
from torch import Tensor

from .camera import CameraTriplet, project_curve_vector
from .curvemodel import (
    CentreShiftConfig,
    CurveConstraints,
    CurveState,
    build_state,
    centre_shift,
    integrate_curve,
    length_from_raw,
    project_curvature,
    raw_from_length,
    sample_start_index,
)
from .diffengine import GradientError, ParameterSet, gradient
from .losses import (
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
from .renderer import RenderLimits, RenderParams, SupportPlan, render_fields
from .scoring import MaskSet, ScoreProfile, apply_masks, build_masks, score_profile

DTYPE = torch.float64

__all__ = [
    "AblationToggles",
    "CentreShiftConfig",
    "DivergenceError",
    "FrameInputs",
    "FrameSolution",
    "OptimizerConfig",
    "PipelineSettings",
    "ProgressEvent",
    "RigConfigurationError",
    "StageError",
    "frame_forward",
    "init_first_frame",
    "optimize_frame",
    "process_sequence",
]


class StageError(RuntimeError):
    """A pipeline stage produced non-finite values; names the stage."""

    def __init__(self, stage: str):
        super().__init__(f"non-finite values after stage: {stage}")
        self.stage = stage


class RigConfigurationError(RuntimeError):
    """No 3D point projects inside all three views."""


class DivergenceError(RuntimeError):
    """Optimization diverged; carries the last finite solution."""

    def __init__(self, message: str, solution: "FrameSolution | None"):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam step sizes, decay schedule and step budgets.

    The three groups keep the hierarchy lambda_p > lambda_r > lambda_eta so
    the curve tracks motion while cameras stay nearly still. Optional
    ``first_frame_rates`` replace the three rates for the cold-started first
    frame only (same hierarchy required).
    """

    lambda_p: float = 1e-3
    lambda_r: float = 1e-4
    lambda_eta: float = 1e-5
    lambda_min: float = 1e-6
    decay: float = 0.8
    patience: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps_first: int = 2000
    max_steps_frame: int = 500
    convergence_window: int = 20
    convergence_rtol: float = 1e-6
    # relative decrease below which a step does not count as an improvement
    # for the patience counter (0 = strict decrease)
    improvement_rtol: float = 0.0
    length_growth_steps: int = 300
    init_length: float = 0.2
    # first-frame masking warm-up: masks stay off until the curve has grown
    # and settled, since they can only suppress not-yet-detected body parts
    mask_warmup_steps: int = 200
    # rebuild cadence of the masks (gradient constants that vary slowly)
    mask_every: int = 1
    # optional second anneal of the first frame at moderate rates: the
    # bootstrap rates traverse the shift/length valley too coarsely, and a
    # warm re-anneal spends its decay budget in the productive range
    refine_steps_first: int = 0
    refine_rates: tuple[float, float, float] = (8e-3, 3e-3, 2e-3)
    first_frame_rates: tuple[float, float, float] | None = None
    # numerical guards on the render scalars: rho below ~0.5 and large sigma
    # blow the blob support up to the whole image (heavy tails), and rho
    # beyond ~8 overflows the exponent chain
    rho_min: float = 0.8
    rho_max: float = 8.0
    iota_cap: float = 1.0
    sigma_cap: float = 8.0

    def __post_init__(self) -> None:
        if not (self.lambda_p > self.lambda_r > self.lambda_eta >= self.lambda_min):
            raise ValueError("rate hierarchy lambda_p > lambda_r > lambda_eta >= "
                             "lambda_min violated")
        if self.first_frame_rates is not None:
            p, r, e = self.first_frame_rates
            if not (p > r > e >= self.lambda_min):
                raise ValueError("first_frame_rates violate the rate hierarchy")
        p, r, e = self.refine_rates
        if not (p > r > e >= self.lambda_min):
            raise ValueError("refine_rates violate the rate hierarchy")
        if not (0.0 < self.decay < 1.0):
            raise ValueError("decay must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def rates_for(self, first_frame: bool) -> dict[str, float]:
        if first_frame and self.first_frame_rates is not None:
            p, r, e = self.first_frame_rates
            return {"curve": p, "render": r, "camera": e}
        return {"curve": self.lambda_p, "render": self.lambda_r, "camera": self.lambda_eta}


@dataclass(frozen=True)
class AblationToggles:
    """Component switches mirroring the ablation variants a-f."""

    no_camera_opt: bool = False      # a
    no_render_opt: bool = False      # b
    no_centre_shift: bool = False    # c
    no_scores_loss: bool = False     # d
    no_masking: bool = False         # e
    no_regularization: bool = False  # f: zeroes the smoothness/temporal weights

    _LETTERS = {
        "a": "no_camera_opt",
        "b": "no_render_opt",
        "c": "no_centre_shift",
        "d": "no_scores_loss",
        "e": "no_masking",
        "f": "no_regularization",
    }

    @classmethod
    def from_letters(cls, letters: Iterable[str]) -> "AblationToggles":
        flags = {}
        for letter in letters:
            if letter not in cls._LETTERS:
                raise ValueError(f"unknown ablation variant {letter!r}")
            flags[cls._LETTERS[letter]] = True
        return cls(**flags)

    def letters(self) -> str:
        return "".join(k for k, v in self._LETTERS.items() if getattr(self, v))


@dataclass
class PipelineSettings:
    """Everything optimize_frame needs besides images and parameters."""

    constraints: CurveConstraints = field(default_factory=CurveConstraints)
    limits: RenderLimits = field(default_factory=RenderLimits)
    weights: LossWeights = field(default_factory=LossWeights)
    shift_cfg: CentreShiftConfig = field(default_factory=CentreShiftConfig)
    opt: OptimizerConfig = field(default_factory=OptimizerConfig)
    toggles: AblationToggles = field(default_factory=AblationToggles)
    mask_threshold: float = 0.1
    render_init: tuple[float, float, float] = (5.0, 0.65, 1.2)

    def effective_weights(self) -> LossWeights:
        w = self.weights
        return LossWeights(
            w_px=w.w_px,
            w_sc=0.0 if self.toggles.no_scores_loss else w.w_sc,
            w_sm=0.0 if self.toggles.no_regularization else w.w_sm,
            w_t=0.0 if self.toggles.no_regularization else w.w_t,
            w_i=w.w_i,
        )


@dataclass
class ProgressEvent:
    """One line of the optimization trace."""

    step: int
    losses: dict[str, float]
    rates: dict[str, float]
    shift: int
    improved: bool


@dataclass
class FrameSolution:
    """Converged (or best-effort) result of one frame."""

    state: CurveState
    triplet: CameraTriplet
    render_params: RenderParams
    losses: dict[str, float]
    profile: ScoreProfile
    params: ParameterSet
    steps_used: int
    wall_time: float
    converged: bool
    frame_index: int = 0


@dataclass
class FrameInputs:
    """One frame of a sequence: images plus an optional camera override."""

    images: Tensor
    triplet: CameraTriplet | None = None
    index: int = 0


@dataclass
class FrameContext:
    """Constants of one frame's optimization (or one gradient evaluation)."""

    images: Tensor
    settings: PipelineSettings
    snapshot: FrameSnapshot | None = None
    px_to_mm: float = 1.0
    length_override: float | None = None
    support_plan: SupportPlan | None = None
    masks_override: MaskSet | None = None
    score_peak_override: float | None = None


@dataclass
class ForwardAux:
    """Intermediate products of one forward pass."""

    positions: Tensor
    tangents: Tensor
    m1: Tensor
    q: Tensor
    rendered: Tensor
    profile: ScoreProfile
    masks: MaskSet
    length: Tensor
    breakdown: LossBreakdown


def _orthonormal_frame(t_raw: Tensor, m1_raw: Tensor) -> tuple[Tensor, Tensor]:
    t = t_raw / torch.linalg.norm(t_raw)
    m1 = m1_raw - torch.dot(m1_raw, t) * t
    return t, m1 / torch.linalg.norm(m1)


def _check_finite(tensor: Tensor, stage: str) -> None:
    if not torch.isfinite(tensor).all():
        raise StageError(stage)


def frame_forward(params: ParameterSet, ctx: FrameContext) -> ForwardAux:
    """Differentiable project-render-score pass producing the loss breakdown."""
    settings = ctx.settings
    constraints = settings.constraints
    n = params.curvature.shape[0]

    if ctx.length_override is not None:
        length = torch.tensor(ctx.length_override, dtype=DTYPE)
    else:
        length = length_from_raw(params.length_raw, constraints)
    t0, m10 = _orthonormal_frame(params.t0, params.m10)
    positions, tangents, m1 = integrate_curve(
        params.p0, t0, m10, params.curvature, length, params.start_index
    )
    _check_finite(positions, "curve integration")

    q = project_curve_vector(params.camera, positions)
    _check_finite(q, "projection")

    render_params = RenderParams(sigma=params.sigma, iota=params.iota, rho=params.rho)
    rendered, blob_field = render_fields(
        q, render_params, settings.limits, plan=ctx.support_plan
    )

    profile = score_profile(blob_field, ctx.images)
    _check_finite(profile.raw, "scoring")

    if ctx.masks_override is not None:
        masks = ctx.masks_override
    elif settings.toggles.no_masking:
        masks = MaskSet(values=torch.ones_like(ctx.images), threshold=0.0)
    else:
        masks = build_masks(blob_field, profile.normalized, settings.mask_threshold)
    target = apply_masks(masks, ctx.images)

    current = FrameSnapshot(
        length=length,
        curvature=params.curvature,
        positions=positions,
        camera=params.camera,
        sigma=params.sigma,
        iota=params.iota,
        rho=params.rho,
    )
    weights = settings.effective_weights()
    breakdown = total_loss(
        pixel=pixel_loss(rendered.images, target),
        scores=scores_loss(profile.tapered, peak=ctx.score_peak_override),
        smoothness=smoothness_loss(params.curvature),
        temporal=temporal_loss(current, ctx.snapshot),
        intersection=intersection_loss(
            positions, blob_field.sigma_bar, constraints.k_max, ctx.px_to_mm
        ),
        weights=weights,
    )
    return ForwardAux(
        positions=positions,
        tangents=tangents,
        m1=m1,
        q=q,
        rendered=rendered.images,
        profile=profile,
        masks=masks,
        length=length,
        breakdown=breakdown,
    )


def make_loss_closure(ctx: FrameContext, cell: list | None = None) -> Callable[[ParameterSet], Tensor]:
    """Scalar loss closure over a ParameterSet, stashing aux in ``cell``."""

    def _loss(params: ParameterSet) -> Tensor:
        aux = frame_forward(params, ctx)
        if cell is not None:
            cell.clear()
            cell.append(aux)
        return aux.breakdown.total

    return _loss


def pixel_scale_mm(positions: Tensor, camera_vec: Tensor) -> float:
    """Object-units-per-pixel: median over views of mean depth / focal."""
    from .camera import rotation_matrix

    with torch.no_grad():
        scales = []
        for c in range(3):
            p = camera_vec[c * 15 : (c + 1) * 15]
            rot = rotation_matrix(p[4], p[5], p[6])
            z = (positions @ rot.T + p[7:10])[:, 2]
            focal = 0.5 * (float(p[0]) + float(p[1]))
            scales.append(float(z.mean()) / focal)
        return float(np.median(scales))


class _Adam:
    """Minimal Adam with per-group rates and masked (frozen) entries."""

    def __init__(self, params: ParameterSet, cfg: OptimizerConfig):
        self.cfg = cfg
        self.m = {n: torch.zeros_like(getattr(params, n)) for n, _ in params.named_parameters()}
        self.v = {n: torch.zeros_like(getattr(params, n)) for n, _ in params.named_parameters()}
        self.t = 0

    def step(
        self,
        params: ParameterSet,
        grads: dict[str, Tensor],
        rates: dict[str, float],
        skip_groups: set[str],
    ) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        with torch.no_grad():
            for name, group in params.named_parameters():
                if group in skip_groups or rates[group] == 0.0:
                    continue
                g = grads[name]
                m = self.m[name]
                v = self.v[name]
                m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
                v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
                update = rates[group] * (m / bc1) / ((v / bc2).sqrt() + cfg.eps)
                tensor = getattr(params, name)
                if name == "camera":
                    free = ~params.camera_frozen
                    tensor.data[free] = tensor.data[free] - update[free]
                else:
                    tensor.data.sub_(update)

    def shift_curvature_rows(self, n_s: int) -> None:
        """Slide the curvature moments alongside a centre-shift."""
        for buf in (self.m["curvature"], self.v["curvature"]):
            shifted = torch.zeros_like(buf)
            d = abs(n_s)
            if n_s > 0:
                shifted[: buf.shape[0] - d] = buf[d:]
            else:
                shifted[d:] = buf[: buf.shape[0] - d]
            buf.copy_(shifted)


def _project_params(params: ParameterSet, settings: PipelineSettings) -> None:
    """Post-step constraint projection on the raw parameter tensors."""
    cfg = settings.opt
    with torch.no_grad():
        params.curvature.data.copy_(
            project_curvature(params.curvature.data, settings.constraints)
        )
        params.sigma.data.clamp_(min=settings.limits.sigma_min, max=cfg.sigma_cap)
        params.iota.data.clamp_(min=settings.limits.iota_min, max=cfg.iota_cap)
        params.rho.data.clamp_(min=cfg.rho_min, max=cfg.rho_max)


def _rebuild_state(
    params: ParameterSet, settings: PipelineSettings, length_override: float | None
) -> CurveState:
    with torch.no_grad():
        if length_override is not None:
            length = float(length_override)
        else:
            length = float(length_from_raw(params.length_raw, settings.constraints))
        t0, m10 = _orthonormal_frame(params.t0.detach(), params.m10.detach())
        return build_state(
            params.p0.detach(), t0, m10, params.curvature.detach(), length,
            params.start_index,
        )


def _solution(
    params: ParameterSet,
    state: CurveState,
    aux: ForwardAux | None,
    steps: int,
    wall: float,
    converged: bool,
    frame_index: int,
) -> FrameSolution:
    losses = aux.breakdown.as_floats() if aux is not None else {}
    profile = (
        aux.profile.detach_clone()
        if aux is not None
        else ScoreProfile(*(torch.zeros(state.n_vertices, dtype=DTYPE),) * 3)
    )
    return FrameSolution(
        state=state.detach_clone(),
        triplet=CameraTriplet.from_vector(
            params.camera.detach(), frozen=params.camera_frozen.numpy().copy()
        ),
        render_params=RenderParams(
            params.sigma.detach().clone(),
            params.iota.detach().clone(),
            params.rho.detach().clone(),
        ),
        losses=losses,
        profile=profile,
        params=params.detach_clone(),
        steps_used=steps,
        wall_time=wall,
        converged=converged,
        frame_index=frame_index,
    )


def optimize_frame(
    images: Tensor,
    params: ParameterSet,
    settings: PipelineSettings,
    rng: np.random.Generator,
    snapshot: FrameSnapshot | None = None,
    sink: Callable[[ProgressEvent], None] | None = None,
    first_frame: bool = False,
    max_steps: int | None = None,
    frame_index: int = 0,
) -> FrameSolution:
    """Run the Adam loop on one frame until convergence or the step budget.

    Args:
        images: (3, w, w) normalized bright-foreground images.
        params: warm-start parameters (mutated in place during the run).
        settings: pipeline configuration.
        rng: seeded generator driving the start-vertex resampling.
        snapshot: previous frame's variables (None for the first frame).
        sink: optional progress-event consumer.
        first_frame: enables the length growth schedule and bootstrap rates.
        max_steps: overrides the configured step budget.
        frame_index: bookkeeping tag for the solution.

    Raises:
        DivergenceError: NaN/Inf encountered; carries the last finite solution.
    """
    cfg = settings.opt
    toggles = settings.toggles
    constraints = settings.constraints
    images = torch.as_tensor(images, dtype=DTYPE)
    if images.shape != (3, settings.limits.image_size, settings.limits.image_size):
        raise ValueError("images must be (3, w, w) matching the configured size")

    budget = max_steps if max_steps is not None else (
        cfg.max_steps_first if first_frame else cfg.max_steps_frame
    )
    rates = cfg.rates_for(first_frame)
    base_skip = set()
    if toggles.no_camera_opt:
        base_skip.add("camera")
    if toggles.no_render_opt:
        base_skip.add("render")

    state = _rebuild_state(
        params, settings, cfg.init_length if first_frame and cfg.length_growth_steps > 0 else None
    )
    px_to_mm = pixel_scale_mm(state.positions, params.camera.detach())
    adam = _Adam(params, cfg)
    best = math.inf
    stall = 0
    recent: deque[float] = deque(maxlen=cfg.convergence_window + 1)
    converged = False
    growth_until = cfg.length_growth_steps if first_frame else 0
    handover_done = not first_frame or growth_until == 0
    aux: ForwardAux | None = None
    last_good: FrameSolution | None = None
    start_time = time.perf_counter()
    step = 0

    for step in range(budget):
        n0 = sample_start_index(state.n_vertices, rng)
        with torch.no_grad():
            params.p0.data.copy_(state.positions[n0])
            params.t0.data.copy_(state.tangents[n0])
            params.m10.data.copy_(state.m1[n0])
        params.start_index = n0

        if step < growth_until:
            frac = step / growth_until
            length_override = cfg.init_length + (constraints.l_min - cfg.init_length) * frac
        else:
            if not handover_done:
                margin = constraints.l_min + 0.02 * (constraints.l_max - constraints.l_min)
                with torch.no_grad():
                    params.length_raw.data.fill_(raw_from_length(margin, constraints))
                handover_done = True
                best = math.inf  # the regime change invalidates the best-so-far
            length_override = None

        masks_override = None
        if first_frame and step < growth_until + cfg.mask_warmup_steps:
            if not settings.toggles.no_masking:
                masks_override = MaskSet(values=torch.ones_like(images), threshold=0.0)
        elif (
            cfg.mask_every > 1
            and aux is not None
            and step % cfg.mask_every != 0
            and not settings.toggles.no_masking
        ):
            masks_override = aux.masks  # reuse between rebuild steps
        ctx = FrameContext(
            images=images,
            settings=settings,
            snapshot=snapshot,
            px_to_mm=px_to_mm,
            length_override=length_override,
            masks_override=masks_override,
        )
        cell: list = []
        closure = make_loss_closure(ctx, cell)
        try:
            report = gradient(closure, params)
        except (StageError, NonFiniteLossError, GradientError) as err:
            wall = time.perf_counter() - start_time
            if aux is not None and math.isfinite(float(aux.breakdown.total)):
                last_good = _solution(params, state, aux, step, wall, False, frame_index)
            raise DivergenceError(str(err), last_good) from err
        aux = cell[0]

        skip_groups = set(base_skip)
        if step < growth_until:
            # while the curve is still being positioned, render parameters
            # only chase pixels by over-blurring; hold them during growth
            skip_groups.add("render")
        adam.step(params, report.grads, rates, skip_groups)
        _project_params(params, settings)
        state = _rebuild_state(params, settings, length_override)

        shift_applied = 0
        if not toggles.no_centre_shift:
            state, shift_applied = centre_shift(
                state, aux.profile.normalized, settings.shift_cfg, step + 1
            )
            if shift_applied != 0:
                with torch.no_grad():
                    params.curvature.data.copy_(state.curvature)
                params.start_index = state.start_index
                adam.shift_curvature_rows(shift_applied)

        total = float(aux.breakdown.total)
        # the tolerance floor matters when the loss is numerically tiny:
        # gains below it are indistinguishable from evaluation jitter
        margin = cfg.improvement_rtol * max(abs(best) if best < math.inf else 0.0, 1.0)
        improved = total < best - margin
        if improved:
            best = total
            stall = 0
        elif step < growth_until:
            # the loss plateaus against the scheduled length while the curve
            # is still growing; decaying rates here freezes the cold start
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                rates = {g: max(r * cfg.decay, cfg.lambda_min) for g, r in rates.items()}
                stall = 0

        recent.append(total)
        if sink is not None:
            sink(
                ProgressEvent(
                    step=step,
                    losses=aux.breakdown.as_floats(),
                    rates=dict(rates),
                    shift=shift_applied,
                    improved=improved,
                )
            )

        floored = all(r <= cfg.lambda_min * (1 + 1e-12) for r in rates.values())
        if floored and len(recent) == cfg.convergence_window + 1:
            first_l, last_l = recent[0], recent[-1]
            # the 1e-6 floor keeps the relative test meaningful for losses
            # that are already numerically zero
            rel = (first_l - last_l) / max(abs(first_l), 1e-6)
            if rel < cfg.convergence_rtol:
                converged = True
                break

    wall = time.perf_counter() - start_time
    steps_used = step + 1 if budget > 0 else 0
    return _solution(params, state, aux, steps_used, wall, converged, frame_index)


def init_first_frame(
    images: Tensor,
    triplet: CameraTriplet,
    settings: PipelineSettings,
    rng: np.random.Generator,
) -> ParameterSet:
    """Cold-start parameters: a small random straight line at the rig centre.

    The start position is the least-squares intersection of the three rays
    cast through the image centres; its projections must land inside every
    view.

    Raises:
        RigConfigurationError: the centre point misses one of the views.
    """
    constraints = settings.constraints
    w = settings.limits.image_size
    vec = triplet.to_vector()

    origins, dirs = [], []
    with torch.no_grad():
        from .camera import rotation_matrix

        for c in range(3):
            p = vec[c * 15 : (c + 1) * 15]
            rot = rotation_matrix(p[4], p[5], p[6]).numpy()
            t = p[7:10].numpy()
            centre_cam = np.array(
                [(w / 2.0 - float(p[2])) / float(p[0]), (w / 2.0 - float(p[3])) / float(p[1]), 1.0]
            )
            d = rot.T @ centre_cam
            d /= np.linalg.norm(d)
            origins.append(-rot.T @ t)
            dirs.append(d)

    a = np.zeros((3, 3))
    b = np.zeros(3)
    for o, d in zip(origins, dirs):
        proj = np.eye(3) - np.outer(d, d)
        a += proj
        b += proj @ o
    centre = np.linalg.solve(a, b)

    q = project_curve_vector(vec, torch.as_tensor(centre).reshape(1, 3))
    inside = ((q[:, 0, 0] >= 0) & (q[:, 0, 0] < w) & (q[:, 0, 1] >= 0) & (q[:, 0, 1] < w)).all()
    if not bool(inside):
        raise RigConfigurationError(
            "the three view-centre rays meet outside at least one field of view"
        )

    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    m1 = rng.normal(size=3)
    m1 -= (m1 @ direction) * direction
    m1 /= np.linalg.norm(m1)

    n = constraints.n_vertices
    sigma0, iota0, rho0 = settings.render_init
    return ParameterSet(
        p0=torch.as_tensor(centre, dtype=DTYPE),
        t0=torch.as_tensor(direction, dtype=DTYPE),
        m10=torch.as_tensor(m1, dtype=DTYPE),
        curvature=torch.zeros(n, 2, dtype=DTYPE),
        length_raw=torch.tensor(raw_from_length(constraints.l_min * 1.02, constraints)),
        sigma=torch.full((3,), sigma0, dtype=DTYPE),
        iota=torch.full((3,), iota0, dtype=DTYPE),
        rho=torch.full((3,), rho0, dtype=DTYPE),
        camera=vec.clone(),
        camera_frozen=torch.as_tensor(triplet.frozen, dtype=torch.bool),
        start_index=n // 2,
    )


def warm_start_params(solution: FrameSolution, triplet: CameraTriplet | None) -> ParameterSet:
    """Parameters for the next frame, carrying unfrozen camera values over."""
    params = solution.params.detach_clone()
    if triplet is not None:
        base = triplet.to_vector()
        free = ~params.camera_frozen
        base[free] = params.camera.detach()[free]
        params.camera = base
    return params


def snapshot_of(solution: FrameSolution) -> FrameSnapshot:
    """Previous-frame variable set used by the temporal loss."""
    return FrameSnapshot.of(
        length=solution.state.length,
        curvature=solution.state.curvature,
        positions=solution.state.positions,
        camera=solution.params.camera,
        sigma=solution.render_params.sigma,
        iota=solution.render_params.iota,
        rho=solution.render_params.rho,
    )


def process_sequence(
    frames: Iterable[FrameInputs],
    triplet: CameraTriplet,
    settings: PipelineSettings,
    rng: np.random.Generator,
    sink: Callable[[ProgressEvent], None] | None = None,
) -> Iterator[FrameSolution]:
    """Reconstruct an ordered frame sequence with warm starts.

    Frame 0 is cold-started (init_first_frame, first-frame budget); every
    later frame starts from its predecessor's solution and carries a
    populated temporal snapshot. Frames that fail to converge (or diverge)
    are emitted flagged and the sequence continues from their best-effort
    parameters.
    """
    prev: FrameSolution | None = None
    for position, frame in enumerate(frames):
        images = torch.as_tensor(frame.images, dtype=DTYPE)
        frame_triplet = frame.triplet if frame.triplet is not None else triplet
        index = frame.index if frame.index else position
        if prev is None:
            params = init_first_frame(images, frame_triplet, settings, rng)
            snapshot = None
            first = True
        else:
            params = warm_start_params(prev, frame.triplet)
            snapshot = snapshot_of(prev)
            first = False
        try:
            solution = optimize_frame(
                images,
                params,
                settings,
                rng,
                snapshot=snapshot,
                sink=sink,
                first_frame=first,
                frame_index=index,
            )
            if first and settings.opt.refine_steps_first > 0:
                solution = refine_first_frame(
                    images, solution, settings, rng, sink=sink, frame_index=index
                )
        except DivergenceError as err:
            if err.solution is None:
                raise
            solution = replace(err.solution, converged=False, frame_index=index)
        prev = solution
        yield solution


def refine_first_frame(
    images: Tensor,
    solution: FrameSolution,
    settings: PipelineSettings,
    rng: np.random.Generator,
    sink: Callable[[ProgressEvent], None] | None = None,
    frame_index: int = 0,
) -> FrameSolution:
    """Second anneal of the cold-started frame at the refinement rates."""
    cfg = settings.opt
    p, r, e = cfg.refine_rates
    refine_opt = replace(
        cfg,
        lambda_p=p,
        lambda_r=r,
        lambda_eta=e,
        max_steps_frame=cfg.refine_steps_first,
        first_frame_rates=None,
        improvement_rtol=0.0,  # the shift/length crawl improves slowly but surely
    )
    refine_settings = replace(settings, opt=refine_opt)
    warm = warm_start_params(solution, None)
    refined = optimize_frame(
        images, warm, refine_settings, rng, sink=sink, frame_index=frame_index
    )
    return replace(
        refined,
        steps_used=solution.steps_used + refined.steps_used,
        wall_time=solution.wall_time + refined.wall_time,
    )
