"""Forward-model synthetic scenes and sequences with exact ground truth.

A scene samples a smooth curvature field (low-order trigonometric series),
integrates the curve, projects it through a nearly-orthogonal three-camera
rig and renders it with the same blob model the optimizer fits, then layers
static distractor blobs and Gaussian pixel noise on top. The delivered
calibration is a perturbed copy of the true one: the true relative shifts are
withheld (zeroed), producing a controlled reprojection error that the
shift-only recalibration can recover.

Sequences evolve the curvature coefficients by a bounded random walk, apply a
rigid motion track, and optionally drift the true render parameters to mimic
focus changes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .camera import CameraModel, CameraTriplet, TripletShifts, project_curve, save_calibration
from .curvemodel import CurveConstraints, CurveState, build_state
from .losses import intersection_loss
from .renderer import RenderLimits, RenderParams, render, taper_params
from .optimizer import pixel_scale_mm

DTYPE = torch.float64


@dataclass(frozen=True)
class DistractorSpec:
    """Static blob artifacts (bubbles, dirt) burned into the images.

    Placement is per view in pixel coordinates. ``near_view``/``gap_px``
    force one distractor at a controlled distance from the projected body in
    a single view; the rest are scattered at least ``clear_px`` away from it.
    """

    count: int = 0
    sigma_range: tuple[float, float] = (2.0, 6.0)
    intensity_range: tuple[float, float] = (0.3, 0.8)
    rho: float = 1.5
    near_view: int | None = None
    gap_px: float | None = None
    clear_px: float = 25.0


@dataclass(frozen=True)
class SceneSpec:
    """Knobs of one synthetic frame."""

    constraints: CurveConstraints = field(default_factory=CurveConstraints)
    limits: RenderLimits = field(default_factory=RenderLimits)
    full_size: int | None = None  # PNG canvas; defaults to the working size
    length: float = 1.0
    curvature_amplitude: float = 3.0
    curvature_modes: int = 4
    sigma_true: tuple[float, float] = (4.6, 5.4)
    iota_true: tuple[float, float] = (0.55, 0.75)
    rho_true: tuple[float, float] = (1.0, 1.4)
    noise_sigma: float = 0.02
    distractors: DistractorSpec = field(default_factory=DistractorSpec)
    camera_error_px: float = 10.0  # perturbation budget; actual RMS ~[0.55, 0.75] of it
    focal_px: float = 8000.0
    depth_mm: float = 100.0
    rig_jitter_deg: float = 5.0
    centre_jitter_mm: float = 0.1
    max_attempts: int = 100


@dataclass
class Distractor:
    view: int
    u: float
    v: float
    sigma: float
    intensity: float
    rho: float


@dataclass
class SyntheticScene:
    """Ground truth of one frame plus the realized nuisance content."""

    state: CurveState
    triplet_true: CameraTriplet
    triplet_perturbed: CameraTriplet
    render_true: RenderParams
    noise_sigma: float
    distractors: list[Distractor]
    spec: SceneSpec


@dataclass(frozen=True)
class SequenceSpec:
    """Knobs of a synthetic clip."""

    scene: SceneSpec = field(default_factory=SceneSpec)
    n_frames: int = 10
    curvature_walk: float = 0.05
    translation_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sigma_drift: tuple[float, float, float] = (0.0, 0.0, 0.0)  # per frame, per view
    rho_drift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    temporal_cap: float = 5.0  # bound on ground-truth squared parameter change


@dataclass
class SyntheticSequence:
    scenes: list[SyntheticScene]
    spec: SequenceSpec


class SceneGenerationError(RuntimeError):
    """Could not sample a feasible scene within the attempt budget."""


# ---------------------------------------------------------------------------
# rig construction
# ---------------------------------------------------------------------------


def _euler_zyx_from_matrix(rot: np.ndarray) -> tuple[float, float, float]:
    """Angles (phi0, phi1, phi2) with R = Rz(phi0) Ry(phi1) Rx(phi2)."""
    phi1 = math.asin(-rot[2, 0])
    phi0 = math.atan2(rot[1, 0], rot[0, 0])
    phi2 = math.atan2(rot[2, 1], rot[2, 2])
    return phi0 % (2 * math.pi), phi1 % (2 * math.pi), phi2 % (2 * math.pi)


def _look_rotation(axis: np.ndarray, up_hint: np.ndarray) -> np.ndarray:
    """World->camera rotation with the optical axis along ``axis``."""
    z = axis / np.linalg.norm(axis)
    x = np.cross(up_hint, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=0)


def make_rig(spec: SceneSpec, rng: np.random.Generator) -> CameraTriplet:
    """Nearly-orthogonal triplet looking at the origin from ``depth_mm``."""
    w_work = spec.limits.image_size
    canvas = spec.full_size if spec.full_size is not None else w_work
    axes = [np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])]
    ups = [np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])]
    cams = []
    for axis, up in zip(axes, ups):
        jitter = np.deg2rad(spec.rig_jitter_deg)
        axis = axis + rng.uniform(-jitter, jitter, size=3)
        rot = _look_rotation(axis, up)
        phi0, phi1, phi2 = _euler_zyx_from_matrix(rot)
        # re-quantize so the stored angles reproduce the matrix exactly
        t = -rot @ np.zeros(3) + np.array([0.0, 0.0, spec.depth_mm])
        cams.append(
            CameraModel(
                fx=spec.focal_px * float(rng.uniform(0.98, 1.02)),
                fy=spec.focal_px * float(rng.uniform(0.98, 1.02)),
                cx=canvas / 2.0 + float(rng.uniform(-2, 2)),
                cy=canvas / 2.0 + float(rng.uniform(-2, 2)),
                phi0=phi0,
                phi1=phi1,
                phi2=phi2,
                tx=float(t[0]),
                ty=float(t[1]),
                tz=float(t[2]),
                k1=float(rng.uniform(-0.5, 0.5)),
                k2=float(rng.uniform(-0.2, 0.2)),
                k3=0.0,
                p1=float(rng.uniform(-0.005, 0.005)),
                p2=float(rng.uniform(-0.005, 0.005)),
            )
        )
    return CameraTriplet(cams=tuple(cams), shifts=TripletShifts())


def _draw_shift_perturbation(budget_px: float, rng: np.random.Generator) -> TripletShifts:
    mags = rng.uniform(0.55 * budget_px, 0.75 * budget_px, size=3)
    signs = rng.choice([-1.0, 1.0], size=3)
    vals = mags * signs
    return TripletShifts(dx=float(vals[0]), dy=float(vals[1]), dz=float(vals[2]))


def reprojection_rms(scene: SyntheticScene) -> float:
    """RMS pixel gap of the true curve between true and perturbed cameras."""
    q_true = project_curve(scene.triplet_true, scene.state.positions)
    q_pert = project_curve(scene.triplet_perturbed, scene.state.positions)
    return float(torch.sqrt(((q_true - q_pert) ** 2).sum(-1).mean()))


# ---------------------------------------------------------------------------
# curve sampling
# ---------------------------------------------------------------------------


def _curvature_series(
    spec: SceneSpec, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Random coefficients (modes x 2 x 2: cos/sin per component)."""
    coeffs = np.zeros((spec.curvature_modes, 2, 2))
    for m in range(spec.curvature_modes):
        coeffs[m] = rng.normal(0.0, spec.curvature_amplitude / (m + 1), size=(2, 2))
    phases = rng.uniform(0, 2 * np.pi, size=(spec.curvature_modes, 2))
    return coeffs, phases


def _curvature_from_series(
    coeffs: np.ndarray, phases: np.ndarray, n: int, bound: float
) -> np.ndarray:
    s = np.linspace(0.0, 1.0, n)
    k = np.zeros((n, 2))
    for m in range(coeffs.shape[0]):
        for comp in range(2):
            k[:, comp] += coeffs[m, comp, 0] * np.cos((m + 1) * np.pi * s + phases[m, comp])
            k[:, comp] += coeffs[m, comp, 1] * np.sin((m + 1) * np.pi * s + phases[m, comp])
    norms = np.linalg.norm(k, axis=1)
    peak = norms.max()
    if peak >= 0.8 * bound:  # keep well inside the constraint
        k *= 0.8 * bound / peak
    return k


def _random_frame(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    t0 = rng.normal(size=3)
    t0 /= np.linalg.norm(t0)
    m0 = rng.normal(size=3)
    m0 -= (m0 @ t0) * t0
    m0 /= np.linalg.norm(m0)
    return t0, m0


def _state_from_curvature(
    spec: SceneSpec, k: np.ndarray, t0: np.ndarray, m0: np.ndarray, centre: np.ndarray
) -> CurveState:
    mid = spec.constraints.n_vertices // 2
    state = build_state(np.zeros(3), t0, m0, k, spec.length, mid)
    offset = torch.as_tensor(centre, dtype=DTYPE) - state.positions.mean(dim=0)
    state.positions = state.positions + offset
    return state


# ---------------------------------------------------------------------------
# image synthesis
# ---------------------------------------------------------------------------


def _place_distractors(
    dspec: DistractorSpec,
    q_true: Tensor,
    w: int,
    rng: np.random.Generator,
) -> list[Distractor]:
    out: list[Distractor] = []
    if dspec.count <= 0:
        return out
    body = [q_true[c].numpy() for c in range(3)]

    def _min_gap(view: int, u: float, v: float) -> float:
        d = body[view] - np.array([u, v])
        return float(np.sqrt((d**2).sum(axis=1)).min())

    remaining = dspec.count
    if dspec.near_view is not None and dspec.gap_px is not None:
        view = dspec.near_view
        placed = False
        for _ in range(2000):
            anchor = body[view][rng.integers(len(body[view]))]
            angle = rng.uniform(0, 2 * np.pi)
            u = float(anchor[0] + dspec.gap_px * np.cos(angle))
            v = float(anchor[1] + dspec.gap_px * np.sin(angle))
            if not (8 <= u < w - 8 and 8 <= v < w - 8):
                continue
            if abs(_min_gap(view, u, v) - dspec.gap_px) < 0.15 * dspec.gap_px:
                out.append(
                    Distractor(
                        view=view,
                        u=u,
                        v=v,
                        sigma=float(rng.uniform(*dspec.sigma_range)),
                        intensity=float(rng.uniform(*dspec.intensity_range)),
                        rho=dspec.rho,
                    )
                )
                remaining -= 1
                placed = True
                break
        if not placed:
            raise SceneGenerationError("could not place the near-body distractor")
    attempts = 0
    while remaining > 0:
        attempts += 1
        if attempts > 5000:
            raise SceneGenerationError("could not place distractors clear of the body")
        view = int(rng.integers(0, 3))
        u = float(rng.uniform(8, w - 8))
        v = float(rng.uniform(8, w - 8))
        if _min_gap(view, u, v) < dspec.clear_px:
            continue
        out.append(
            Distractor(
                view=view,
                u=u,
                v=v,
                sigma=float(rng.uniform(*dspec.sigma_range)),
                intensity=float(rng.uniform(*dspec.intensity_range)),
                rho=dspec.rho,
            )
        )
        remaining -= 1
    return out


def _burn_distractors(images: Tensor, distractors: list[Distractor]) -> Tensor:
    if not distractors:
        return images
    w = images.shape[-1]
    jj, ii = torch.meshgrid(
        torch.arange(w, dtype=DTYPE), torch.arange(w, dtype=DTYPE), indexing="ij"
    )
    out = images.clone()
    for d in distractors:
        d2 = (ii - d.u) ** 2 + (jj - d.v) ** 2
        blob = d.intensity * torch.exp(-((d2 / (2.0 * d.sigma**2)) ** d.rho))
        out[d.view] = torch.maximum(out[d.view], blob)
    return out


def _render_truth(scene: SyntheticScene) -> Tensor:
    q = project_curve(scene.triplet_true, scene.state.positions)
    return render(q, scene.render_true, canvas_limits(scene.spec)).images


def scene_images(scene: SyntheticScene, rng: np.random.Generator | None) -> Tensor:
    """Clean render + distractors + optional Gaussian noise, clamped to [0, 1]."""
    images = _render_truth(scene)
    images = _burn_distractors(images, scene.distractors)
    if scene.noise_sigma > 0.0 and rng is not None:
        noise = torch.as_tensor(
            rng.normal(0.0, scene.noise_sigma, size=tuple(images.shape)), dtype=DTYPE
        )
        images = torch.clamp(images + noise, 0.0, 1.0)
    return images


# ---------------------------------------------------------------------------
# public generators
# ---------------------------------------------------------------------------


def _draw_render_true(spec: SceneSpec, rng: np.random.Generator) -> RenderParams:
    return RenderParams(
        sigma=torch.as_tensor(rng.uniform(*spec.sigma_true, size=3)),
        iota=torch.as_tensor(rng.uniform(*spec.iota_true, size=3)),
        rho=torch.as_tensor(rng.uniform(*spec.rho_true, size=3)),
    )


def canvas_size(spec: SceneSpec) -> int:
    """Rendered image side: the full canvas when one is configured."""
    return spec.full_size if spec.full_size is not None else spec.limits.image_size


def canvas_limits(spec: SceneSpec) -> RenderLimits:
    return RenderLimits(
        sigma_min=spec.limits.sigma_min,
        iota_min=spec.limits.iota_min,
        image_size=canvas_size(spec),
    )


def _feasible(spec: SceneSpec, state: CurveState, triplet: CameraTriplet,
              render_true: RenderParams, margin: float = 18.0,
              central: bool = True) -> bool:
    w = canvas_size(spec)
    if central:
        # inside the working crop about the canvas centre (first frame)
        usable = min(w, spec.limits.image_size)
        lo = (w - usable) / 2.0 + margin
        hi = (w + usable) / 2.0 - margin
    else:
        lo, hi = margin, w - margin
    q = project_curve(triplet, state.positions)
    if float(q.min()) < lo or float(q.max()) > hi:
        return False
    sb, _ = taper_params(render_true, spec.limits, state.n_vertices)
    px_mm = pixel_scale_mm(state.positions, triplet.to_vector())
    return float(
        intersection_loss(state.positions, sb, spec.constraints.k_max, px_mm)
    ) == 0.0


def generate_scene(
    spec: SceneSpec, rng: np.random.Generator
) -> tuple[SyntheticScene, Tensor]:
    """One feasible frame with ground truth and its image triplet.

    Curves violating the self-intersection penalty or leaving the field of
    view are resampled (up to ``spec.max_attempts``).

    Raises:
        SceneGenerationError: no feasible curve found within the budget.
    """
    triplet_true = make_rig(spec, rng)
    if spec.camera_error_px > 0:
        triplet_true = replace(
            triplet_true, shifts=_draw_shift_perturbation(spec.camera_error_px, rng)
        )

    w = spec.limits.image_size
    for _ in range(spec.max_attempts):
        coeffs, phases = _curvature_series(spec, rng)
        k = _curvature_from_series(
            coeffs, phases, spec.constraints.n_vertices, spec.constraints.curvature_bound
        )
        t0, m0 = _random_frame(rng)
        centre = rng.uniform(-spec.centre_jitter_mm, spec.centre_jitter_mm, size=3)
        state = _state_from_curvature(spec, k, t0, m0, centre)
        render_true = _draw_render_true(spec, rng)
        if not _feasible(spec, state, triplet_true, render_true):
            continue
        q = project_curve(triplet_true, state.positions)
        distractors = _place_distractors(spec.distractors, q.detach(), canvas_size(spec), rng)
        perturbed = CameraTriplet(
            cams=triplet_true.cams,
            shifts=TripletShifts(),
            frozen=triplet_true.frozen.copy(),
        )
        scene = SyntheticScene(
            state=state,
            triplet_true=triplet_true,
            triplet_perturbed=perturbed,
            render_true=render_true,
            noise_sigma=spec.noise_sigma,
            distractors=distractors,
            spec=spec,
        )
        return scene, scene_images(scene, rng)
    raise SceneGenerationError(f"no feasible curve in {spec.max_attempts} attempts")


def write_clip(
    scenes: list[SyntheticScene],
    images: list[Tensor],
    out_dir,
    bit_depth: int = 16,
) -> None:
    """Write a clip in the pipeline's input layout plus ground truth.

    PNGs are stored dark-body-on-light (inverted), matching the pipeline's
    default ingestion polarity. Images are saved at the generator's canvas
    size; the pipeline's centroid-tracked crop recovers the working window.
    """
    from PIL import Image

    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)

    gt_lines = []
    for t, (scene, triplet_images) in enumerate(zip(scenes, images)):
        for c in range(3):
            inverted = 1.0 - triplet_images[c].clamp(0.0, 1.0)
            if bit_depth == 16:
                arr = np.round(inverted.numpy() * 65535.0).astype(np.uint16)
            else:
                arr = np.round(inverted.numpy() * 255.0).astype(np.uint8)
            img = Image.fromarray(arr)
            img.save(frames_dir / f"frame_{t:06d}_cam{c}.png")
        gt_lines.append(
            json.dumps(
                {
                    "frame": t,
                    "positions": scene.state.positions.tolist(),
                    "curvature": scene.state.curvature.tolist(),
                    "length": float(scene.state.length),
                    "camera_true": scene.triplet_true.to_vector().tolist(),
                    "camera_perturbed": scene.triplet_perturbed.to_vector().tolist(),
                    "sigma": scene.render_true.sigma.tolist(),
                    "iota": scene.render_true.iota.tolist(),
                    "rho": scene.render_true.rho.tolist(),
                }
            )
        )

    save_calibration(scenes[0].triplet_perturbed, out_dir / "calibration.json")
    (out_dir / "groundtruth.jsonl").write_text("\n".join(gt_lines) + "\n")


def generate_sequence(
    spec: SequenceSpec, rng: np.random.Generator
) -> tuple[SyntheticSequence, list[Tensor]]:
    """An ordered clip: fixed anchor frame, evolving curvature, rigid motion.

    The curvature coefficients walk randomly with the per-frame change capped
    so the ground truth's temporal loss stays below ``spec.temporal_cap``;
    the start orientation, cameras, distractors and length are shared across
    the clip, and true render parameters optionally drift linearly.
    """
    scene_spec = spec.scene
    constraints = scene_spec.constraints
    triplet_true = make_rig(scene_spec, rng)
    if scene_spec.camera_error_px > 0:
        triplet_true = replace(
            triplet_true, shifts=_draw_shift_perturbation(scene_spec.camera_error_px, rng)
        )
    perturbed = CameraTriplet(
        cams=triplet_true.cams, shifts=TripletShifts(), frozen=triplet_true.frozen.copy()
    )
    render_base = _draw_render_true(scene_spec, rng)
    w = scene_spec.limits.image_size

    # feasible anchor frame
    for _ in range(scene_spec.max_attempts):
        coeffs, phases = _curvature_series(scene_spec, rng)
        k0 = _curvature_from_series(
            coeffs, phases, constraints.n_vertices, constraints.curvature_bound
        )
        t0, m0 = _random_frame(rng)
        centre0 = rng.uniform(-scene_spec.centre_jitter_mm, scene_spec.centre_jitter_mm, size=3)
        state0 = _state_from_curvature(scene_spec, k0, t0, m0, centre0)
        if _feasible(scene_spec, state0, triplet_true, render_base):
            break
    else:
        raise SceneGenerationError("no feasible anchor frame for the sequence")

    q0 = project_curve(triplet_true, state0.positions)
    distractors = _place_distractors(scene_spec.distractors, q0.detach(), canvas_size(scene_spec), rng)

    scenes: list[SyntheticScene] = []
    images: list[Tensor] = []
    prev_k = None
    state = state0
    for t in range(spec.n_frames):
        if t > 0:
            centre_t = centre0 + t * np.asarray(spec.translation_mm)
            for _ in range(scene_spec.max_attempts):
                trial = coeffs + rng.normal(0.0, spec.curvature_walk, size=coeffs.shape)
                k = _curvature_from_series(
                    trial, phases, constraints.n_vertices, constraints.curvature_bound
                )
                if prev_k is not None and float(((k - prev_k) ** 2).sum()) > spec.temporal_cap:
                    continue
                candidate = _state_from_curvature(scene_spec, k, t0, m0, centre_t)
                if _feasible(scene_spec, candidate, triplet_true, render_base, central=False):
                    coeffs = trial
                    state = candidate
                    break
            else:
                raise SceneGenerationError(f"no feasible evolution at frame {t}")
        prev_k = state.curvature.numpy().copy()

        render_true = RenderParams(
            sigma=torch.clamp(
                render_base.sigma + torch.as_tensor(spec.sigma_drift, dtype=DTYPE) * t,
                min=scene_spec.limits.sigma_min,
            ),
            iota=render_base.iota.clone(),
            rho=torch.clamp(
                render_base.rho + torch.as_tensor(spec.rho_drift, dtype=DTYPE) * t,
                min=0.3,
            ),
        )
        scene = SyntheticScene(
            state=state,
            triplet_true=triplet_true,
            triplet_perturbed=perturbed,
            render_true=render_true,
            noise_sigma=scene_spec.noise_sigma,
            distractors=distractors,
            spec=scene_spec,
        )
        scenes.append(scene)
        images.append(scene_images(scene, rng))
    return SyntheticSequence(scenes=scenes, spec=spec), images
