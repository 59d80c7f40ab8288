"""Gradient engine contract: autograd-backed gradients plus an independent
finite-difference validator.

The optimizable scalars form three groups with distinct learning rates:
curve (start-vertex pose, curvature field, raw length), render (per-view
sigma/iota/rho) and camera (the unfrozen entries of the 48-vector). A
ParameterSet owns the leaf tensors; ``gradient`` differentiates any scalar
loss closure over them in one reverse pass, and ``finite_difference_check``
re-evaluates the same closure with central differences, sharing no
differentiation machinery with the reverse pass.

Masks, previous-frame snapshots and blob support plans are constants to both
routes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import torch
from torch import Tensor

DTYPE = torch.float64

GROUPS = ("curve", "render", "camera")


class GradientError(RuntimeError):
    """Non-finite loss or gradient; names the offending stage/parameter."""


@dataclass
class ParameterSet:
    """Leaf tensors of one frame's optimization.

    Attributes:
        p0, t0, m10: start-vertex position and raw frame vectors (3,). The
            forward pass normalizes t0 and orthonormalizes m10 against it.
        curvature: (N, 2) dimensionless curvature rows.
        length_raw: () unconstrained length parameter; the forward pass maps
            it through l_min + (l_max - l_min) * sigmoid.
        sigma, iota, rho: (3,) per-view render scalars.
        camera: (48,) triplet vector.
        camera_frozen: (48,) bool; frozen entries never receive updates.
        start_index: integration anchor vertex (bookkeeping, not optimized).
    """

    p0: Tensor
    t0: Tensor
    m10: Tensor
    curvature: Tensor
    length_raw: Tensor
    sigma: Tensor
    iota: Tensor
    rho: Tensor
    camera: Tensor
    camera_frozen: Tensor
    start_index: int = 0

    def __post_init__(self) -> None:
        for name, _ in self.named_parameters():
            t = getattr(self, name)
            if t.dtype != DTYPE:
                setattr(self, name, t.to(DTYPE))
        self.camera_frozen = torch.as_tensor(self.camera_frozen, dtype=torch.bool)

    def named_parameters(self) -> Iterator[tuple[str, str]]:
        """(name, group) pairs in a fixed order."""
        yield from (
            ("p0", "curve"),
            ("t0", "curve"),
            ("m10", "curve"),
            ("curvature", "curve"),
            ("length_raw", "curve"),
            ("sigma", "render"),
            ("iota", "render"),
            ("rho", "render"),
            ("camera", "camera"),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name, _ in self.named_parameters()}

    def requires_grad_(self, flag: bool = True) -> "ParameterSet":
        for name, _ in self.named_parameters():
            getattr(self, name).requires_grad_(flag)
        return self

    def zero_grad(self) -> None:
        for name, _ in self.named_parameters():
            t = getattr(self, name)
            if t.grad is not None:
                t.grad = None

    def detach_clone(self, requires_grad: bool = False) -> "ParameterSet":
        kwargs = {
            name: getattr(self, name).detach().clone().requires_grad_(requires_grad)
            for name, _ in self.named_parameters()
        }
        return ParameterSet(
            camera_frozen=self.camera_frozen.clone(),
            start_index=self.start_index,
            **kwargs,
        )


@dataclass
class GradientReport:
    """Per-parameter gradients mirroring ParameterSet shapes.

    ``max_fd_rel_error`` is populated by the finite-difference validator.
    """

    grads: dict[str, Tensor]
    loss: float
    max_fd_rel_error: float | None = None


def gradient(loss_fn: Callable[[ParameterSet], Tensor], params: ParameterSet) -> GradientReport:
    """Reverse-mode gradient of the loss closure at the current point.

    Frozen camera entries report zero gradient. Every returned entry is
    finite, and shapes mirror the parameter shapes exactly.

    Raises:
        GradientError: the loss or any gradient entry is non-finite.
    """
    params.zero_grad()
    params.requires_grad_(True)
    loss = loss_fn(params)
    if loss.ndim != 0:
        raise ValueError("loss closure must return a scalar")
    if not torch.isfinite(loss):
        raise GradientError(f"loss evaluated non-finite: {float(loss)}")
    loss.backward()

    grads: dict[str, Tensor] = {}
    for name, _ in params.named_parameters():
        t = getattr(params, name)
        g = t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
        if name == "camera":
            g = torch.where(params.camera_frozen, torch.zeros_like(g), g)
        if not torch.isfinite(g).all():
            raise GradientError(f"non-finite gradient in parameter {name}")
        grads[name] = g
    return GradientReport(grads=grads, loss=float(loss))


_DEFAULT_STEPS = {"curve": 1e-4, "render": 1e-4, "camera": 1e-4}


@dataclass
class FDReport:
    """Central-difference comparison against the reverse-mode gradients."""

    per_group: dict[str, float]
    max_rel_error: float
    fd_grads: dict[str, Tensor] = field(repr=False, default_factory=dict)


def finite_difference_check(
    loss_fn: Callable[[ParameterSet], Tensor],
    params: ParameterSet,
    steps: dict[str, float] | float | None = None,
    subset: dict[str, list[int]] | None = None,
) -> FDReport:
    """Validate reverse-mode gradients with central finite differences.

    Args:
        loss_fn: scalar loss closure over a ParameterSet.
        steps: per-group absolute step sizes (or one scalar for all groups).
        subset: optional {parameter name: flat indices} restriction.

    Returns:
        FDReport with per-group and overall max relative error
        |g_ad - g_fd| / (|g_fd| + 1e-8).

    Raises:
        ValueError: a step size is zero or negative.
    """
    if steps is None:
        steps = dict(_DEFAULT_STEPS)
    if isinstance(steps, (int, float)):
        steps = {g: float(steps) for g in GROUPS}
    for g, s in steps.items():
        if s <= 0:
            raise ValueError(f"step for group {g} must be positive, got {s}")

    report = gradient(loss_fn, params)
    work = params.detach_clone(requires_grad=False)
    frozen = params.camera_frozen

    per_group = {g: 0.0 for g in GROUPS}
    fd_grads: dict[str, Tensor] = {}
    for name, group in params.named_parameters():
        tensor = getattr(work, name)
        flat = tensor.reshape(-1)
        n_elems = flat.numel()
        indices = subset.get(name, []) if subset is not None else range(n_elems)
        fd = torch.zeros(n_elems, dtype=DTYPE)
        h = steps[group]
        for i in indices:
            if name == "camera" and bool(frozen[i]):
                continue
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + h
                hi = float(loss_fn(work))
                flat[i] = orig - h
                lo = float(loss_fn(work))
                flat[i] = orig
            fd[i] = (hi - lo) / (2.0 * h)
            g_ad = float(report.grads[name].reshape(-1)[i])
            rel = abs(g_ad - float(fd[i])) / (abs(float(fd[i])) + 1e-8)
            per_group[group] = max(per_group[group], rel)
        fd_grads[name] = fd.reshape(tensor.shape)

    overall = max(per_group.values()) if per_group else 0.0
    return FDReport(per_group=per_group, max_rel_error=overall, fd_grads=fd_grads)
