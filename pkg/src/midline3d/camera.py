"""Pinhole camera triplet with distortion and shared relative shifts.

Each of the three views is a 15-parameter pinhole model (intrinsics,
ZYX-Euler extrinsics, radial k1..k3 and tangential p1/p2 distortion). A
shared 3-vector of relative shifts (dx, dy, dz) injects one pixel-translation
component per view after the perspective divide, emulating small relative
camera motion without unlocking the full extrinsics:

    view 0: (s_x, s_y) = (dx, 0)
    view 1: (s_x, s_y) = (0, -dy)
    view 2: (s_x, s_y) = (0, dz)

The 48 scalars (3 x 15 + 3) flatten into a single parameter vector in a fixed
order; a boolean frozen mask selects which of them the optimizer may touch.
By default everything is frozen except the shifts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

DTYPE = torch.float64

CAMERA_PARAM_NAMES = (
    "fx", "fy", "cx", "cy",
    "phi0", "phi1", "phi2",
    "tx", "ty", "tz",
    "k1", "k2", "k3",
    "p1", "p2",
)
SHIFT_PARAM_NAMES = ("dx", "dy", "dz")
N_TRIPLET_PARAMS = 3 * len(CAMERA_PARAM_NAMES) + len(SHIFT_PARAM_NAMES)

# Depths closer to the image plane than this are treated as singular.
_Z_EPS = 1e-12


class ProjectionError(RuntimeError):
    """Projection failed (singular or negative depth).

    Attributes:
        camera_index: offending view, or None for single-point projection.
        vertex_index: offending vertex, or None.
    """

    def __init__(self, message: str, camera_index=None, vertex_index=None):
        super().__init__(message)
        self.camera_index = camera_index
        self.vertex_index = vertex_index


@dataclass
class CameraModel:
    """One pinhole camera (Table of 15 scalars; angles in [0, 2*pi))."""

    fx: float
    fy: float
    cx: float
    cy: float
    phi0: float
    phi1: float
    phi2: float
    tx: float
    ty: float
    tz: float
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        vals = [getattr(self, name) for name in CAMERA_PARAM_NAMES]
        if not np.all(np.isfinite(vals)):
            raise ValueError("camera parameters must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in CAMERA_PARAM_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "CameraModel":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (len(CAMERA_PARAM_NAMES),):
            raise ValueError(f"expected {len(CAMERA_PARAM_NAMES)} scalars")
        return cls(**dict(zip(CAMERA_PARAM_NAMES, arr.tolist())))


@dataclass
class TripletShifts:
    """Shared relative pixel shifts; one component is consumed per view."""

    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz], dtype=np.float64)


def default_frozen_mask(unlock_all: bool = False) -> np.ndarray:
    """Frozen flags for the 48 scalars; default leaves only shifts optimizable."""
    mask = np.ones(N_TRIPLET_PARAMS, dtype=bool)
    if unlock_all:
        mask[:] = False
    else:
        mask[-3:] = False
    return mask


@dataclass
class CameraTriplet:
    """Three pinhole models plus the shared shift vector and frozen flags."""

    cams: tuple[CameraModel, CameraModel, CameraModel]
    shifts: TripletShifts
    frozen: np.ndarray = None  # (48,) bool; None -> shifts-only optimizable

    def __post_init__(self) -> None:
        if len(self.cams) != 3:
            raise ValueError("a triplet requires exactly 3 cameras")
        if self.frozen is None:
            self.frozen = default_frozen_mask()
        self.frozen = np.asarray(self.frozen, dtype=bool)
        if self.frozen.shape != (N_TRIPLET_PARAMS,):
            raise ValueError(f"frozen mask must have {N_TRIPLET_PARAMS} entries")
        w_guard = max(abs(self.shifts.dx), abs(self.shifts.dy), abs(self.shifts.dz))
        if not np.isfinite(w_guard):
            raise ValueError("shifts must be finite")

    def to_vector(self) -> Tensor:
        """Flatten to the 48-vector: cam0 | cam1 | cam2 | (dx, dy, dz)."""
        parts = [c.as_array() for c in self.cams] + [self.shifts.as_array()]
        return torch.as_tensor(np.concatenate(parts), dtype=DTYPE)

    @classmethod
    def from_vector(cls, vec, frozen=None) -> "CameraTriplet":
        arr = np.asarray(
            vec.detach().numpy() if isinstance(vec, Tensor) else vec, dtype=np.float64
        )
        if arr.shape != (N_TRIPLET_PARAMS,):
            raise ValueError(f"expected {N_TRIPLET_PARAMS} scalars")
        cams = tuple(CameraModel.from_array(arr[i * 15 : (i + 1) * 15]) for i in range(3))
        shifts = TripletShifts(*arr[45:48].tolist())
        return cls(cams=cams, shifts=shifts, frozen=frozen)


def shifts_for_camera(shifts, camera_index: int):
    """Per-view (s_x, s_y) from the shared shift vector.

    Accepts a TripletShifts or a length-3 tensor (differentiable path).
    """
    if camera_index not in (0, 1, 2):
        raise ValueError(f"camera index must be 0, 1 or 2, got {camera_index}")
    if isinstance(shifts, TripletShifts):
        dx, dy, dz = shifts.dx, shifts.dy, shifts.dz
        zero = 0.0
    else:
        dx, dy, dz = shifts[0], shifts[1], shifts[2]
        zero = torch.zeros((), dtype=shifts.dtype)
    if camera_index == 0:
        return dx, zero
    if camera_index == 1:
        return zero, -dy
    return zero, dz


def rotation_matrix(phi0, phi1, phi2) -> Tensor:
    """R = R_z(phi0) @ R_y(phi1) @ R_x(phi2), differentiable in the angles."""
    phi0 = torch.as_tensor(phi0, dtype=DTYPE)
    phi1 = torch.as_tensor(phi1, dtype=DTYPE)
    phi2 = torch.as_tensor(phi2, dtype=DTYPE)
    c0, s0 = torch.cos(phi0), torch.sin(phi0)
    c1, s1 = torch.cos(phi1), torch.sin(phi1)
    c2, s2 = torch.cos(phi2), torch.sin(phi2)
    one = torch.ones_like(c0)
    zero = torch.zeros_like(c0)
    rz = torch.stack([c0, -s0, zero, s0, c0, zero, zero, zero, one]).reshape(3, 3)
    ry = torch.stack([c1, zero, s1, zero, one, zero, -s1, zero, c1]).reshape(3, 3)
    rx = torch.stack([one, zero, zero, zero, c2, -s2, zero, s2, c2]).reshape(3, 3)
    return rz @ ry @ rx


def _project_view(
    params: Tensor, s_x, s_y, points: Tensor, camera_index=None
) -> Tensor:
    """Project (N, 3) world points through one view's 15 parameters."""
    fx, fy, cx, cy = params[0], params[1], params[2], params[3]
    rot = rotation_matrix(params[4], params[5], params[6])
    t = params[7:10]
    k1, k2, k3, p1, p2 = params[10], params[11], params[12], params[13], params[14]

    cam_pts = points @ rot.T + t
    z = cam_pts[:, 2]
    with torch.no_grad():
        bad = torch.nonzero(z.detach() < _Z_EPS)
        if bad.numel() > 0:
            vtx = int(bad[0, 0])
            zval = float(z.detach()[vtx])
            kind = "singular depth" if abs(zval) < _Z_EPS else "negative depth"
            raise ProjectionError(
                f"{kind} z={zval:.3e} at camera {camera_index}, vertex {vtx}",
                camera_index=camera_index,
                vertex_index=vtx,
            )

    xp = cam_pts[:, 0] / z + s_x / fx
    yp = cam_pts[:, 1] / z + s_y / fy
    r2 = xp * xp + yp * yp
    k = 1.0 + k1 * r2 + k2 * r2 * r2 + k3 * r2 * r2 * r2
    xpp = k * xp + 2.0 * p1 * xp * yp + p2 * (r2 + 2.0 * xp * xp)
    ypp = k * yp + p1 * (r2 + 2.0 * yp * yp) + 2.0 * p2 * xp * yp
    return torch.stack([fx * xpp + cx, fy * ypp + cy], dim=-1)


def project_curve_vector(vec: Tensor, points: Tensor) -> Tensor:
    """Differentiable projection of (N, 3) points through the 48-vector.

    Returns:
        (3, N, 2) pixel coordinates, first component u (column), second v (row).
    """
    points = torch.as_tensor(points, dtype=DTYPE)
    views = []
    for c in range(3):
        s_x, s_y = shifts_for_camera(vec[45:48], c)
        views.append(_project_view(vec[c * 15 : (c + 1) * 15], s_x, s_y, points, c))
    return torch.stack(views, dim=0)


def project_point(cam: CameraModel, shift_xy, point) -> tuple[float, float]:
    """Project a single 3D point through one camera with explicit shifts."""
    params = torch.as_tensor(cam.as_array(), dtype=DTYPE)
    pts = torch.as_tensor(point, dtype=DTYPE).reshape(1, 3)
    s_x = torch.as_tensor(float(shift_xy[0]), dtype=DTYPE)
    s_y = torch.as_tensor(float(shift_xy[1]), dtype=DTYPE)
    uv = _project_view(params, s_x, s_y, pts)
    return float(uv[0, 0]), float(uv[0, 1])


def project_curve(triplet: CameraTriplet, points) -> Tensor:
    """Project (N, 3) vertex positions through all three views.

    Raises:
        ProjectionError: singular/negative depth, tagged with (camera, vertex).
    """
    return project_curve_vector(triplet.to_vector(), torch.as_tensor(points, dtype=DTYPE))


# ---------------------------------------------------------------------------
# Calibration file I/O
# ---------------------------------------------------------------------------


def save_calibration(triplet: CameraTriplet, path) -> None:
    """Write a calibration document: per-camera 15 scalars plus (dx, dy, dz)."""
    doc = {
        "cameras": [asdict(c) for c in triplet.cams],
        "dx": triplet.shifts.dx,
        "dy": triplet.shifts.dy,
        "dz": triplet.shifts.dz,
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_calibration(path, frozen=None) -> CameraTriplet:
    """Read a calibration document written by :func:`save_calibration`."""
    doc = json.loads(Path(path).read_text())
    if "cameras" not in doc or len(doc["cameras"]) != 3:
        raise ValueError(f"calibration file {path} must list exactly 3 cameras")
    cams = []
    for entry in doc["cameras"]:
        missing = [n for n in CAMERA_PARAM_NAMES if n not in entry]
        if missing:
            raise ValueError(f"calibration entry missing fields: {missing}")
        cams.append(CameraModel(**{n: float(entry[n]) for n in CAMERA_PARAM_NAMES}))
    shifts = TripletShifts(
        dx=float(doc.get("dx", 0.0)), dy=float(doc.get("dy", 0.0)), dz=float(doc.get("dz", 0.0))
    )
    return CameraTriplet(cams=tuple(cams), shifts=shifts, frozen=frozen)
