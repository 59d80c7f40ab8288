"""Frame records: lossless JSON-Lines serialization of per-frame solutions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import torch

from .optimizer import FrameSolution

DTYPE = torch.float64


@dataclass
class FrameRecord:
    """Everything needed to reproduce / evaluate one frame's solution.

    Floats round-trip exactly through JSON (repr-based float encoding).
    """

    frame: int
    curvature: list        # N x 2
    length: float
    positions: list        # N x 3, mm
    shifts: dict           # dx, dy, dz
    camera: list | None    # full 48-vector, present when any non-shift is unfrozen
    sigma: list
    iota: list
    rho: list
    losses: dict
    s_hat: list
    converged: bool
    steps: int
    toggles: str = ""
    crop_offsets: list = field(default_factory=lambda: [[0, 0], [0, 0], [0, 0]])

    def to_json(self) -> str:
        return json.dumps(
            {
                "frame": self.frame,
                "curvature": self.curvature,
                "length": self.length,
                "positions": self.positions,
                "shifts": self.shifts,
                "camera": self.camera,
                "sigma": self.sigma,
                "iota": self.iota,
                "rho": self.rho,
                "losses": self.losses,
                "s_hat": self.s_hat,
                "converged": self.converged,
                "steps": self.steps,
                "toggles": self.toggles,
                "crop_offsets": self.crop_offsets,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "FrameRecord":
        doc = json.loads(line)
        return cls(**doc)

    @classmethod
    def of_solution(
        cls,
        solution: FrameSolution,
        toggles: str = "",
        crop_offsets=None,
    ) -> "FrameRecord":
        vec = solution.params.camera.detach()
        unfrozen_nonshift = bool((~solution.params.camera_frozen[:45]).any())
        shifts = solution.triplet.shifts
        return cls(
            frame=solution.frame_index,
            curvature=solution.state.curvature.tolist(),
            length=float(solution.state.length),
            positions=solution.state.positions.tolist(),
            shifts={"dx": shifts.dx, "dy": shifts.dy, "dz": shifts.dz},
            camera=vec.tolist() if unfrozen_nonshift else None,
            sigma=solution.render_params.sigma.tolist(),
            iota=solution.render_params.iota.tolist(),
            rho=solution.render_params.rho.tolist(),
            losses=dict(solution.losses),
            s_hat=solution.profile.normalized.tolist(),
            converged=bool(solution.converged),
            steps=int(solution.steps_used),
            toggles=toggles,
            crop_offsets=crop_offsets if crop_offsets is not None else [[0, 0]] * 3,
        )

    def positions_tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.positions, dtype=DTYPE)


def write_records(records: Iterable[FrameRecord], path) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(record.to_json() + "\n")


def read_records(path) -> Iterator[FrameRecord]:
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield FrameRecord.from_json(line)
