"""End-to-end pipeline: ingest image triplets, reconstruct, evaluate.

Frame files follow ``frame_{t:06}_cam{c}.png`` (8- or 16-bit grayscale, any
size >= w). Each frame is centre-cropped to w x w around the previous frame's
projected curve centroid (frame 0: the image centre); cropping shifts each
camera's principal point accordingly for that frame. Intensities are
normalized to [0, 1] and inverted by default so the subject is bright.

Reconstruction writes one JSON-Lines record per frame plus a run summary with
the fully resolved configuration; optional overlay PNGs superimpose the raw
image (gray), the rendered blobs (red channel) and the midline polyline
(green).
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .camera import CameraModel, CameraTriplet, load_calibration, project_curve
from .config import RunConfig
from .optimizer import (
    FrameInputs,
    FrameSolution,
    ProgressEvent,
    process_sequence,
)
from .records import FrameRecord, read_records, write_records
from .renderer import RenderParams, render

DTYPE = torch.float64

_FRAME_RE = re.compile(r"^frame_(\d{6})_cam([012])\.png$")


class IngestError(RuntimeError):
    """Missing or malformed frame input."""


@dataclass
class FrameFiles:
    index: int
    paths: tuple[Path, Path, Path]


def scan_frames(frames_dir) -> list[FrameFiles]:
    """Discover complete frame triplets, ordered by frame index."""
    frames_dir = Path(frames_dir)
    found: dict[int, dict[int, Path]] = {}
    for path in frames_dir.iterdir():
        match = _FRAME_RE.match(path.name)
        if match:
            t, c = int(match.group(1)), int(match.group(2))
            found.setdefault(t, {})[c] = path
    out = []
    for t in sorted(found):
        cams = found[t]
        for c in range(3):
            if c not in cams:
                raise IngestError(f"frame {t}: missing image for camera {c}")
        out.append(FrameFiles(index=t, paths=(cams[0], cams[1], cams[2])))
    if not out:
        raise IngestError(f"no frames matching frame_NNNNNN_camC.png in {frames_dir}")
    return out


def load_grayscale(path) -> np.ndarray:
    """Normalized [0, 1] float64 image from an 8- or 16-bit grayscale PNG."""
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise IngestError(f"{path}: expected single-channel grayscale")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype in (np.uint16, np.int32):  # PIL mode I;16 loads as int32
        return arr.astype(np.float64) / 65535.0
    raise IngestError(f"{path}: unsupported bit depth {arr.dtype}")


def crop_window(image: np.ndarray, centre_uv, w: int) -> tuple[np.ndarray, tuple[int, int]]:
    """w x w crop about centre (u, v), clamped inside; returns (crop, (left, top))."""
    h_full, w_full = image.shape
    if w_full < w or h_full < w:
        raise IngestError(f"image {image.shape} smaller than working size {w}")
    left = int(round(centre_uv[0])) - w // 2
    top = int(round(centre_uv[1])) - w // 2
    left = min(max(left, 0), w_full - w)
    top = min(max(top, 0), h_full - w)
    return image[top : top + w, left : left + w], (left, top)


def shift_principal_points(triplet: CameraTriplet, offsets) -> CameraTriplet:
    """Camera triplet with per-view principal points moved into crop coords."""
    cams = []
    for cam, (left, top) in zip(triplet.cams, offsets):
        values = cam.as_array()
        values[2] -= left
        values[3] -= top
        cams.append(CameraModel.from_array(values))
    return CameraTriplet(
        cams=tuple(cams), shifts=triplet.shifts, frozen=triplet.frozen.copy()
    )


class FrameSource:
    """Stateful frame loader with centroid-tracked cropping."""

    def __init__(self, frames_dir, triplet: CameraTriplet, config: RunConfig):
        self.files = scan_frames(frames_dir)
        self.base_triplet = triplet
        self.config = config
        w = config.w
        # frame 0 crops about the image centre
        self.crop_centres = [None, None, None]
        self.last_offsets = [(0, 0), (0, 0), (0, 0)]

    def update_crop_centres(self, solution: FrameSolution) -> None:
        """Aim the next crop at the solution's projected centroid (full-image)."""
        q = project_curve(solution.triplet, solution.state.positions)
        centres = []
        for c in range(3):
            left, top = self.last_offsets[c]
            u = float(q[c, :, 0].mean()) + left
            v = float(q[c, :, 1].mean()) + top
            centres.append((u, v))
        self.crop_centres = centres

    def __iter__(self):
        w = self.config.w
        for entry in self.files:
            images = []
            offsets = []
            for c in range(3):
                full = load_grayscale(entry.paths[c])
                if self.config.invert:
                    full = 1.0 - full
                centre = self.crop_centres[c]
                if centre is None:
                    centre = (full.shape[1] / 2.0, full.shape[0] / 2.0)
                crop, off = crop_window(full, centre, w)
                images.append(crop)
                offsets.append(off)
            self.last_offsets = offsets
            triplet = shift_principal_points(self.base_triplet, offsets)
            yield FrameInputs(
                images=torch.as_tensor(np.stack(images), dtype=DTYPE),
                triplet=triplet,
                index=entry.index,
            ), offsets


def _draw_overlay(path, image: torch.Tensor, rendered: torch.Tensor, q_view: torch.Tensor):
    """RGB overlay: raw in gray, render in red, midline polyline in green."""
    w = image.shape[-1]
    gray = (image.clamp(0, 1).numpy() * 255).astype(np.uint8)
    red = (rendered.clamp(0, 1).numpy() * 255).astype(np.uint8)
    rgb = np.stack([np.maximum(gray, red), gray, gray], axis=-1)
    img = Image.fromarray(rgb, mode="RGB")
    draw = ImageDraw.Draw(img)
    pts = [(float(u), float(v)) for u, v in q_view.tolist()]
    draw.line(pts, fill=(0, 255, 0), width=1)
    img.save(path)


def reconstruct(
    config: RunConfig,
    frames_dir,
    calib_path,
    out_dir,
    overlays: bool = False,
    sink=None,
) -> dict:
    """Run the full reconstruction and write records + summary (+ overlays).

    Returns:
        The run summary dict (also written to ``out_dir/run_summary.json``).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    from .camera import default_frozen_mask

    triplet = load_calibration(
        calib_path, frozen=default_frozen_mask(config.unlock_cameras_first_frame)
    )
    settings = config.settings()
    source = FrameSource(frames_dir, triplet, config)
    rng = np.random.default_rng(config.seed)

    records: list[FrameRecord] = []
    t_start = time.perf_counter()

    def frame_iter():
        for frame, offsets in source:
            frame_iter.offsets = offsets
            yield frame

    frame_iter.offsets = [(0, 0)] * 3

    overlay_dir = out_dir / "overlays"
    if overlays:
        overlay_dir.mkdir(exist_ok=True)

    last_inputs: dict = {}

    def capture(frame):
        last_inputs["images"] = frame.images
        return frame

    solutions = process_sequence(
        (capture(f) for f in frame_iter()), triplet, settings, rng, sink=sink
    )
    for solution in solutions:
        offsets = [list(o) for o in frame_iter.offsets]
        records.append(
            FrameRecord.of_solution(
                solution, toggles=settings.toggles.letters(), crop_offsets=offsets
            )
        )
        source.update_crop_centres(solution)
        if overlays:
            q = project_curve(solution.triplet, solution.state.positions)
            rendered = render(q, solution.render_params, settings.limits).images
            for c in range(3):
                _draw_overlay(
                    overlay_dir / f"frame_{solution.frame_index:06d}_cam{c}.png",
                    last_inputs["images"][c],
                    rendered[c],
                    q[c],
                )

    records_path = out_dir / "records.jsonl"
    write_records(records, records_path)

    losses = [r.losses.get("total", float("nan")) for r in records]
    summary = {
        "config": config.as_dict(),
        "frames": len(records),
        "converged": sum(1 for r in records if r.converged),
        "loss_total_mean": float(np.mean(losses)) if losses else None,
        "loss_total_max": float(np.max(losses)) if losses else None,
        "wall_time_s": time.perf_counter() - t_start,
        "records": records_path.name,
    }
    (out_dir / "run_summary.json").write_text(json.dumps(summary, indent=2))
    return summary


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def bidirectional_2d(a: torch.Tensor, b: torch.Tensor) -> dict:
    """Mean/std of nearest-point pixel distances, both directions pooled."""
    d = torch.cdist(a, b)
    fwd = d.min(dim=1).values
    rev = d.min(dim=0).values
    both = torch.cat([fwd, rev])
    return {
        "mean": float(both.mean()),
        "std": float(both.std()),
        "forward": fwd,
        "reverse": rev,
    }


def nearest_rms_3d(a: torch.Tensor, b: torch.Tensor) -> float:
    """Symmetric nearest-vertex RMS distance between two polylines (mm)."""
    d = torch.cdist(a, b)
    fwd = d.min(dim=1).values
    rev = d.min(dim=0).values
    return float(torch.cat([fwd, rev]).pow(2).mean().sqrt())


def load_ground_truth(path) -> list[dict]:
    """Ground-truth JSONL written by the synthetic generator."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def evaluate(records, ground_truth, out_dir=None, bins: int = 16) -> dict:
    """Projected-distance statistics against ground truth.

    For every frame and view, the reconstructed midline is projected through
    the record's cameras and compared with the true curve projected through
    the true cameras: the report carries per-view mean/std of bidirectional
    nearest-point pixel distances, the 3D symmetric nearest-vertex RMS, and
    per-arclength-bin distance profiles (CSV when ``out_dir`` given).

    Raises:
        ValueError: empty record set.
    """
    if not isinstance(records, list):
        records = list(records)
    if not records:
        raise ValueError("no records to evaluate")
    if isinstance(ground_truth, (str, Path)):
        ground_truth = load_ground_truth(ground_truth)
    truth_by_frame = {int(g["frame"]): g for g in ground_truth}

    per_view_means = [[], [], []]
    rms3d_all = []
    profile_acc = [np.zeros(bins), np.zeros(bins), np.zeros(bins)]
    profile_sq = [np.zeros(bins), np.zeros(bins), np.zeros(bins)]
    profile_cnt = 0

    for record in records:
        truth = truth_by_frame.get(record.frame)
        if truth is None:
            continue
        rec_positions = record.positions_tensor()
        if record.camera is not None:
            # record carries the crop-frame cameras; undo the crop shift
            rec_vec = torch.as_tensor(record.camera, dtype=DTYPE)
            q_rec = _project_with_offsets(rec_vec, rec_positions, record.crop_offsets)
        else:
            # shifts-only mode: rebuild from the full-image calibration
            q_rec = project_curve_vec_full(
                _vector_from_record(truth, record), rec_positions
            )
        true_positions = torch.as_tensor(truth["positions"], dtype=DTYPE)
        q_true = project_curve_vec_full(
            torch.as_tensor(truth["camera_true"], dtype=DTYPE), true_positions
        )
        rms3d_all.append(nearest_rms_3d(rec_positions, true_positions))
        n = true_positions.shape[0]
        edges = np.linspace(0, n, bins + 1).astype(int)
        for c in range(3):
            stats = bidirectional_2d(q_rec[c], q_true[c])
            per_view_means[c].append(stats["mean"])
            fwd = stats["reverse"].numpy()  # distance from each true point
            for b in range(bins):
                seg = fwd[edges[b] : edges[b + 1]]
                profile_acc[c][b] += seg.mean()
                profile_sq[c][b] += (seg**2).mean()
        profile_cnt += 1

    if profile_cnt == 0:
        raise ValueError("records and ground truth share no frame indices")

    report = {
        "frames": profile_cnt,
        "mean_2d_px": [float(np.mean(m)) for m in per_view_means],
        "std_2d_px": [float(np.std(m)) for m in per_view_means],
        "rms_3d_mm": float(np.mean(rms3d_all)),
        "max_rms_3d_mm": float(np.max(rms3d_all)),
        "per_frame_rms_3d_mm": [float(v) for v in rms3d_all],
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = ["view,bin,mean_px,two_std_px"]
        for c in range(3):
            mean = profile_acc[c] / profile_cnt
            var = np.maximum(profile_sq[c] / profile_cnt - mean**2, 0.0)
            for b in range(bins):
                lines.append(f"{c},{b},{mean[b]:.6f},{2 * np.sqrt(var[b]):.6f}")
        (out_dir / "distance_profile.csv").write_text("\n".join(lines) + "\n")
        (out_dir / "evaluation.json").write_text(json.dumps(report, indent=2))
    return report


def project_curve_vec_full(vec: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    from .camera import project_curve_vector

    return project_curve_vector(vec, positions)


def _vector_from_record(truth: dict, record: FrameRecord) -> torch.Tensor:
    """Camera vector for a shifts-only record: calibration + solved shifts."""
    vec = torch.as_tensor(truth["camera_perturbed"], dtype=DTYPE).clone()
    vec[45] = record.shifts["dx"]
    vec[46] = record.shifts["dy"]
    vec[47] = record.shifts["dz"]
    return vec


def _project_with_offsets(vec, positions, offsets) -> torch.Tensor:
    """Project into full-image coordinates (undo the per-frame crop)."""
    q = project_curve_vec_full(vec, positions)
    off = torch.as_tensor(offsets, dtype=DTYPE)  # (3, 2) left, top
    return q + off[:, None, :]
