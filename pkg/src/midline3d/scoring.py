"""Per-vertex multi-view agreement scores, tapering, and input masking.

A vertex is scored by correlating its blob with the image in each view and
taking the minimum over views, so failing to hit foreground pixels in any one
view drags the score down regardless of the others:

    S_n = min_c ( sum_ij B_cn * I_c ) / (sigma_bar_cn * iota_bar_cn)

The raw profile is tapered by a running minimum outward from the middle
vertex (restricting attention to one contiguous pixel mass) and normalized to
peak 1. Masks built from the normalized profile dim image regions away from
the current detection to MASK_FLOOR of their intensity; they are constants to
the gradient engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .renderer import BlobField

DTYPE = torch.float64

# Outside-mask attenuation; fixed so some gradient still flows from outside
# the detection region.
MASK_FLOOR = 0.2


@dataclass
class ScoreProfile:
    """Raw, middle-out tapered, and peak-normalized per-vertex scores."""

    raw: Tensor
    tapered: Tensor
    normalized: Tensor

    def detach_clone(self) -> "ScoreProfile":
        return ScoreProfile(
            self.raw.detach().clone(),
            self.tapered.detach().clone(),
            self.normalized.detach().clone(),
        )


@dataclass
class MaskSet:
    """Per-view masks with values in {MASK_FLOOR, 1}; gradient constants."""

    values: Tensor
    threshold: float


def raw_scores(field: BlobField, images: Tensor) -> Tensor:
    """Min-over-views normalized blob/image correlation per vertex.

    Args:
        field: blob evaluations for the current projection.
        images: (3, w, w) images in [0, 1].

    Returns:
        (N,) raw scores S.
    """
    weighted = field.weighted_vertex_sums(images)  # (3, N)
    per_view = weighted / (field.sigma_bar * field.iota_bar)
    return per_view.min(dim=0).values


def taper_and_normalize(scores: Tensor) -> tuple[Tensor, Tensor]:
    """Middle-out running-minimum taper and peak normalization.

    S'_mid = S_mid; outward, S'_n = min(S_n, S' of the neighbour toward the
    middle). The result is non-increasing away from the middle index, so the
    profile keeps a single peak. S_hat = S'/max(S'), identically zero when
    the tapered profile vanishes.

    Returns:
        (tapered, normalized), each (N,).
    """
    n = scores.shape[0]
    mid = n // 2
    left = torch.cummin(scores[: mid + 1].flip(0), dim=0).values.flip(0)
    right = torch.cummin(scores[mid:], dim=0).values
    tapered = torch.cat([left, right[1:]])
    peak = tapered.max()
    if float(peak.detach()) <= 0.0:
        return tapered, torch.zeros_like(tapered)
    return tapered, tapered / peak


def score_profile(field: BlobField, images: Tensor) -> ScoreProfile:
    """Convenience wrapper bundling raw, tapered and normalized scores."""
    raw = raw_scores(field, images)
    tapered, normalized = taper_and_normalize(raw)
    return ScoreProfile(raw=raw, tapered=tapered, normalized=normalized)


def build_masks(field: BlobField, s_hat: Tensor, threshold: float = 0.1) -> MaskSet:
    """Score-weighted masks selecting the current detection region.

    Blobs are normalized by their support sums, weighted by the relative
    scores and max-composed into M'. Each view's M' is rescaled by its peak
    before thresholding so the threshold acts on relative field height; a
    view with a vanishing field (all scores zero) is left unmasked.

    The result carries no gradient history.
    """
    with torch.no_grad():
        field_max = field.score_weighted_max(s_hat)  # (3, w, w)
        masks = torch.full_like(field_max, MASK_FLOOR)
        for c in range(3):
            peak = float(field_max[c].max())
            if peak <= 0.0:
                masks[c] = 1.0
                continue
            masks[c] = torch.where(
                field_max[c] / peak >= threshold,
                torch.ones_like(field_max[c]),
                torch.full_like(field_max[c], MASK_FLOOR),
            )
        if threshold <= 0.0:
            masks = torch.ones_like(field_max)
    return MaskSet(values=masks, threshold=threshold)


def apply_masks(masks: MaskSet, images: Tensor) -> Tensor:
    """Masked optimization targets I* = M * I (element-wise)."""
    if masks.values.shape != images.shape:
        raise ValueError(
            f"mask shape {tuple(masks.values.shape)} != image shape {tuple(images.shape)}"
        )
    return masks.values * images
