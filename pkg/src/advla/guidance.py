"""Attention guidance artifacts: pixel weight map, Top-K patch/pixel/feature masks.

All artifacts are plain numpy arrays computed from per-patch attention
scores. They enter the attack as constants; nothing here is differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KEYS_A = -0.5


def scores_to_grid(scores) -> np.ndarray:
    """Row-major reshape of N scores into a square g x g grid."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    g = math.isqrt(scores.size)
    if g * g != scores.size:
        raise ValueError(f"{scores.size} scores do not form a square grid")
    return scores.reshape(g, g)


def keys_kernel(t, a: float = KEYS_A):
    """Keys cubic convolution kernel."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres; out-of-range taps clamp to the edge sample
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        base = math.floor(src)
        for tap in range(base - 1, base + 3):
            m[i, min(max(tap, 0), n_in - 1)] += keys_kernel(src - tap)
    return m


def bicubic_resize(grid, height: int, width: int) -> np.ndarray:
    """Upsample a g x g grid to height x width; negative results clamp to 0."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or min(grid.shape) < 2:
        raise ValueError(f"grid must be 2-D with both sides >= 2, got {grid.shape}")
    if height < grid.shape[0] or width < grid.shape[1]:
        raise ValueError(f"target {height}x{width} is smaller than grid {grid.shape}")
    out = _bicubic_matrix(grid.shape[0], height) @ grid @ _bicubic_matrix(grid.shape[1], width).T
    return np.maximum(out, 0.0)


@dataclass(frozen=True)
class PatchMask:
    bits: np.ndarray  # bool [N]

    @property
    def k_count(self) -> int:
        return int(self.bits.sum())

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)


def topk_count(ratio: float, n: int) -> int:
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"topk ratio must be in (0, 1], got {ratio}")
    # guard against ratio*n landing a hair above an integer, e.g. 0.1*... products
    return min(n, max(1, math.ceil(round(ratio * n, 9))))


def topk_mask(scores, ratio: float) -> PatchMask:
    """Select the ceil(ratio*N) highest scores; ties go to the smaller index."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    k = topk_count(ratio, scores.size)
    order = np.lexsort((np.arange(scores.size), -scores))
    bits = np.zeros(scores.size, dtype=bool)
    bits[order[:k]] = True
    return PatchMask(bits)


def mask_to_pixels(mask: PatchMask, grid_h: int, grid_w: int, patch_size: int) -> np.ndarray:
    """Nearest-neighbour block fill: [grid_h*P, grid_w*P] array of 0/1."""
    if mask.bits.size != grid_h * grid_w:
        raise ValueError(f"mask has {mask.bits.size} patches, grid is {grid_h}x{grid_w}")
    block = np.ones((patch_size, patch_size))
    return np.kron(mask.bits.reshape(grid_h, grid_w).astype(np.float64), block)


def flatten_mask(mask: PatchMask) -> np.ndarray:
    """Per-patch 0/1 column [N, 1] that broadcasts over feature channels."""
    return mask.bits.astype(np.float64).reshape(-1, 1)


@dataclass
class GuidanceArtifacts:
    """Everything a guided attack needs for one frame.

    Only the entries relevant to a strategy have to be present.
    """

    scores: np.ndarray | None = None
    weight_map: np.ndarray | None = None   # [H, W]
    patch_mask: PatchMask | None = None
    pixel_mask: np.ndarray | None = None   # [H, W]
    feature_mask: np.ndarray | None = None  # [N, 1]


def build_artifacts(scores, ratio: float, grid_h: int, grid_w: int, patch_size: int,
                    with_weight_map: bool = True) -> GuidanceArtifacts:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    mask = topk_mask(scores, ratio)
    weight_map = None
    if with_weight_map:
        if grid_h != grid_w:
            raise ValueError("attention weight maps need a square patch grid")
        weight_map = bicubic_resize(scores_to_grid(scores), grid_h * patch_size, grid_w * patch_size)
    return GuidanceArtifacts(
        scores=scores,
        weight_map=weight_map,
        patch_mask=mask,
        pixel_mask=mask_to_pixels(mask, grid_h, grid_w, patch_size),
        feature_mask=flatten_mask(mask),
    )
