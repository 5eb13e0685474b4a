"""Foreground-guided dense feature imitation between BEV feature maps.

The foreground mask is built from one Gaussian bump per ground-truth center,
evaluated in cell units and merged by pointwise maximum. The masked loss
normalizes by the mask's total weight (plus a small epsilon), so an all-ones
mask reduces it exactly to the plain per-cell imitation loss.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue
from .core_types import BevBox, BevGrid, FeatureMap, PredictionSet

MASK_NORM_EPS = 1e-6


class MaskStrategy(enum.Enum):
    GT_HEATMAP = "gt_heatmap"
    GT_CENTER = "gt_center"
    QUERY_CENTER = "query_center"
    PRED_HEATMAP = "pred_heatmap"


class ForegroundMask:
    """Per-cell weights in [0, 1] on a grid."""

    __slots__ = ("grid", "weights")

    def __init__(self, grid: BevGrid, weights):
        arr = np.asarray(weights, dtype=np.float64)
        if arr.shape != (grid.height_cells, grid.width_cells):
            raise ValueError("mask shape must match the grid")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise ValueError("mask weights must lie in [0, 1]")
        self.grid = grid
        self.weights = arr

    def total(self) -> float:
        return float(self.weights.sum())


def gaussian_center_weight(center: tuple[float, float], grid: BevGrid,
                           sigma: float) -> ForegroundMask:
    """exp(-d^2 / (2 sigma^2)) per cell, distance measured in cell units."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    row_c, col_c = grid.world_to_cell(*center)
    rows, cols = grid.cell_centers()
    d2 = (rows - row_c) ** 2 + (cols - col_c) ** 2
    return ForegroundMask(grid, np.exp(-d2 / (2.0 * sigma * sigma)))


def merge_masks(masks: Sequence[ForegroundMask], *,
                grid: BevGrid | None = None) -> ForegroundMask:
    """Pointwise maximum; an empty list needs `grid` and yields all zeros."""
    masks = list(masks)
    if not masks:
        if grid is None:
            raise ValueError("merging an empty mask list requires a grid")
        return ForegroundMask(grid, np.zeros((grid.height_cells, grid.width_cells)))
    base = masks[0].grid
    for m in masks[1:]:
        if m.grid != base:
            raise ValueError("cannot merge masks on different grids")
    merged = masks[0].weights
    for m in masks[1:]:
        merged = np.maximum(merged, m.weights)
    return ForegroundMask(base, merged)


def _check_same_shape(f_student: FeatureMap, f_teacher: FeatureMap) -> None:
    if f_student.shape != f_teacher.shape or f_student.grid != f_teacher.grid:
        raise ValueError("student and teacher feature maps must share grid and shape")


def _per_cell_diff_norm(f_student: FeatureMap, f_teacher: FeatureMap) -> DiffValue:
    # the teacher map is a constant here: gradients reach the student only
    diff = f_student.values - ad.stop_gradient(f_teacher.values)
    return ad.l2norm(diff, axis=2)


def fitnet_feature_loss(f_student: FeatureMap, f_teacher: FeatureMap) -> DiffValue:
    """Mean over cells of the L2 norm of the channel difference."""
    _check_same_shape(f_student, f_teacher)
    return ad.vmean(_per_cell_diff_norm(f_student, f_teacher))


def masked_feature_loss(f_student: FeatureMap, f_teacher: FeatureMap,
                        mask: ForegroundMask) -> DiffValue:
    """Foreground-weighted imitation, normalized by the mask's total weight."""
    _check_same_shape(f_student, f_teacher)
    if mask.grid != f_student.grid:
        raise ValueError("mask must live on the feature maps' grid")
    norms = _per_cell_diff_norm(f_student, f_teacher)
    weighted = ad.vsum(norms * ad.constant(mask.weights))
    return weighted * (1.0 / max(mask.total(), MASK_NORM_EPS))


def _nearest_cell_mask(centers: Sequence[tuple[float, float]],
                       grid: BevGrid) -> ForegroundMask:
    weights = np.zeros((grid.height_cells, grid.width_cells))
    for x, y in centers:
        r, c = grid.world_to_cell(x, y)
        ri = int(np.clip(round(r), 0, grid.height_cells - 1))
        ci = int(np.clip(round(c), 0, grid.width_cells - 1))
        weights[ri, ci] = 1.0
    return ForegroundMask(grid, weights)


def build_foreground_mask(gt_boxes: Sequence[BevBox], grid: BevGrid, config,
                          strategy: MaskStrategy = MaskStrategy.GT_HEATMAP,
                          aux=None,
                          sigma_per_box: Sequence[float] | None = None) -> ForegroundMask:
    """Build the dense-distillation mask for one scene.

    `aux` carries the strategy-specific extra input: a PredictionSet with
    reference points for QUERY_CENTER, a per-class teacher score FeatureMap
    for PRED_HEATMAP. `sigma_per_box` overrides the configured constant
    sigma per ground-truth box.
    """
    if strategy is MaskStrategy.GT_HEATMAP:
        if sigma_per_box is not None and len(sigma_per_box) != len(gt_boxes):
            raise ValueError("sigma_per_box must align with gt_boxes")
        masks = []
        for i, box in enumerate(gt_boxes):
            sigma = config.sigma if sigma_per_box is None else sigma_per_box[i]
            masks.append(gaussian_center_weight((box.x, box.y), grid, sigma))
        return merge_masks(masks, grid=grid)
    if strategy is MaskStrategy.GT_CENTER:
        return _nearest_cell_mask([(b.x, b.y) for b in gt_boxes], grid)
    if strategy is MaskStrategy.QUERY_CENTER:
        if isinstance(aux, PredictionSet):
            points = aux.reference_points
        elif aux is not None:
            points = [(float(p[0]), float(p[1])) for p in aux]
        else:
            raise ValueError("QUERY_CENTER needs reference points "
                             "(a PredictionSet or a point list)")
        return _nearest_cell_mask(points, grid)
    if strategy is MaskStrategy.PRED_HEATMAP:
        if aux is None or not isinstance(aux, FeatureMap):
            raise ValueError("PRED_HEATMAP needs a teacher classification heatmap")
        if aux.grid != grid:
            raise ValueError("heatmap grid mismatch")
        scores = aux.values.value.max(axis=2)
        return ForegroundMask(grid, np.clip(scores, 0.0, 1.0))
    raise ValueError(f"unknown mask strategy: {strategy}")
