"""Shared geometric, tensorial and configuration types.

Conventions fixed here and relied on everywhere else:
  * the BEV raster's row axis maps to world y, the column axis to world x;
  * cell (r, c) covers a rectangle whose center is its representative
    world point, so integer cell coordinates name cell centers;
  * yaw angles are normalized to the half-open interval [-pi, pi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import DiffValue, coerce


def normalize_yaw(theta: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    if not math.isfinite(theta):
        raise ValueError(f"yaw must be finite, got {theta}")
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped < 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class BevGrid:
    """A bird's-eye-view raster over a rectangular world region."""

    height_cells: int
    width_cells: int
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if self.height_cells < 1 or self.width_cells < 1:
            raise ValueError("grid must have at least one cell per axis")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("grid extents must be strictly positive")

    @property
    def cell_size_x(self) -> float:
        return (self.x_max - self.x_min) / self.width_cells

    @property
    def cell_size_y(self) -> float:
        return (self.y_max - self.y_min) / self.height_cells

    @property
    def extent(self) -> float:
        """Largest world extent; the shared box-normalization scale."""
        return max(self.x_max - self.x_min, self.y_max - self.y_min)

    def world_to_cell(self, x: float, y: float) -> tuple[float, float]:
        """World point -> fractional (row, col); out-of-bounds allowed."""
        col = (x - self.x_min) / self.cell_size_x - 0.5
        row = (y - self.y_min) / self.cell_size_y - 0.5
        return row, col

    def cell_to_world(self, row: float, col: float) -> tuple[float, float]:
        x = self.x_min + (col + 0.5) * self.cell_size_x
        y = self.y_min + (row + 0.5) * self.cell_size_y
        return x, y

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(rows, cols) fractional-coordinate meshes of all cell centers."""
        rows = np.arange(self.height_cells, dtype=np.float64)
        cols = np.arange(self.width_cells, dtype=np.float64)
        return np.meshgrid(rows, cols, indexing="ij")


def world_to_cell(grid: BevGrid, x: float, y: float) -> tuple[float, float]:
    return grid.world_to_cell(x, y)


def cell_to_world(grid: BevGrid, row: float, col: float) -> tuple[float, float]:
    return grid.cell_to_world(row, col)


class FeatureMap:
    """A per-cell feature volume on a grid; values may carry gradients."""

    __slots__ = ("grid", "channels", "values")

    def __init__(self, grid: BevGrid, values):
        self.grid = grid
        self.values = coerce(values)
        if self.values.value.ndim != 3:
            raise ValueError("feature map values must be (H, W, C)")
        h, w, c = self.values.value.shape
        if (h, w) != (grid.height_cells, grid.width_cells):
            raise ValueError(f"values shape {(h, w)} does not match grid "
                             f"{(grid.height_cells, grid.width_cells)}")
        if c < 1:
            raise ValueError("feature map needs at least one channel")
        if not np.all(np.isfinite(self.values.value)):
            raise ValueError("feature map values must be finite")
        self.channels = c

    @property
    def shape(self):
        return self.values.value.shape


@dataclass(frozen=True)
class BevBox:
    """A 3D box in BEV-centric parametrization; yaw is normalized on build."""

    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    yaw: float
    vx: float = 0.0
    vy: float = 0.0
    class_id: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ValueError("box sizes must be strictly positive")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    def footprint_corners(self) -> np.ndarray:
        """The 4 BEV corners (counter-clockwise), shape (4, 2)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        half = np.array([[-self.l, -self.w], [self.l, -self.w],
                         [self.l, self.w], [-self.l, self.w]]) * 0.5
        rot = np.array([[c, -s], [s, c]])
        return half @ rot.T + np.array([self.x, self.y])

    def footprint_area(self) -> float:
        return self.w * self.l


class ClassDistribution:
    """A probability vector over classes."""

    __slots__ = ("probs",)

    def __init__(self, probs):
        arr = np.asarray(probs, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("class distribution must be a 1-D vector")
        if np.any(arr < -1e-12) or np.any(arr > 1.0 + 1e-12):
            raise ValueError("class probabilities must lie in [0, 1]")
        if abs(float(arr.sum()) - 1.0) > 1e-6:
            raise ValueError(f"class probabilities must sum to 1, got {arr.sum()}")
        self.probs = np.clip(arr, 0.0, 1.0)

    def __len__(self):
        return self.probs.size

    def argmax(self) -> int:
        return int(np.argmax(self.probs))


class PredictionSet:
    """N query outputs from one decoder stage.

    `diff`, when present, holds the differentiable tensors the numeric
    fields were materialized from (used by the training losses); consumers
    that only read values can ignore it.
    """

    __slots__ = ("boxes", "class_dists", "embeddings", "reference_points",
                 "stage_index", "diff")

    def __init__(self, boxes, class_dists, embeddings, reference_points,
                 stage_index: int = 0, diff=None):
        self.boxes = list(boxes)
        self.class_dists = list(class_dists)
        self.embeddings = [np.asarray(e, dtype=np.float64) for e in embeddings]
        self.reference_points = [(float(p[0]), float(p[1])) for p in reference_points]
        self.stage_index = int(stage_index)
        self.diff = diff
        n = len(self.boxes)
        if not (len(self.class_dists) == len(self.embeddings)
                == len(self.reference_points) == n):
            raise ValueError("prediction set fields must share one length")
        if n and len({e.shape for e in self.embeddings}) != 1:
            raise ValueError("embeddings must share one dimension")

    def __len__(self):
        return len(self.boxes)


@dataclass(frozen=True)
class DistillConfig:
    """Knobs for every distillation loss; defaults are the reference values."""

    sigma: float = 2.0
    gamma: float = 0.5
    alpha: float = 1.0
    beta: float = 0.25
    tau: float = 0.07
    lambda_feat: float = 1.0
    include_positive_in_denominator: bool = True
    use_contrastive_cls: bool = True

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.alpha < 0 or self.beta < 0 or self.lambda_feat < 0:
            raise ValueError("loss weights must be >= 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")


def config_field_defaults(cls=DistillConfig) -> dict:
    return {f.name: f.default for f in fields(cls)}
