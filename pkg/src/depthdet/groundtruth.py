"""Ground-truth generation: obstacle boxes from (depth, seg) and grid targets.

Obstacles are 4-connected components of segmented pixels within the obstacle
range. Each component yields a tight bounding box plus the mean and
population variance of its depth values; components smaller than
``min_pixels`` are dropped.

Detector targets live on a cells_y x cells_x grid with 7 channels per cell:
(x, y, w, h, C, m, v). x,y are the box-center offset inside its cell in
[0,1), w,h the box size as a fraction of the image, C the objectness flag,
m the mean obstacle depth normalized by MEAN_DEPTH_SCALE and v the depth
variance normalized by VAR_DEPTH_SCALE.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .synthdata import CameraModel

# Channel order of detection grids (targets and predictions alike).
CH_X, CH_Y, CH_W, CH_H, CH_C, CH_M, CH_V = range(7)

MEAN_DEPTH_SCALE = 20.0  # m  -> channel CH_M in [0, 1]
VAR_DEPTH_SCALE = 25.0  # m^2 -> channel CH_V


@dataclass
class ObstacleBox:
    """Axis-aligned pixel box with depth statistics.

    Bounds are inclusive-exclusive. ``pixels`` optionally keeps the (rows,
    cols) arrays of the originating component so statistics can later be
    recomputed over the exact same pixel set; it is never serialized.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    mean_depth: float
    var_depth: float
    pixel_count: int = 0
    pixels: tuple | None = None

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("degenerate box bounds")
        if self.var_depth < 0:
            raise ValueError("negative depth variance")

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def to_json(self) -> dict:
        return {
            "x_min": float(self.x_min),
            "y_min": float(self.y_min),
            "x_max": float(self.x_max),
            "y_max": float(self.y_max),
            "mean_depth": float(self.mean_depth),
            "var_depth": float(self.var_depth),
        }


@dataclass(frozen=True)
class GridSpec:
    """Geometry of the detector grid; cells are square, cell_px pixels."""

    cells_x: int = 8
    cells_y: int = 5
    cell_px: int = 32

    @property
    def image_w(self) -> int:
        return self.cells_x * self.cell_px

    @property
    def image_h(self) -> int:
        return self.cells_y * self.cell_px

    @property
    def n_cells(self) -> int:
        return self.cells_x * self.cells_y


def extract_obstacles(
    depth: np.ndarray,
    seg: np.ndarray,
    max_range: float = 20.0,
    min_pixels: int = 16,
) -> list[ObstacleBox]:
    """Fig-style GT procedure: components of {seg=1 and depth <= max_range}."""
    if depth.shape != seg.shape:
        raise ValueError("depth and seg must be aligned")
    mask = (seg != 0) & (depth <= max_range)
    labels, n = ndimage.label(mask)  # default structure = 4-connectivity
    boxes = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        comp = labels[sl] == k
        count = int(comp.sum())
        if count < min_pixels:
            continue
        rows, cols = np.nonzero(comp)
        rows = rows + sl[0].start
        cols = cols + sl[1].start
        vals = depth[rows, cols]
        mean = vals.mean()
        var = ((vals - mean) ** 2).mean()
        boxes.append(
            ObstacleBox(
                x_min=float(cols.min()),
                y_min=float(rows.min()),
                x_max=float(cols.max() + 1),
                y_max=float(rows.max() + 1),
                mean_depth=float(mean),
                var_depth=float(var),
                pixel_count=count,
                pixels=(rows, cols),
            )
        )
    return boxes


def encode_targets(
    boxes: list[ObstacleBox],
    grid: GridSpec,
    mean_scale: float = MEAN_DEPTH_SCALE,
    var_scale: float = VAR_DEPTH_SCALE,
) -> np.ndarray:
    """Grid targets, one box per cell; the nearest obstacle wins a conflict."""
    t = np.zeros((grid.cells_y, grid.cells_x, 7))
    owner_depth = np.full((grid.cells_y, grid.cells_x), np.inf)
    for box in boxes:
        cx, cy = box.center
        col = int(cx // grid.cell_px)
        row = int(cy // grid.cell_px)
        if not (0 <= col < grid.cells_x and 0 <= row < grid.cells_y):
            raise ValueError(f"box center ({cx}, {cy}) outside the grid")
        if box.mean_depth >= owner_depth[row, col]:
            continue
        owner_depth[row, col] = box.mean_depth
        t[row, col, CH_X] = cx / grid.cell_px - col
        t[row, col, CH_Y] = cy / grid.cell_px - row
        t[row, col, CH_W] = (box.x_max - box.x_min) / grid.image_w
        t[row, col, CH_H] = (box.y_max - box.y_min) / grid.image_h
        t[row, col, CH_C] = 1.0
        t[row, col, CH_M] = box.mean_depth / mean_scale
        t[row, col, CH_V] = box.var_depth / var_scale
    return t


def tangent_ray_products(cam: CameraModel, normals: np.ndarray):
    """Per-pixel dot products of the stencil rays with the GT normals.

    The back-projected forward-difference tangents are linear in depth:
        t_x(u,v) = D(u+1,v) r(u+1,v) - D(u,v) r(u,v)
    (replicated depth at the last column/row), so the gradient-orthogonality
    term only needs <r(u,v), N*>, <r(u+1,v), N*> and <r(u,v+1), N*>.
    Shared by compute_normals and the depth loss so that predictions equal
    to the GT are exactly orthogonal to the GT normals.
    """
    h, w = normals.shape[:2]
    rays = cam.ray_grid(h + 1, w + 1)
    rho0 = np.einsum("hwc,hwc->hw", rays[:h, :w], normals)
    rho_x = np.einsum("hwc,hwc->hw", rays[:h, 1 : w + 1], normals)
    rho_y = np.einsum("hwc,hwc->hw", rays[1 : h + 1, :w], normals)
    return rho0, rho_x, rho_y


def _shift_left(depth: np.ndarray) -> np.ndarray:
    return np.concatenate([depth[:, 1:], depth[:, -1:]], axis=1)


def _shift_up(depth: np.ndarray) -> np.ndarray:
    return np.concatenate([depth[1:, :], depth[-1:, :]], axis=0)


def compute_normals(depth: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Unit surface normals from GT depth, oriented toward the camera.

    Uses the same forward-difference back-projected tangent stencil as the
    depth loss; boundary pixels replicate their inner neighbor.
    """
    if np.any(depth <= 0):
        raise ValueError("depth must be strictly positive")
    h, w = depth.shape
    rays = cam.ray_grid(h + 1, w + 1)
    p = depth[..., None] * rays[:h, :w]
    px = _shift_left(depth)[..., None] * rays[:h, 1 : w + 1]
    py = _shift_up(depth)[..., None] * rays[1 : h + 1, :w]
    n = np.cross(px - p, py - p)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    degenerate = norm[..., 0] < 1e-30
    n = np.where(degenerate[..., None], [0.0, 0.0, -1.0], n / np.maximum(norm, 1e-300))
    n[n[..., 2] > 0] *= -1.0
    return n
