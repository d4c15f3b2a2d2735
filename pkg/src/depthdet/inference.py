"""Decoding the detector grid and the detector-driven global scale fix.

The correction multiplies the whole depth map by

    k = mean_j(m_j) / mean_j(Dhat_j)

where m_j is the detector's mean-distance estimate for obstacle j and
Dhat_j the average of the predicted depth map over that obstacle's full
bounding rectangle. With no detections (or a degenerate ratio) k falls back
to 1 and the map is returned unchanged.
"""

from dataclasses import dataclass

import numpy as np

from .groundtruth import (
    CH_C,
    CH_H,
    CH_M,
    CH_V,
    CH_W,
    CH_X,
    CH_Y,
    MEAN_DEPTH_SCALE,
    VAR_DEPTH_SCALE,
    GridSpec,
    ObstacleBox,
)


@dataclass
class Detection:
    box: ObstacleBox
    confidence: float
    cell: tuple[int, int]  # (row, col)

    def to_json(self) -> dict:
        d = self.box.to_json()
        d["confidence"] = float(self.confidence)
        d["cell"] = list(self.cell)
        return d


@dataclass
class CorrectionResult:
    k: float
    n_o: int
    corrected: np.ndarray


def decode_detections(
    grid: np.ndarray,
    spec: GridSpec,
    threshold: float = 0.5,
    mean_scale: float = MEAN_DEPTH_SCALE,
    var_scale: float = VAR_DEPTH_SCALE,
) -> list[Detection]:
    """Cells with confidence >= threshold become detections, boxes clamped
    to the image; sorted by descending confidence. Cells whose decoded box
    degenerates to zero area after clamping are dropped."""
    if grid.shape != (spec.cells_y, spec.cells_x, 7):
        raise ValueError(f"grid shape {grid.shape} does not match {spec}")
    dets = []
    rows, cols = np.nonzero(grid[..., CH_C] >= threshold)
    for r, c in zip(rows, cols):
        cell = grid[r, c]
        cx = (c + cell[CH_X]) * spec.cell_px
        cy = (r + cell[CH_Y]) * spec.cell_px
        bw = cell[CH_W] * spec.image_w
        bh = cell[CH_H] * spec.image_h
        x_min = max(cx - bw / 2.0, 0.0)
        x_max = min(cx + bw / 2.0, float(spec.image_w))
        y_min = max(cy - bh / 2.0, 0.0)
        y_max = min(cy + bh / 2.0, float(spec.image_h))
        if x_min >= x_max or y_min >= y_max:
            continue
        box = ObstacleBox(
            x_min=x_min,
            y_min=y_min,
            x_max=x_max,
            y_max=y_max,
            mean_depth=float(cell[CH_M] * mean_scale),
            var_depth=float(cell[CH_V] * var_scale),
        )
        dets.append(Detection(box=box, confidence=float(cell[CH_C]), cell=(int(r), int(c))))
    dets.sort(key=lambda d: (-d.confidence, d.cell))
    return dets


def correction_factor(dets: list[Detection], depth: np.ndarray) -> CorrectionResult:
    """Global scale factor from detector distance estimates (identity with
    no usable detections)."""
    if np.any(depth <= 0):
        raise ValueError("depth must be strictly positive")
    h, w = depth.shape
    ms = []
    dhats = []
    for det in dets:
        r0 = int(np.clip(np.floor(det.box.y_min), 0, h))
        r1 = int(np.clip(np.ceil(det.box.y_max), 0, h))
        c0 = int(np.clip(np.floor(det.box.x_min), 0, w))
        c1 = int(np.clip(np.ceil(det.box.x_max), 0, w))
        if r1 <= r0 or c1 <= c0:
            continue
        ms.append(det.box.mean_depth)
        dhats.append(depth[r0:r1, c0:c1].mean())
    if not ms:
        return CorrectionResult(k=1.0, n_o=0, corrected=depth.copy())
    k = float(np.mean(ms) / np.mean(dhats))
    if not np.isfinite(k) or k <= 0:
        return CorrectionResult(k=1.0, n_o=len(ms), corrected=depth.copy())
    return CorrectionResult(k=k, n_o=len(ms), corrected=k * depth)
