"""Evaluation protocol: full-map depth errors, per-obstacle depth statistics
errors, and detection matching with IOU / precision / recall.

Dataset-level numbers are micro-averaged: pixel errors, obstacles, matched
pairs and detection counts are pooled across all samples before the final
RMSE / mean / ratio is taken. Matching is per-sample greedy one-to-one by
descending IOU (ties: smaller center distance, then lower detection cell),
with pairs below the IOU threshold never matched.
"""

import math
from dataclasses import dataclass

import numpy as np

from .groundtruth import ObstacleBox
from .inference import Detection


@dataclass
class MetricsReport:
    rmse_linear: float
    sc_inv_rmse: float
    depth_obs_rmse_mean: float | None
    depth_obs_rmse_var: float | None
    det_obs_rmse_mean: float | None
    det_obs_rmse_var: float | None
    iou_mean: float | None
    precision: float
    recall: float
    n_gt: int
    n_det: int
    n_matched: int

    CSV_FIELDS = (
        "rmse_linear",
        "sc_inv_rmse",
        "depth_obs_rmse_mean",
        "depth_obs_rmse_var",
        "det_obs_rmse_mean",
        "det_obs_rmse_var",
        "iou_mean",
        "precision",
        "recall",
        "n_gt",
        "n_det",
        "n_matched",
    )

    def to_json(self) -> dict:
        return {name: getattr(self, name) for name in self.CSV_FIELDS}

    def to_csv(self) -> str:
        header = ",".join(self.CSV_FIELDS)
        vals = [getattr(self, name) for name in self.CSV_FIELDS]
        row = ",".join("" if v is None else f"{v:.6f}" if isinstance(v, float) else str(v) for v in vals)
        return f"{header}\n{row}\n"


def rmse_linear(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise ValueError("depth maps must be aligned")
    return float(np.sqrt(np.mean((pred - gt) ** 2)))


def sc_inv_rmse(pred: np.ndarray, gt: np.ndarray) -> float:
    """mean(d^2) - mean(d)^2 with d = log(pred) - log(gt); the variance of d,
    hence exactly invariant to a global scale on either map."""
    if np.any(pred <= 0) or np.any(gt <= 0):
        raise ValueError("depth must be strictly positive")
    d = np.log(pred) - np.log(gt)
    return float(np.mean(d * d) - np.mean(d) ** 2)


def _bounds(box) -> tuple[float, float, float, float]:
    if isinstance(box, Detection):
        box = box.box
    if isinstance(box, ObstacleBox):
        return box.x_min, box.y_min, box.x_max, box.y_max
    x_min, y_min, x_max, y_max = box
    return x_min, y_min, x_max, y_max


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = _bounds(a)
    bx0, by0, bx1, by1 = _bounds(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return float(inter / union)


def _center(box) -> tuple[float, float]:
    x0, y0, x1, y1 = _bounds(box)
    return (x0 + x1) / 2.0, (y0 + y1) / 2.0


@dataclass
class Matching:
    pairs: list  # (det_idx, gt_idx, iou)
    unmatched_dets: list
    unmatched_gts: list


def match_detections(dets, gts, iou_threshold: float = 0.5) -> Matching:
    """Greedy one-to-one matching by descending IOU; only pairs at or above
    the threshold count."""
    candidates = []
    for di, det in enumerate(dets):
        dcx, dcy = _center(det)
        cell = det.cell if isinstance(det, Detection) else (0, di)
        for gi, gt in enumerate(gts):
            v = iou(det, gt)
            if v < iou_threshold or v == 0.0:
                continue
            gcx, gcy = _center(gt)
            dist = math.hypot(dcx - gcx, dcy - gcy)
            candidates.append((-v, dist, cell, di, gi))
    candidates.sort()
    used_d = set()
    used_g = set()
    pairs = []
    for neg_v, _, _, di, gi in candidates:
        if di in used_d or gi in used_g:
            continue
        used_d.add(di)
        used_g.add(gi)
        pairs.append((di, gi, -neg_v))
    return Matching(
        pairs=pairs,
        unmatched_dets=[i for i in range(len(dets)) if i not in used_d],
        unmatched_gts=[i for i in range(len(gts)) if i not in used_g],
    )


def _box_pixel_stats(box: ObstacleBox, depth: np.ndarray, seg: np.ndarray):
    """Mean/population variance of depth over the box's own component pixels
    (falling back to segmented pixels inside the rectangle)."""
    if box.pixels is not None:
        rows, cols = box.pixels
        vals = depth[rows, cols]
    else:
        r0, r1 = int(np.floor(box.y_min)), int(np.ceil(box.y_max))
        c0, c1 = int(np.floor(box.x_min)), int(np.ceil(box.x_max))
        sub = seg[r0:r1, c0:c1] != 0
        vals = depth[r0:r1, c0:c1][sub]
    if vals.size == 0:
        return None
    mean = vals.mean()
    return float(mean), float(((vals - mean) ** 2).mean())


def obstacle_depth_stats_error(boxes_gt, depth_pred, seg_gt):
    """Per-GT-obstacle (mean, variance) errors of the predicted depth,
    reduced by RMSE across obstacles; (None, None) when there are no GT
    obstacles."""
    errs_mean, errs_var = _obstacle_stat_errors(boxes_gt, depth_pred, seg_gt)
    if not errs_mean:
        return None, None
    return (
        float(np.sqrt(np.mean(np.square(errs_mean)))),
        float(np.sqrt(np.mean(np.square(errs_var)))),
    )


def _obstacle_stat_errors(boxes_gt, depth_pred, seg_gt):
    errs_mean = []
    errs_var = []
    for box in boxes_gt:
        stats = _box_pixel_stats(box, depth_pred, seg_gt)
        if stats is None:
            continue
        errs_mean.append(stats[0] - box.mean_depth)
        errs_var.append(stats[1] - box.var_depth)
    return errs_mean, errs_var


def detection_stats_error(matching: Matching, dets, gts):
    """RMSE of matched (m, v) estimates against their GT obstacles;
    (None, None) with no matches."""
    if not matching.pairs:
        return None, None
    errs_m = []
    errs_v = []
    for di, gi, _ in matching.pairs:
        det_box = dets[di].box if isinstance(dets[di], Detection) else dets[di]
        errs_m.append(det_box.mean_depth - gts[gi].mean_depth)
        errs_v.append(det_box.var_depth - gts[gi].var_depth)
    return (
        float(np.sqrt(np.mean(np.square(errs_m)))),
        float(np.sqrt(np.mean(np.square(errs_v)))),
    )


@dataclass
class EvalSample:
    """Everything evaluate() needs for one image."""

    pred_depth: np.ndarray
    gt_depth: np.ndarray
    seg_gt: np.ndarray
    gt_boxes: list
    detections: list


def evaluate(samples, iou_threshold: float = 0.5) -> MetricsReport:
    """Micro-averaged MetricsReport over an iterable of EvalSample."""
    sq_sum = 0.0
    n_px = 0
    d_sum = 0.0
    d_sq_sum = 0.0
    obs_mean_errs = []
    obs_var_errs = []
    det_m_errs = []
    det_v_errs = []
    ious = []
    n_gt = n_det = n_matched = 0

    for s in samples:
        diff = s.pred_depth - s.gt_depth
        sq_sum += float((diff * diff).sum())
        n_px += diff.size
        d = np.log(s.pred_depth) - np.log(s.gt_depth)
        d_sum += float(d.sum())
        d_sq_sum += float((d * d).sum())

        em, ev = _obstacle_stat_errors(s.gt_boxes, s.pred_depth, s.seg_gt)
        obs_mean_errs.extend(em)
        obs_var_errs.extend(ev)

        matching = match_detections(s.detections, s.gt_boxes, iou_threshold)
        n_gt += len(s.gt_boxes)
        n_det += len(s.detections)
        n_matched += len(matching.pairs)
        for di, gi, v in matching.pairs:
            ious.append(v)
            det_box = s.detections[di].box
            det_m_errs.append(det_box.mean_depth - s.gt_boxes[gi].mean_depth)
            det_v_errs.append(det_box.var_depth - s.gt_boxes[gi].var_depth)

    if n_px == 0:
        raise ValueError("evaluate() needs at least one sample")

    def rmse(errs):
        return float(np.sqrt(np.mean(np.square(errs)))) if errs else None

    return MetricsReport(
        rmse_linear=float(np.sqrt(sq_sum / n_px)),
        sc_inv_rmse=float(d_sq_sum / n_px - (d_sum / n_px) ** 2),
        depth_obs_rmse_mean=rmse(obs_mean_errs),
        depth_obs_rmse_var=rmse(obs_var_errs),
        det_obs_rmse_mean=rmse(det_m_errs),
        det_obs_rmse_var=rmse(det_v_errs),
        iou_mean=float(np.mean(ious)) if ious else None,
        precision=1.0 if n_det == 0 else n_matched / n_det,
        recall=1.0 if n_gt == 0 else n_matched / n_gt,
        n_gt=n_gt,
        n_det=n_det,
        n_matched=n_matched,
    )
