"""Independent reference implementations used to freeze expected values.

Everything here is deliberately written the slow, obvious way (BFS flood
fill, exhaustive assignment search, stencil loops) and stays independent of
the package's production code paths.
"""

import itertools
import math

import numpy as np


def flood_fill_components(mask: np.ndarray) -> list:
    """4-connected components by BFS; each as a row-major sorted pixel list."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            queue = [(r, c)]
            seen[r, c] = True
            comp = []
            while queue:
                cr, cc = queue.pop()
                comp.append((cr, cc))
                for nr, nc in ((cr - 1, cc), (cr + 1, cc), (cr, cc - 1), (cr, cc + 1)):
                    if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        queue.append((nr, nc))
            comps.append(sorted(comp))
    return comps


def extract_obstacles_oracle(depth, seg, max_range, min_pixels):
    """Brute-force variant of groundtruth.extract_obstacles.

    Pixel statistics are evaluated with the same numpy reduction over
    row-major-ordered values, so agreement is exact, not approximate.
    """
    mask = (seg != 0) & (depth <= max_range)
    boxes = []
    for comp in flood_fill_components(mask):
        if len(comp) < min_pixels:
            continue
        rows = np.array([p[0] for p in comp])
        cols = np.array([p[1] for p in comp])
        vals = depth[rows, cols]
        mean = vals.mean()
        var = ((vals - mean) ** 2).mean()
        boxes.append(
            {
                "x_min": float(cols.min()),
                "y_min": float(rows.min()),
                "x_max": float(cols.max() + 1),
                "y_max": float(rows.max() + 1),
                "mean_depth": float(mean),
                "var_depth": float(var),
                "pixel_count": len(comp),
            }
        )
    boxes.sort(key=lambda b: (b["y_min"], b["x_min"], b["y_max"], b["x_max"]))
    return boxes


def iou_oracle(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def best_matching_oracle(det_rects, gt_rects, iou_threshold):
    """Exhaustive max-total-IOU one-to-one assignment (tiny inputs only).

    With distinct pairwise IOUs the greedy matcher must find the same
    assignment as the global optimum restricted to pairs above threshold.
    """
    n_d, n_g = len(det_rects), len(gt_rects)
    best_pairs = []
    best_score = -1.0
    indices = list(range(n_g))
    for k in range(0, min(n_d, n_g) + 1):
        for det_sel in itertools.combinations(range(n_d), k):
            for gt_perm in itertools.permutations(indices, k):
                score = 0.0
                ok = True
                for di, gi in zip(det_sel, gt_perm):
                    v = iou_oracle(det_rects[di], gt_rects[gi])
                    if v < iou_threshold:
                        ok = False
                        break
                    score += v
                if ok and score > best_score + 1e-12:
                    best_score = score
                    best_pairs = sorted(zip(det_sel, gt_perm))
    return best_pairs


def normals_oracle(depth, cam):
    """Stencil-loop normals: cross product of forward-difference tangents."""
    h, w = depth.shape
    cx, cy = cam.principal_point
    f = cam.focal_px

    def ray(r, c):
        return np.array([(c + 0.5 - cx) / f, (r + 0.5 - cy) / f, 1.0])

    def point(r, c):
        rr = min(r, h - 1)
        cc = min(c, w - 1)
        return depth[rr, cc] * ray(r, c)

    out = np.zeros((h, w, 3))
    for r in range(h):
        for c in range(w):
            p = depth[r, c] * ray(r, c)
            tx = point(r, c + 1) - p
            ty = point(r + 1, c) - p
            n = np.cross(tx, ty)
            norm = math.sqrt((n * n).sum())
            if norm < 1e-30:
                out[r, c] = (0.0, 0.0, -1.0)
                continue
            n = n / norm
            if n[2] > 0:
                n = -n
            out[r, c] = n
    return out
