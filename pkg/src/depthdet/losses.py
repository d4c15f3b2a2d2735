"""Training objectives: scale-invariant log depth loss with a
gradient/normal orthogonality penalty, and the grid detection loss.

Depth loss for per-pixel log error d = log(pred) - log(gt):

    L_depth = mean(d^2) - mean(d)^2 / 2
            + depth_grad_weight * mean(<t_x, N*>^2 + <t_y, N*>^2)

where t_x, t_y are the back-projected forward-difference tangent vectors of
the *predicted* depth and N* the ground-truth unit normals. The squared dot
products are bounded below by zero and vanish exactly when the predicted
surface tangents are orthogonal to the GT normals; in particular the term is
exactly zero at pred == gt because the normals use the same stencil. The
unbounded signed form mean(<t_x,N*> + <t_y,N*>) is kept behind
``signed_gradient_term`` for comparison.

Detection loss over all N grid cells, squared errors per channel:

    L_det = [ lambda_coord * sum_obj (dx^2 + dy^2)
            + lambda_coord * sum_obj (dw^2 + dh^2)
            + lambda_obj   * sum_obj   dC^2
            + lambda_noobj * sum_noobj dC^2
            + lambda_mean  * sum_obj   dm^2
            + lambda_var   * sum_obj   dv^2 ] / N

Regression channels only carry loss on cells with a target object
(C* = 1); their targets are undefined elsewhere. The division by the cell
count keeps the lambda weights comparable across grid sizes.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .groundtruth import CH_C, tangent_ray_products
from .synthdata import CameraModel


@dataclass(frozen=True)
class LossWeights:
    lambda_coord: float = 0.25
    lambda_obj: float = 5.0
    lambda_noobj: float = 0.05
    lambda_mean: float = 1.5
    lambda_var: float = 1.25
    depth_grad_weight: float = 1.0
    signed_gradient_term: bool = False

    def __post_init__(self):
        for name in ("lambda_coord", "lambda_obj", "lambda_noobj", "lambda_mean",
                     "lambda_var", "depth_grad_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term loss values, each already carrying its lambda weight;
    total is their plain sum."""

    depth_scale_inv: float = 0.0
    depth_grad_normal: float = 0.0
    det_coord: float = 0.0
    det_size: float = 0.0
    det_conf_obj: float = 0.0
    det_conf_noobj: float = 0.0
    det_mean: float = 0.0
    det_var: float = 0.0
    total: float = 0.0

    def components(self) -> tuple:
        """The eight weighted terms, in field order (total excluded)."""
        return (
            self.depth_scale_inv,
            self.depth_grad_normal,
            self.det_coord,
            self.det_size,
            self.det_conf_obj,
            self.det_conf_noobj,
            self.det_mean,
            self.det_var,
        )

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(
            *(a + b for a, b in zip(self.components(), other.components())),
            self.total + other.total,
        )

    def scaled(self, factor: float) -> "LossBreakdown":
        return LossBreakdown(*(v * factor for v in self.components()), self.total * factor)

    def to_json(self) -> dict:
        return asdict(self)


def _breakdown(**terms) -> LossBreakdown:
    return LossBreakdown(total=float(sum(terms.values())), **terms)


@dataclass
class SampleTargets:
    """Everything the combined loss needs for one training image."""

    depth: np.ndarray  # (H, W) GT depth, strictly positive
    normals: np.ndarray  # (H, W, 3) unit GT normals
    grid: np.ndarray  # (cells_y, cells_x, 7) detector targets
    ray_products: tuple | None = None  # cached tangent_ray_products(cam, normals)


def _check_positive(pred, gt):
    if np.any(pred <= 0):
        raise ValueError("predicted depth must be strictly positive")
    if np.any(gt <= 0):
        raise ValueError("ground-truth depth must be strictly positive")


def _shift_left(a):
    return np.concatenate([a[:, 1:], a[:, -1:]], axis=1)


def _shift_up(a):
    return np.concatenate([a[1:, :], a[-1:, :]], axis=0)


def depth_loss(
    pred: np.ndarray,
    gt: np.ndarray,
    gt_normals: np.ndarray,
    w: LossWeights,
    cam: CameraModel,
    ray_products=None,
) -> LossBreakdown:
    bd, _ = _depth_terms(pred, gt, gt_normals, w, cam, ray_products, want_grad=False)
    return bd


def depth_loss_grad(pred, gt, gt_normals, w: LossWeights, cam: CameraModel, ray_products=None):
    """Loss terms plus the gradient w.r.t. the predicted depth map.

    ``ray_products`` optionally carries precomputed tangent_ray_products for
    the (cam, gt_normals) pair; the training loop reuses them across steps.
    """
    return _depth_terms(pred, gt, gt_normals, w, cam, ray_products, want_grad=True)


def _depth_terms(pred, gt, gt_normals, w, cam, ray_products, want_grad):
    _check_positive(pred, gt)
    n = pred.size
    d = np.log(pred) - np.log(gt)
    si = (d * d).mean() - 0.5 * d.mean() ** 2

    rho0, rho_x, rho_y = ray_products or tangent_ray_products(cam, gt_normals)
    ax = _shift_left(pred) * rho_x - pred * rho0
    ay = _shift_up(pred) * rho_y - pred * rho0
    if w.signed_gradient_term:
        gn = w.depth_grad_weight * (ax + ay).mean()
    else:
        gn = w.depth_grad_weight * (ax * ax + ay * ay).mean()

    bd = _breakdown(depth_scale_inv=float(si), depth_grad_normal=float(gn))
    if not want_grad:
        return bd, None

    grad = (2.0 * d / n - d.sum() / n**2) / pred
    # d(ax)/dD is -rho0 at the pixel itself and rho_x at its left neighbor;
    # the replicated last column/row folds the neighbor term back onto itself.
    fx = 2.0 * ax if not w.signed_gradient_term else np.ones_like(ax)
    fy = 2.0 * ay if not w.signed_gradient_term else np.ones_like(ay)
    g = -(fx + fy) * rho0
    tx = fx * rho_x
    g[:, 1:] += tx[:, :-1]
    g[:, -1] += tx[:, -1]
    ty = fy * rho_y
    g[1:, :] += ty[:-1, :]
    g[-1, :] += ty[-1, :]
    grad += (w.depth_grad_weight / n) * g
    return bd, grad


def detection_loss(pred: np.ndarray, target: np.ndarray, w: LossWeights) -> LossBreakdown:
    bd, _ = _detection_terms(pred, target, w, want_grad=False)
    return bd


def detection_loss_grad(pred, target, w: LossWeights):
    """Loss terms plus the gradient w.r.t. the predicted grid."""
    return _detection_terms(pred, target, w, want_grad=True)


def _detection_terms(pred, target, w, want_grad):
    if pred.shape != target.shape or pred.shape[-1] != 7:
        raise ValueError(f"grid shape mismatch: {pred.shape} vs {target.shape}")
    conf = target[..., CH_C]
    if not np.all((conf == 0.0) | (conf == 1.0)):
        raise ValueError("target confidence channel must be binary")
    n = conf.size
    obj = conf == 1.0
    diff = pred - target

    def masked_sq(ch, mask):
        return float((diff[..., ch][mask] ** 2).sum())

    bd = _breakdown(
        det_coord=w.lambda_coord * (masked_sq(0, obj) + masked_sq(1, obj)) / n,
        det_size=w.lambda_coord * (masked_sq(2, obj) + masked_sq(3, obj)) / n,
        det_conf_obj=w.lambda_obj * masked_sq(4, obj) / n,
        det_conf_noobj=w.lambda_noobj * masked_sq(4, ~obj) / n,
        det_mean=w.lambda_mean * masked_sq(5, obj) / n,
        det_var=w.lambda_var * masked_sq(6, obj) / n,
    )
    if not want_grad:
        return bd, None

    grad = np.zeros_like(pred)
    objf = obj.astype(pred.dtype)
    for ch, lam, mask in (
        (0, w.lambda_coord, objf),
        (1, w.lambda_coord, objf),
        (2, w.lambda_coord, objf),
        (3, w.lambda_coord, objf),
        (5, w.lambda_mean, objf),
        (6, w.lambda_var, objf),
    ):
        grad[..., ch] = 2.0 * lam * diff[..., ch] * mask / n
    lam_c = np.where(obj, w.lambda_obj, w.lambda_noobj)
    grad[..., CH_C] = 2.0 * lam_c * diff[..., CH_C] / n
    return bd, grad


def total_loss(outputs, targets: SampleTargets, w: LossWeights, cam: CameraModel) -> LossBreakdown:
    """Combined objective; ``outputs`` is a model.ModelOutput."""
    return depth_loss(outputs.depth, targets.depth, targets.normals, w, cam) + detection_loss(
        outputs.det, targets.grid, w
    )


def total_loss_grad(outputs, targets: SampleTargets, w: LossWeights, cam: CameraModel):
    """Combined objective plus gradients w.r.t. both model outputs."""
    bd_depth, d_depth = depth_loss_grad(outputs.depth, targets.depth, targets.normals, w, cam)
    bd_det, d_det = detection_loss_grad(outputs.det, targets.grid, w)
    return bd_depth + bd_det, d_depth, d_det
