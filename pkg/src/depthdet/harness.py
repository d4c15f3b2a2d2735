"""Training loop, dataset evaluation and the focal-length crop experiment.

Training uses Adam at a fixed learning rate with a fixed step budget plus an
optional plateau early-stop. Everything downstream of (seed, config) is
deterministic; per-step loss breakdowns go to a JSON-lines log.

The crop experiment evaluates a trained model on center-cropped-and-
upsampled copies of a dataset, with and without the detector-driven scale
correction, and reports per-crop RMSE, scale-invariant RMSE, obstacle-mean
depth RMSE and detector obstacle-mean RMSE.
"""

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import groundtruth, inference, losses, metrics
from .model import Model, ModelConfig
from .synthdata import CameraModel, Sample, center_crop_resample

DEFAULT_CROP_PRESETS = ((256, 160), (230, 144), (204, 128), (154, 96), (128, 80))


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    steps: int = 2000
    batch_size: int = 8
    rng_seed: int = 0
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    checkpoint_interval: int = 0  # 0 = no intermediate checkpoints
    patience: int = 0  # 0 = no early stop

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class CropExperimentConfig:
    crop_presets: tuple = DEFAULT_CROP_PRESETS
    correction: str = "both"  # on | off | both

    def __post_init__(self):
        if self.correction not in ("on", "off", "both"):
            raise ValueError("correction must be 'on', 'off' or 'both'")

    def variants(self) -> list[bool]:
        if self.correction == "on":
            return [True]
        if self.correction == "off":
            return [False]
        return [False, True]


class Adam:
    """Standard adaptive-moment estimation with bias correction."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainSample:
    """One image with precomputed loss targets."""

    rgb_chw: np.ndarray
    targets: losses.SampleTargets
    gt_boxes: list


def prepare_training_samples(
    samples: list[Sample],
    cam: CameraModel,
    grid: groundtruth.GridSpec,
    obstacle_range_m: float = 20.0,
    min_pixels: int = 16,
) -> list[TrainSample]:
    out = []
    for s in samples:
        boxes = groundtruth.extract_obstacles(s.depth, s.seg, obstacle_range_m, min_pixels)
        normals = groundtruth.compute_normals(s.depth, cam)
        out.append(
            TrainSample(
                rgb_chw=np.ascontiguousarray(s.rgb.transpose(2, 0, 1)),
                targets=losses.SampleTargets(
                    depth=s.depth,
                    normals=normals,
                    grid=groundtruth.encode_targets(boxes, grid),
                    ray_products=groundtruth.tangent_ray_products(cam, normals),
                ),
                gt_boxes=boxes,
            )
        )
    return out


@dataclass
class TrainResult:
    model: Model
    history: list  # LossBreakdown per step


def train(
    train_samples: list[TrainSample],
    model: Model,
    cfg: TrainConfig,
    cam: CameraModel,
    log_path=None,
    checkpoint_path=None,
) -> TrainResult:
    """Optimize the model in place; returns it plus the per-step loss log."""
    if not train_samples:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.rng_seed)
    opt = Adam(model.params, cfg.learning_rate)
    history = []
    log_f = open(log_path, "w") if log_path else None
    order = []

    best = math.inf
    last_improve = 0
    try:
        for step in range(1, cfg.steps + 1):
            if len(order) < cfg.batch_size:
                order.extend(rng.permutation(len(train_samples)).tolist())
            idx = [order.pop(0) for _ in range(cfg.batch_size)]
            batch = [train_samples[i] for i in idx]

            x = np.stack([b.rgb_chw for b in batch])
            depth, det, cache = model.forward_batch(x, want_cache=True)

            nb = len(batch)
            d_depth = np.empty_like(depth)
            d_det = np.empty_like(det)
            bd_sum = losses.LossBreakdown()
            for i, b in enumerate(batch):
                bd_d, gd = losses.depth_loss_grad(
                    depth[i], b.targets.depth, b.targets.normals, cfg.weights, cam,
                    ray_products=b.targets.ray_products,
                )
                bd_t, gt = losses.detection_loss_grad(det[i], b.targets.grid, cfg.weights)
                bd_sum = bd_sum + bd_d + bd_t
                d_depth[i] = gd / nb
                d_det[i] = gt / nb
            bd_mean = bd_sum.scaled(1.0 / nb)

            if not math.isfinite(bd_mean.total):
                raise TrainingDiverged(f"non-finite loss at step {step}: {bd_mean}")

            grads = model.backward(cache, d_depth, d_det)
            opt.step(model.params, grads)

            history.append(bd_mean)
            if log_f:
                log_f.write(json.dumps({"step": step, **bd_mean.to_json()}) + "\n")
            if checkpoint_path and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                model.save(f"{checkpoint_path}.step{step}")

            if cfg.patience:
                if bd_mean.total < best - 1e-12:
                    best = bd_mean.total
                    last_improve = step
                elif step - last_improve >= cfg.patience:
                    break
    finally:
        if log_f:
            log_f.close()
    return TrainResult(model=model, history=history)


def predict(model: Model, sample: Sample, threshold: float = 0.5, correction: bool = False):
    """Forward one sample: (depth map, detections, correction factor)."""
    out = model.forward(sample.rgb)
    dets = inference.decode_detections(out.det, model.cfg.grid_spec(), threshold)
    if correction:
        res = inference.correction_factor(dets, out.depth)
        return res.corrected, dets, res.k
    return out.depth, dets, 1.0


def evaluate_model(
    model: Model,
    samples: list[Sample],
    obstacle_range_m: float = 20.0,
    min_pixels: int = 16,
    threshold: float = 0.5,
    iou_threshold: float = 0.5,
    correction: bool = False,
) -> metrics.MetricsReport:
    eval_samples = []
    for s in samples:
        gt_boxes = groundtruth.extract_obstacles(s.depth, s.seg, obstacle_range_m, min_pixels)
        pred_depth, dets, _ = predict(model, s, threshold, correction)
        eval_samples.append(
            metrics.EvalSample(
                pred_depth=pred_depth,
                gt_depth=s.depth,
                seg_gt=s.seg,
                gt_boxes=gt_boxes,
                detections=dets,
            )
        )
    return metrics.evaluate(eval_samples, iou_threshold)


def run_crop_experiment(
    model: Model,
    samples: list[Sample],
    cfg: CropExperimentConfig,
    obstacle_range_m: float = 20.0,
    min_pixels: int = 16,
    threshold: float = 0.5,
    iou_threshold: float = 0.5,
) -> list[dict]:
    """One row per (crop preset, correction variant), identity crops included."""
    rows = []
    w = model.cfg.input_w
    for crop_w, crop_h in cfg.crop_presets:
        cropped = [center_crop_resample(s, crop_w, crop_h) for s in samples]
        for corrected in cfg.variants():
            rep = evaluate_model(
                model,
                cropped,
                obstacle_range_m=obstacle_range_m,
                min_pixels=min_pixels,
                threshold=threshold,
                iou_threshold=iou_threshold,
                correction=corrected,
            )
            rows.append(
                {
                    "crop_w": crop_w,
                    "crop_h": crop_h,
                    "focal_multiplier": w / crop_w,
                    "correction": corrected,
                    "rmse_linear": rep.rmse_linear,
                    "sc_inv_rmse": rep.sc_inv_rmse,
                    "depth_obs_rmse_mean": rep.depth_obs_rmse_mean,
                    "det_obs_rmse_mean": rep.det_obs_rmse_mean,
                }
            )
    return rows


def crop_rows_to_csv(rows: list[dict]) -> str:
    cols = (
        "crop_w",
        "crop_h",
        "focal_multiplier",
        "correction",
        "rmse_linear",
        "sc_inv_rmse",
        "depth_obs_rmse_mean",
        "det_obs_rmse_mean",
    )
    lines = [",".join(cols)]
    for r in rows:
        vals = []
        for c in cols:
            v = r[c]
            if v is None:
                vals.append("")
            elif isinstance(v, bool):
                vals.append("cor" if v else "nocor")
            elif isinstance(v, float):
                vals.append(f"{v:.6f}")
            else:
                vals.append(str(v))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


# -- flat key/value config files --------------------------------------------

_TRAIN_KEYS = {
    "learning_rate": float,
    "steps": int,
    "batch_size": int,
    "rng_seed": int,
    "checkpoint_interval": int,
    "patience": int,
}
_WEIGHT_KEYS = {
    "lambda_coord": float,
    "lambda_obj": float,
    "lambda_noobj": float,
    "lambda_mean": float,
    "lambda_var": float,
    "depth_grad_weight": float,
    "signed_gradient_term": bool,
}
_MODEL_KEYS = {
    "input_w": int,
    "input_h": int,
    "base_channels": int,
    "stages": int,
    "det_channels": int,
    "far_clamp_m": float,
    "scale_preset": str,
}
_CROP_KEYS = ("crop_presets", "correction")


def load_config(path) -> tuple[TrainConfig, ModelConfig, CropExperimentConfig]:
    """Flat JSON config with the exact TrainConfig / ModelConfig /
    CropExperimentConfig key names.

    A ``scale_preset`` of toy/full fills the model geometry; explicit keys
    override it. Unknown keys are an error.
    """
    with open(path) as f:
        raw = json.load(f)
    known = {**_TRAIN_KEYS, **_WEIGHT_KEYS, **_MODEL_KEYS}
    unknown = set(raw) - set(known) - set(_CROP_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")

    weights = losses.LossWeights(
        **{k: _WEIGHT_KEYS[k](raw[k]) for k in _WEIGHT_KEYS if k in raw}
    )
    train_cfg = TrainConfig(
        weights=weights, **{k: _TRAIN_KEYS[k](raw[k]) for k in _TRAIN_KEYS if k in raw}
    )

    crop_cfg = CropExperimentConfig(
        crop_presets=tuple(tuple(p) for p in raw.get("crop_presets", DEFAULT_CROP_PRESETS)),
        correction=raw.get("correction", "both"),
    )

    preset = raw.get("scale_preset", "toy")
    if preset in ("toy", "full"):
        model_cfg = ModelConfig.from_preset(preset, int(raw.get("base_channels", 16)))
    else:
        model_cfg = ModelConfig(
            input_w=int(raw["input_w"]),
            input_h=int(raw["input_h"]),
            base_channels=int(raw.get("base_channels", 16)),
            stages=int(raw.get("stages", 3)),
        )
    overrides = {}
    for key in ("det_channels", "far_clamp_m"):
        if key in raw:
            overrides[key] = _MODEL_KEYS[key](raw[key])
    if preset in ("toy", "full") and ("input_w" in raw or "input_h" in raw):
        overrides["input_w"] = int(raw.get("input_w", model_cfg.input_w))
        overrides["input_h"] = int(raw.get("input_h", model_cfg.input_h))
    if overrides:
        model_cfg = replace(model_cfg, **overrides)
    return train_cfg, model_cfg, crop_cfg
