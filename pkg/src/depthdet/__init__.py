"""Joint monocular obstacle detection and dense depth estimation.

Synthetic pinhole scenes, a two-branch convnet with a shared encoder, the
scale-invariant depth loss with a gradient/normal orthogonality term, the
grid detection loss, the detector-driven global depth-scale correction, and
the full evaluation protocol.
"""

from .groundtruth import GridSpec, ObstacleBox, compute_normals, encode_targets, extract_obstacles
from .harness import CropExperimentConfig, TrainConfig, evaluate_model, run_crop_experiment, train
from .inference import CorrectionResult, Detection, correction_factor, decode_detections
from .losses import LossBreakdown, LossWeights, depth_loss, detection_loss, total_loss
from .metrics import MetricsReport, evaluate, iou, match_detections, rmse_linear, sc_inv_rmse
from .model import Model, ModelConfig, ModelOutput, init_parameters
from .synthdata import CameraModel, Sample, SceneSpec, center_crop_resample, generate_sample

__version__ = "0.1.0"

__all__ = [
    "CameraModel",
    "CorrectionResult",
    "CropExperimentConfig",
    "Detection",
    "GridSpec",
    "LossBreakdown",
    "LossWeights",
    "MetricsReport",
    "Model",
    "ModelConfig",
    "ModelOutput",
    "ObstacleBox",
    "Sample",
    "SceneSpec",
    "TrainConfig",
    "center_crop_resample",
    "compute_normals",
    "correction_factor",
    "decode_detections",
    "depth_loss",
    "detection_loss",
    "encode_targets",
    "evaluate",
    "evaluate_model",
    "extract_obstacles",
    "generate_sample",
    "init_parameters",
    "iou",
    "match_detections",
    "rmse_linear",
    "run_crop_experiment",
    "sc_inv_rmse",
    "total_loss",
    "train",
]
