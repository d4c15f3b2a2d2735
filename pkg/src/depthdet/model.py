"""Two-branch convolutional network with a shared encoder.

Encoder: VGG-style stages of two 3x3 convolutions followed by 2x2 average
pooling; ``stages`` downsampling steps make the encoder output match the
detector grid (cell_px = 2**stages).

Depth branch: stages-1 blocks of bilinear x2 upsampling + 3x3 conv, then a
final bilinear x2 + 3x3 conv to one channel at input resolution. Depth
output is softplus-activated, scaled by ``depth_scale`` meters and saturated
at the far clamp, so it is strictly positive.

Detection branch: nine convolutions at grid resolution (eight 3x3, one
final 1x1 to 7 channels); all seven channels pass through a sigmoid and are
therefore bounded to (0, 1), matching the normalized targets.

Hidden activations are softplus and pooling is averaging, so away from the
(inactive at initialization) far clamp the network is smooth everywhere:
central finite differences then certify the hand-written backward pass to
tight tolerances, which ReLU kinks and max-pool argmax flips would not
allow.
"""

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .groundtruth import GridSpec
from .kernels import conv2d, conv2d_backward

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_w: int
    input_h: int
    base_channels: int = 16
    stages: int = 3
    det_channels: int = 64
    far_clamp_m: float = 40.0
    depth_scale: float = 10.0  # meters at softplus(0); centers the output range
    scale_preset: str = "custom"

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        step = 2**self.stages
        if self.input_w % step or self.input_h % step:
            raise ValueError(
                f"input {self.input_w}x{self.input_h} not divisible by 2^stages = {step}"
            )

    @classmethod
    def toy(cls, base_channels: int = 16) -> "ModelConfig":
        """64x40 input, 8x5 grid of 8 px cells."""
        return cls(64, 40, base_channels, stages=3, scale_preset="toy")

    @classmethod
    def full(cls, base_channels: int = 16) -> "ModelConfig":
        """256x160 input, 8x5 grid of 32 px cells."""
        return cls(256, 160, base_channels, stages=5, scale_preset="full")

    @classmethod
    def from_preset(cls, name: str, base_channels: int = 16) -> "ModelConfig":
        if name == "toy":
            return cls.toy(base_channels)
        if name == "full":
            return cls.full(base_channels)
        raise ValueError(f"unknown scale preset {name!r}")

    @property
    def cell_px(self) -> int:
        return 2**self.stages

    @property
    def cells_x(self) -> int:
        return self.input_w // self.cell_px

    @property
    def cells_y(self) -> int:
        return self.input_h // self.cell_px

    def grid_spec(self) -> GridSpec:
        return GridSpec(cells_x=self.cells_x, cells_y=self.cells_y, cell_px=self.cell_px)

    @property
    def encoder_channels(self) -> list[int]:
        return [self.base_channels * 2 ** min(s, 3) for s in range(self.stages)]

    @property
    def depth_channels(self) -> list[int]:
        chans = []
        c = self.encoder_channels[-1]
        for _ in range(self.stages - 1):
            c = max(self.base_channels, c // 2)
            chans.append(c)
        return chans


@dataclass
class ModelOutput:
    depth: np.ndarray  # (H, W) meters
    det: np.ndarray  # (cells_y, cells_x, 7) sigmoid activations


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free for any z


def _softplus(z):
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def _avgpool2(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _avgpool2_backward(dy):
    n, c, hh, ww = dy.shape
    dx = np.empty((n, c, hh, 2, ww, 2), dy.dtype)
    dx[...] = (0.25 * dy)[:, :, :, None, :, None]
    return dx.reshape(n, c, 2 * hh, 2 * ww)


def _up2_last(x):
    prev = np.concatenate([x[..., :1], x[..., :-1]], axis=-1)
    nxt = np.concatenate([x[..., 1:], x[..., -1:]], axis=-1)
    out = np.empty(x.shape[:-1] + (2 * x.shape[-1],), x.dtype)
    out[..., 0::2] = 0.25 * prev + 0.75 * x
    out[..., 1::2] = 0.75 * x + 0.25 * nxt
    return out


def _down2_last(dy):
    de = dy[..., 0::2]
    do = dy[..., 1::2]
    dx = 0.75 * de + 0.75 * do
    dx[..., :-1] += 0.25 * de[..., 1:]
    dx[..., 0] += 0.25 * de[..., 0]
    dx[..., 1:] += 0.25 * do[..., :-1]
    dx[..., -1] += 0.25 * do[..., -1]
    return dx


def _up2(x):
    """Bilinear x2 on the two trailing axes (half-pixel-center convention)."""
    y = _up2_last(x)
    return _up2_last(y.swapaxes(-1, -2)).swapaxes(-1, -2)


def _up2_backward(dy):
    d = _down2_last(dy.swapaxes(-1, -2)).swapaxes(-1, -2)
    return _down2_last(d)


def _glorot(rng, f, c, kh, kw):
    fan_in = c * kh * kw
    fan_out = f * kh * kw
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(f, c, kh, kw))


def init_parameters(cfg: ModelConfig, rng_seed: int) -> dict:
    """Glorot-uniform conv weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(rng_seed)
    params = {}

    def add(name, f, c, kh, kw):
        params[f"{name}_w"] = _glorot(rng, f, c, kh, kw)
        params[f"{name}_b"] = np.zeros(f)

    c_in = 3
    for s, c_out in enumerate(cfg.encoder_channels):
        add(f"enc{s}a", c_out, c_in, 3, 3)
        add(f"enc{s}b", c_out, c_out, 3, 3)
        c_in = c_out

    c = cfg.encoder_channels[-1]
    for j, c_out in enumerate(cfg.depth_channels):
        add(f"dep{j}", c_out, c, 3, 3)
        c = c_out
    add("depout", 1, c, 3, 3)

    c = cfg.encoder_channels[-1]
    for j in range(8):
        add(f"det{j}", cfg.det_channels, c, 3, 3)
        c = cfg.det_channels
    add("detout", 7, c, 1, 1)
    return params


def detection_param_names(cfg: ModelConfig) -> list[str]:
    return [f"det{j}_{s}" for j in range(8) for s in "wb"] + ["detout_w", "detout_b"]


def depth_param_names(cfg: ModelConfig) -> list[str]:
    names = [f"dep{j}_{s}" for j in range(len(cfg.depth_channels)) for s in "wb"]
    return names + ["depout_w", "depout_b"]


def encoder_param_names(cfg: ModelConfig) -> list[str]:
    return [f"enc{s}{ab}_{ws}" for s in range(cfg.stages) for ab in "ab" for ws in "wb"]


class Model:
    """Parameter container plus hand-written forward/backward passes."""

    def __init__(self, cfg: ModelConfig, params: dict, init_seed: int | None = None):
        self.cfg = cfg
        self.params = params
        self.init_seed = init_seed

    @classmethod
    def initialize(cls, cfg: ModelConfig, rng_seed: int = 0) -> "Model":
        return cls(cfg, init_parameters(cfg, rng_seed), init_seed=rng_seed)

    # -- forward -----------------------------------------------------------

    def forward(self, rgb: np.ndarray) -> ModelOutput:
        """Single image (H, W, 3) in [0,1] -> depth map and detection grid."""
        cfg = self.cfg
        if rgb.shape != (cfg.input_h, cfg.input_w, 3):
            raise ValueError(
                f"input shape {rgb.shape} does not match config "
                f"({cfg.input_h}, {cfg.input_w}, 3)"
            )
        x = np.ascontiguousarray(rgb.transpose(2, 0, 1))[None].astype(np.float64)
        depth, det, _ = self.forward_batch(x)
        return ModelOutput(depth=depth[0], det=det[0])

    def forward_batch(self, x: np.ndarray, want_cache: bool = False):
        """Batched forward pass on (N, 3, H, W) input."""
        cfg = self.cfg
        p = self.params
        if x.shape[1:] != (3, cfg.input_h, cfg.input_w):
            raise ValueError(f"batch shape {x.shape} does not match config")
        cache = {"enc": [], "dep": [], "det": []} if want_cache else None

        for s in range(cfg.stages):
            z1 = conv2d(x, p[f"enc{s}a_w"], p[f"enc{s}a_b"], pad=1)
            a1 = _softplus(z1)
            z2 = conv2d(a1, p[f"enc{s}b_w"], p[f"enc{s}b_b"], pad=1)
            a2 = _softplus(z2)
            pooled = _avgpool2(a2)
            if want_cache:
                cache["enc"].append((x, z1, a1, z2))
            x = pooled
        feat = x

        d = feat
        for j in range(len(cfg.depth_channels)):
            u = _up2(d)
            z = conv2d(u, p[f"dep{j}_w"], p[f"dep{j}_b"], pad=1)
            if want_cache:
                cache["dep"].append((u, z))
            d = _softplus(z)
        u = _up2(d)
        z_depth = conv2d(u, p["depout_w"], p["depout_b"], pad=1)
        sp = cfg.depth_scale * _softplus(z_depth)
        depth = np.minimum(sp, cfg.far_clamp_m)

        t = feat
        for j in range(8):
            z = conv2d(t, p[f"det{j}_w"], p[f"det{j}_b"], pad=1)
            if want_cache:
                cache["det"].append((t, z))
            t = _softplus(z)
        z_det = conv2d(t, p["detout_w"], p["detout_b"], pad=0)
        det = _sigmoid(z_det)

        if want_cache:
            cache["dep_final"] = (u, z_depth, sp)
            cache["det_final"] = (t, det)
        return depth[:, 0], np.ascontiguousarray(det.transpose(0, 2, 3, 1)), cache

    # -- backward ----------------------------------------------------------

    def backward(self, cache, d_depth: np.ndarray, d_det: np.ndarray) -> dict:
        """Parameter gradients given output gradients.

        d_depth: (N, H, W) gradient w.r.t. the clamped metric depth.
        d_det:   (N, cells_y, cells_x, 7) gradient w.r.t. the sigmoid grid.
        """
        cfg = self.cfg
        p = self.params
        grads = {}

        # Depth head: clamp passes gradient only below the far clamp.
        u, z_depth, sp = cache["dep_final"]
        dz = d_depth[:, None] * (sp < cfg.far_clamp_m) * cfg.depth_scale * _sigmoid(z_depth)
        du, grads["depout_w"], grads["depout_b"] = conv2d_backward(u, p["depout_w"], dz, pad=1)
        dd = _up2_backward(du)
        for j in reversed(range(len(cfg.depth_channels))):
            u, z = cache["dep"][j]
            dz = dd * _sigmoid(z)
            du, grads[f"dep{j}_w"], grads[f"dep{j}_b"] = conv2d_backward(
                u, p[f"dep{j}_w"], dz, pad=1
            )
            dd = _up2_backward(du)
        dfeat = dd

        # Detection head.
        t, det = cache["det_final"]
        dz = np.ascontiguousarray(d_det.transpose(0, 3, 1, 2)) * det * (1.0 - det)
        dt, grads["detout_w"], grads["detout_b"] = conv2d_backward(t, p["detout_w"], dz, pad=0)
        for j in reversed(range(8)):
            t, z = cache["det"][j]
            dz = dt * _sigmoid(z)
            dt, grads[f"det{j}_w"], grads[f"det{j}_b"] = conv2d_backward(
                t, p[f"det{j}_w"], dz, pad=1
            )
        dfeat = dfeat + dt

        dx = dfeat
        for s in reversed(range(cfg.stages)):
            x, z1, a1, z2 = cache["enc"][s]
            da2 = _avgpool2_backward(dx)
            dz2 = da2 * _sigmoid(z2)
            da1, grads[f"enc{s}b_w"], grads[f"enc{s}b_b"] = conv2d_backward(
                a1, p[f"enc{s}b_w"], dz2, pad=1
            )
            dz1 = da1 * _sigmoid(z1)
            dx, grads[f"enc{s}a_w"], grads[f"enc{s}a_b"] = conv2d_backward(
                x, p[f"enc{s}a_w"], dz1, pad=1
            )
        return grads

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        np.savez(path, **self.params)
        real = path if str(path).endswith(".npz") else f"{path}.npz"
        sidecar = {
            "format_version": FORMAT_VERSION,
            "scale_preset": self.cfg.scale_preset,
            "base_channels": self.cfg.base_channels,
            "seed": self.init_seed,
            "input_w": self.cfg.input_w,
            "input_h": self.cfg.input_h,
            "stages": self.cfg.stages,
            "det_channels": self.cfg.det_channels,
            "far_clamp_m": self.cfg.far_clamp_m,
            "depth_scale": self.cfg.depth_scale,
        }
        with open(f"{real}.json", "w") as f:
            json.dump(sidecar, f, indent=2)

    @classmethod
    def load(cls, path, cfg: ModelConfig | None = None) -> "Model":
        real = path if str(path).endswith(".npz") else f"{path}.npz"
        if not os.path.exists(real):
            raise FileNotFoundError(real)
        with open(f"{real}.json") as f:
            meta = json.load(f)
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported parameter format {meta.get('format_version')}")
        file_cfg = ModelConfig(
            input_w=meta["input_w"],
            input_h=meta["input_h"],
            base_channels=meta["base_channels"],
            stages=meta["stages"],
            det_channels=meta["det_channels"],
            far_clamp_m=meta["far_clamp_m"],
            depth_scale=meta["depth_scale"],
            scale_preset=meta["scale_preset"],
        )
        if cfg is not None and cfg != file_cfg:
            raise ValueError(f"config mismatch: requested {cfg}, file holds {file_cfg}")
        with np.load(real) as data:
            params = {k: data[k].astype(np.float64) for k in data.files}
        expected = init_parameters(file_cfg, 0)
        if set(params) != set(expected) or any(
            params[k].shape != expected[k].shape for k in expected
        ):
            raise ValueError("parameter file does not match its declared config")
        return cls(file_cfg, params, init_seed=meta.get("seed"))


def save_parameters(model: Model, path) -> None:
    model.save(path)


def load_parameters(path, cfg: ModelConfig | None = None) -> Model:
    return Model.load(path, cfg)
