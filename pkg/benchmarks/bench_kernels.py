#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Times the convolution forward/backward on every layer shape of the toy and
full presets, plus one complete training step, after a JIT warmup pass.

Run: python benchmarks/bench_kernels.py [--preset toy|full] [--repeats N]
"""

import argparse
import time

import numpy as np

from depthdet import harness, kernels
from depthdet.model import Model, ModelConfig
from depthdet.synthdata import CameraModel, SceneSpec, generate_sample


def layer_shapes(cfg: ModelConfig, batch: int):
    shapes = []
    h, w = cfg.input_h, cfg.input_w
    c_in = 3
    for s, c_out in enumerate(cfg.encoder_channels):
        shapes.append((f"enc{s}a", (batch, c_in, h, w), (c_out, c_in, 3, 3)))
        shapes.append((f"enc{s}b", (batch, c_out, h, w), (c_out, c_out, 3, 3)))
        h, w, c_in = h // 2, w // 2, c_out
    for j, c_out in enumerate(cfg.depth_channels):
        h, w = h * 2, w * 2
        shapes.append((f"dep{j}", (batch, c_in, h, w), (c_out, c_in, 3, 3)))
        c_in = c_out
    shapes.append(("depout", (batch, c_in, h * 2, w * 2), (1, c_in, 3, 3)))
    gh, gw = cfg.cells_y, cfg.cells_x
    shapes.append(("det3x3", (batch, cfg.det_channels, gh, gw),
                   (cfg.det_channels, cfg.det_channels, 3, 3)))
    shapes.append(("detout", (batch, cfg.det_channels, gh, gw), (7, cfg.det_channels, 1, 1)))
    return shapes


def time_call(fn, repeats):
    fn()  # warmup (JIT compile / cache fill)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_convs(cfg, batch, repeats):
    rng = np.random.default_rng(0)
    rows = []
    for name, xs, ws in layer_shapes(cfg, batch):
        x = rng.standard_normal(xs)
        w = rng.standard_normal(ws)
        b = np.zeros(ws[0])
        pad = 1 if ws[2] == 3 else 0
        y = kernels.conv2d(x, w, b, pad=pad)
        dy = np.ones_like(y)
        times = {}
        for backend in ("numpy", "numba"):
            kernels.set_backend(backend)
            times[f"{backend}_fwd"] = time_call(lambda: kernels.conv2d(x, w, b, pad=pad), repeats)
            times[f"{backend}_bwd"] = time_call(
                lambda: kernels.conv2d_backward(x, w, dy, pad=pad), repeats
            )
        rows.append((name, xs, times))
    return rows


def bench_train_step(cfg, batch, repeats):
    cam = CameraModel.from_hfov(cfg.input_w, cfg.input_h)
    samples = [
        generate_sample(SceneSpec(rng_seed=i, object_count=2, cam_pitch_deg=28.0), cam)
        for i in range(batch)
    ]
    prepared = harness.prepare_training_samples(samples, cam, cfg.grid_spec())
    model = Model.initialize(cfg, 0)
    out = {}
    for backend in ("numpy", "numba"):
        kernels.set_backend(backend)
        tc = harness.TrainConfig(steps=max(2, repeats), batch_size=batch)
        harness.train(prepared, model, harness.TrainConfig(steps=2, batch_size=batch), cam)
        t0 = time.perf_counter()
        harness.train(prepared, model, tc, cam)
        out[backend] = (time.perf_counter() - t0) / tc.steps
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--preset", choices=("toy", "full"), default="toy")
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--repeats", type=int, default=10)
    args = ap.parse_args()

    cfg = ModelConfig.from_preset(args.preset)
    print(f"preset={args.preset} batch={args.batch} repeats={args.repeats}")
    print(f"{'layer':8s} {'input':>20s} {'np fwd':>9s} {'nb fwd':>9s} "
          f"{'np bwd':>9s} {'nb bwd':>9s} {'speedup':>8s}")
    for name, xs, t in bench_convs(cfg, args.batch, args.repeats):
        total_np = t["numpy_fwd"] + t["numpy_bwd"]
        total_nb = t["numba_fwd"] + t["numba_bwd"]
        print(
            f"{name:8s} {str(xs):>20s} {t['numpy_fwd'] * 1e3:8.2f}m {t['numba_fwd'] * 1e3:8.2f}m "
            f"{t['numpy_bwd'] * 1e3:8.2f}m {t['numba_bwd'] * 1e3:8.2f}m {total_np / total_nb:7.2f}x"
        )

    step = bench_train_step(cfg, args.batch, args.repeats)
    print(f"\nfull training step: numpy {step['numpy'] * 1e3:.1f} ms, "
          f"numba {step['numba'] * 1e3:.1f} ms ({step['numpy'] / step['numba']:.2f}x)")


if __name__ == "__main__":
    main()
