"""Command-line surface: generate / train / eval / crop-exp / infer.

Dataset generation is driven by a flat JSON spec file, e.g.::

    {"count": 100, "rng_seed": 7, "width": 64, "height": 40,
     "object_count": [1, 3], "object_size_range": [1.0, 3.0],
     "depth_range": [3.0, 16.0], "cam_pitch_deg": 12.0}

Training reads a flat JSON config with TrainConfig / ModelConfig /
LossWeights / CropExperimentConfig keys (see harness.load_config); crop-exp
flags override the config-file crop keys. ``JMOD2_THREADS`` caps the
parallelism of the numba kernels; ``JMOD2_BACKEND`` selects numba or the
pure-numpy fallback.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import harness, inference, synthdata
from .model import Model


def _build_specs(raw: dict):
    count = int(raw.get("count", 100))
    width = int(raw.get("width", 64))
    height = int(raw.get("height", 40))
    cam = synthdata.CameraModel.from_hfov(width, height, float(raw.get("hfov_deg", 81.5)))
    rng = np.random.default_rng(int(raw.get("rng_seed", 0)))
    oc = raw.get("object_count", [1, 3])
    oc_range = (oc, oc) if isinstance(oc, int) else (int(oc[0]), int(oc[1]))
    specs = []
    for _ in range(count):
        specs.append(
            synthdata.SceneSpec(
                rng_seed=int(rng.integers(0, 2**62)),
                object_count=int(rng.integers(oc_range[0], oc_range[1] + 1)),
                object_size_range=tuple(raw.get("object_size_range", (1.0, 3.0))),
                depth_range=tuple(raw.get("depth_range", (3.0, 18.0))),
                ground_plane=bool(raw.get("ground_plane", True)),
                cam_height=float(raw.get("cam_height", 1.5)),
                cam_pitch_deg=float(raw.get("cam_pitch_deg", 0.0)),
                fog_range_m=float(raw.get("fog_range_m", 15.0)),
                far_clamp_m=float(raw.get("far_clamp_m", 40.0)),
            )
        )
    return specs, cam, float(raw.get("far_clamp_m", 40.0)), float(raw.get("obstacle_range_m", 20.0))


def cmd_generate(args) -> int:
    with open(args.spec) as f:
        raw = json.load(f)
    specs, cam, far_clamp, obstacle_range = _build_specs(raw)
    manifest = synthdata.render_dataset(specs, cam, args.out, far_clamp, obstacle_range)
    print(f"wrote {len(manifest['samples'])} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    train_cfg, model_cfg, _ = harness.load_config(args.config)
    ds = synthdata.load_dataset(args.data)
    prepared = harness.prepare_training_samples(
        ds.samples, ds.camera, model_cfg.grid_spec(), ds.obstacle_range_m, args.min_pixels
    )
    model = Model.initialize(model_cfg, train_cfg.rng_seed)
    log_path = args.log or f"{args.out}.log.jsonl"
    try:
        result = harness.train(
            prepared, model, train_cfg, ds.camera, log_path=log_path, checkpoint_path=args.out
        )
    except harness.TrainingDiverged as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 1
    result.model.save(args.out)
    first, last = result.history[0].total, result.history[-1].total
    print(f"trained {len(result.history)} steps, loss {first:.4f} -> {last:.4f}; saved {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = Model.load(args.ckpt)
    ds = synthdata.load_dataset(args.data)
    report = harness.evaluate_model(
        model,
        ds.samples,
        obstacle_range_m=ds.obstacle_range_m,
        min_pixels=args.min_pixels,
        threshold=args.threshold,
        correction=args.correction,
    )
    _write_report(args.report, report.to_json(), report.to_csv())
    print(json.dumps(report.to_json(), indent=2))
    return 0


def cmd_crop_exp(args) -> int:
    model = Model.load(args.ckpt)
    ds = synthdata.load_dataset(args.data)
    presets = _parse_presets(args.presets) if args.presets else harness.DEFAULT_CROP_PRESETS
    cfg = harness.CropExperimentConfig(crop_presets=presets, correction=args.correction)
    rows = harness.run_crop_experiment(
        model,
        ds.samples,
        cfg,
        obstacle_range_m=ds.obstacle_range_m,
        min_pixels=args.min_pixels,
        threshold=args.threshold,
    )
    _write_report(args.report, rows, harness.crop_rows_to_csv(rows))
    print(harness.crop_rows_to_csv(rows))
    return 0


def cmd_infer(args) -> int:
    model = Model.load(args.ckpt)
    rgb = synthdata.read_ppm(args.image)
    out = model.forward(rgb)
    dets = inference.decode_detections(out.det, model.cfg.grid_spec(), args.threshold)
    res = inference.correction_factor(dets, out.depth)
    depth = res.corrected if args.correction else out.depth
    payload = {
        "detections": [d.to_json() for d in dets],
        "correction_k": res.k,
        "correction_applied": bool(args.correction),
        "depth_min": float(depth.min()),
        "depth_max": float(depth.max()),
        "depth_mean": float(depth.mean()),
    }
    with open(args.json, "w") as f:
        json.dump(payload, f, indent=2)
    if args.depth_out:
        synthdata.write_depth_f32(args.depth_out, depth)
    print(f"{len(dets)} detections, k={res.k:.4f}; wrote {args.json}")
    return 0


def _parse_presets(text: str):
    presets = []
    for part in text.split(","):
        w, h = part.lower().split("x")
        presets.append((int(w), int(h)))
    return tuple(presets)


def _write_report(path, payload, csv_text):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
    root, _ = os.path.splitext(path)
    with open(f"{root}.csv", "w") as f:
        f.write(csv_text)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="depthdet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset")
    p.add_argument("--spec", required=True, help="JSON dataset spec")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True, help="flat JSON train/model config")
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.add_argument("--log", default=None, help="JSONL loss log (default <out>.log.jsonl)")
    p.add_argument("--min-pixels", type=int, default=16)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="JSON report path (CSV written alongside)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-pixels", type=int, default=16)
    p.add_argument("--correction", action="store_true", help="apply the global scale correction")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crop-exp", help="focal-length crop experiment table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--presets", default=None, help='e.g. "256x160,230x144,204x128"')
    p.add_argument("--correction", choices=("on", "off", "both"), default="both")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-pixels", type=int, default=16)
    p.set_defaults(func=cmd_crop_exp)

    p = sub.add_parser("infer", help="single-image inference dump")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="input PPM image at model resolution")
    p.add_argument("--json", required=True, help="output JSON path")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--correction", action="store_true")
    p.add_argument("--depth-out", default=None, help="optional raw f32 depth dump")
    p.set_defaults(func=cmd_infer)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
