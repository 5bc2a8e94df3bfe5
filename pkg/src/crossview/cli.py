"""Command-line entry point: gen-data | train | eval | predict | plot."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .evaluation import evaluate
from .geometry import from_absolute_frame
from .model import prepare_sample
from .scene import GenConfig, filter_unqualified, generate_synthetic_scene, load_dataset, save_dataset
from .training import TrainConfig, load_model, run_training


def _add_gen_data(sub):
    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset (JSONL)")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--count", type=int, default=100, help="number of scenes (default 100)")
    p.add_argument("--seed", type=int, default=0, help="base seed; scene i uses seed+i (default 0)")
    p.add_argument("--branches", type=int, default=2, help="junction branch count, 2-4 (default 2)")
    p.add_argument("--t-obs", type=int, default=8, help="observed steps (default 8)")
    p.add_argument("--t-pred", type=int, default=12, help="predicted steps (default 12)")
    p.add_argument("--noise", type=float, default=0.2, help="per-step position noise sigma, m (default 0.2)")
    p.add_argument(
        "--min-visible-future",
        type=float,
        default=0.0,
        help="drop scenes with a smaller visible FPV future fraction (default 0.0 = keep all)",
    )
    p.set_defaults(func=cmd_gen_data)


def cmd_gen_data(args) -> int:
    cfg = GenConfig(
        branches=args.branches,
        t_obs=args.t_obs,
        t_pred=args.t_pred,
        noise=args.noise,
    )
    samples = [generate_synthetic_scene(args.seed + i, cfg) for i in range(args.count)]
    if args.min_visible_future > 0:
        samples = filter_unqualified(samples, args.min_visible_future)
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} scenes to {args.out}")
    return 0


def _add_train(sub):
    p = sub.add_parser("train", help="train a model on a scene dataset")
    p.add_argument("--data", required=True, help="dataset JSONL")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--history", help="training-history JSON output path")
    p.add_argument("--epochs", type=int, help="override: training epochs")
    p.add_argument("--seed", type=int, help="override: global seed")
    p.add_argument("--batch-size", type=int, help="override: batch size")
    p.add_argument("--learning-rate", type=float, help="override: Adam step size")
    p.add_argument("--beta", type=float, help="override: random mask probability")
    p.add_argument("--no-que", action="store_true", help="disable shared queries (single-view ablation)")
    p.add_argument("--no-rm", action="store_true", help="disable the random mask")
    p.add_argument("--no-ca", action="store_true", help="disable cross-view attention")
    p.set_defaults(func=cmd_train)


def cmd_train(args) -> int:
    overrides = {}
    for key, name in (
        ("epochs", "epochs"),
        ("seed", "seed"),
        ("batch_size", "batch_size"),
        ("learning_rate", "learning_rate"),
        ("beta", "mask_probability"),
    ):
        value = getattr(args, key)
        if value is not None:
            overrides[name] = value
    if args.no_que:
        overrides["use_shared_queries"] = False
        overrides.setdefault("use_random_mask", False)
    if args.no_rm:
        overrides["use_random_mask"] = False
    if args.no_ca:
        overrides["use_cross_attention"] = False

    if args.config:
        cfg = TrainConfig.from_json_file(args.config, overrides)
    else:
        cfg = TrainConfig.from_dict(overrides)
    samples = load_dataset(args.data)
    run_training(samples, cfg, checkpoint_path=args.out, history_path=args.history)
    print(f"wrote checkpoint to {args.out}")
    return 0


def _add_eval(sub):
    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="JSON report output path")
    p.set_defaults(func=cmd_eval)


def cmd_eval(args) -> int:
    model, _ = load_model(args.checkpoint)
    samples = load_dataset(args.data)
    report = evaluate(samples, model)
    report.save(args.out)
    print(json.dumps(report.to_dict()))
    return 0


def _add_predict(sub):
    p = sub.add_parser("predict", help="dump per-sample predictions (JSONL)")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, help="predict only the first N samples")
    p.set_defaults(func=cmd_predict)


def cmd_predict(args) -> int:
    model, _ = load_model(args.checkpoint)
    samples = load_dataset(args.data)
    if args.limit is not None:
        samples = samples[: args.limit]
    with open(args.out, "w") as fh:
        for sample in samples:
            prep = prepare_sample(sample, model.cfg)
            out = model.predict(prep)
            cam = sample.camera
            scale = np.array([cam.image_width, cam.image_height], dtype=float)
            bev_world = [
                from_absolute_frame(
                    np.concatenate([t, np.zeros((len(t), 1))], axis=1), sample.frame
                )[:, :2].tolist()
                for t in out["bev"]["trajectories"]
            ]
            fpv_px = [
                (t * scale).tolist() if ok else None
                for t, ok in zip(out["fpv"]["trajectories"], out["fpv"]["evaluable"])
            ]
            record = {
                "goals": out["bev"]["goal_indices"],
                "goal_points": out["bev"]["goal_points"].tolist(),
                "bev": bev_world,
                "fpv": fpv_px,
                "heatmap": {
                    "candidates": out["candidates"].tolist(),
                    "scores": out["heatmaps"]["bev"].tolist(),
                },
            }
            fh.write(json.dumps(record) + "\n")
    print(f"wrote predictions to {args.out}")
    return 0


def _add_plot(sub):
    p = sub.add_parser("plot", help="render BEV + FPV panels per sample to PNG")
    p.add_argument("--data", required=True)
    p.add_argument("--predictions", help="predict dump JSONL to overlay")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--limit", type=int, help="plot only the first N samples")
    p.set_defaults(func=cmd_plot)


def cmd_plot(args) -> int:
    from .plotting import render_sample  # deferred: pulls in matplotlib

    samples = load_dataset(args.data)
    predictions: list[dict | None] = [None] * len(samples)
    if args.predictions:
        with open(args.predictions) as fh:
            loaded = [json.loads(line) for line in fh if line.strip()]
        predictions[: len(loaded)] = loaded
    if args.limit is not None:
        samples = samples[: args.limit]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for i, sample in enumerate(samples):
        render_sample(
            sample,
            predictions[i],
            out_dir / f"sample_{i:04d}_bev.png",
            out_dir / f"sample_{i:04d}_fpv.png",
        )
        count += 2
    print(f"wrote {count} images to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossview",
        description="Cross-view (BEV + FPV) trajectory prediction on synthetic driving scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen_data(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_predict(sub)
    _add_plot(sub)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # single-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
