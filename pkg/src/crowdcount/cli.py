"""Command-line workflows: density generation, synthetic data, training,
inference, evaluation, cross-dataset comparison, and benchmarking.

Exit codes: 0 success, 1 user error (bad flags, unreadable or malformed
inputs), 2 internal error (training divergence, unexpected failures).
Every subcommand prints its resolved configuration before doing work,
and report-writing subcommands render companion figures next to their
CSV outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import data, density, evaluation, figures, netpbm, training
from . import model as model_mod
from .errors import CrowdCountError, DivergenceError
from .evaluation import DEFAULT_SCHEME

DENSITY_PRESETS = {"high": (300, 3000), "medium": (10, 600)}
BENCH_DEFAULT_SCALES = "1.0,0.9,0.8,0.7,0.6,0.5,0.4,0.3"


class _Parser(argparse.ArgumentParser):
    """argparse with user errors mapped to exit code 1 (default is 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _echo_config(pairs: dict) -> None:
    print("config: " + " ".join(f"{k}={v}" for k, v in pairs.items()))


def _parse_scales(text: str) -> tuple[float, ...]:
    parts = [p for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty scale list")
    return tuple(float(p) for p in parts)


def _parse_dims(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ValueError(f"dims must look like 128x96, got {text!r}")
    w, h = int(parts[0]), int(parts[1])
    return w, h


def _load_image(path) -> np.ndarray:
    raw = netpbm.read_image(path)
    arr = raw[None, :, :] if raw.ndim == 2 else raw.transpose(2, 0, 1)
    return arr.astype(np.float32) / 255.0


def _figure_path(report_path, suffix: str) -> Path:
    p = Path(report_path)
    return p.with_name(p.stem + suffix)


def _cmd_gen_density(args) -> int:
    _echo_config(
        {
            "annotations": args.annotations,
            "out": args.out,
            "stride": args.stride,
            "seed": "none",
        }
    )
    sample = data.load_annotations(args.annotations)
    sample.validate()
    full = density.render_adaptive(sample.height, sample.width, sample.heads)
    dmap = density.block_sum_downsample(full, args.stride)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    density.save_dmap(dmap, out)
    preview = out.with_suffix(".pgm")
    if preview == out:
        preview = out.with_name(out.stem + "_preview.pgm")
    density.save_density_pgm(dmap, preview)
    print(f"heads={len(sample.heads)}")
    print(f"map_sum={dmap.count():.4f}")
    print(f"wrote {out} and {preview}")
    return 0


def _cmd_synth(args) -> int:
    w, h = args.dims
    _echo_config(
        {
            "out": args.out,
            "images": args.images,
            "seed": args.seed,
            "density": args.density,
            "dims": f"{w}x{h}",
        }
    )
    count_range = DENSITY_PRESETS[args.density]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ann_names: list[str] = []
    for i in range(args.images):
        sample = data.synth_scene(args.seed + i, dims=(h, w), count_range=count_range)
        ann_name = f"{sample.id}.txt"
        data.save_annotations(sample, out / ann_name)
        ann_names.append(ann_name)
    manifest_path = out / "manifest.txt"
    data.write_manifest(manifest_path, ann_names, density=args.density)
    print(f"wrote {args.images} annotated images and {manifest_path}")
    return 0


def _cmd_train(args) -> int:
    config = training.TrainConfig.from_file(args.config)
    _echo_config(
        {
            "manifest": args.manifest,
            "out": args.out,
            "augmentation": args.augmentation,
            "resume": args.resume or "-",
            **dataclasses.asdict(config),
        }
    )
    manifest = data.load_manifest(args.manifest)
    samples = [data.load_annotations(p) for p in manifest.sample_paths]
    if len(samples) >= 10:
        train_images, val_images = data.train_val_split(samples, seed=config.seed)
    else:
        train_images, val_images = samples, []
    train_set = data.build_training_set(train_images, scheme=args.augmentation)
    print(
        f"{len(train_images)} training images -> {len(train_set)} samples "
        f"({args.augmentation}), {len(val_images)} validation images"
    )

    resume_state = None
    if args.resume:
        model = model_mod.load_checkpoint(args.resume)
        resume_state = training.load_train_state(
            Path(args.resume).with_suffix(".state"), model
        )
        if resume_state.iteration >= config.total_iters:
            print(
                f"checkpoint already at iteration {resume_state.iteration} "
                f">= total_iters {config.total_iters}; nothing to do"
            )
            return 0
    else:
        model = model_mod.FcnModel.initialize(std=config.init_std, seed=config.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    targets = training.generate_targets(
        train_set, model.spec.output_stride, cache_dir=out / "targets"
    )
    log_path = out / "train_log.csv"
    model, _ = training.train(
        model,
        train_set,
        val_images,
        config,
        targets=targets,
        log_path=log_path,
        checkpoint_dir=out / "checkpoints",
        resume=resume_state,
    )
    reports = training.read_loss_log(log_path)
    figure = figures.plot_loss_curve(reports, out / "loss_curve.png")
    final = out / "checkpoints" / "final.fcnc"
    print(f"final checkpoint: {final}")
    print(f"loss log: {log_path}")
    print(f"loss curve: {figure}")
    if reports and reports[-1].val_mae is not None:
        print(
            f"final validation MAE {reports[-1].val_mae:.4f} "
            f"MSE {reports[-1].val_mse:.4f}"
        )
    return 0


def _cmd_infer(args) -> int:
    _echo_config(
        {
            "ckpt": args.ckpt,
            "image": args.image,
            "scales": ",".join(f"{s:g}" for s in args.scales),
            "heatmap": args.heatmap or "-",
            "seed": "none",
        }
    )
    model = model_mod.load_checkpoint(args.ckpt)
    pixels = _load_image(args.image)
    count, per_scale = evaluation.multiscale_count(model, pixels, args.scales)
    for s, c in zip(args.scales, per_scale):
        print(f"scale {s:g}: {c:.4f}")
    print(f"mean: {count:.4f}")
    if args.heatmap:
        heatmap_path = Path(args.heatmap)
        heatmap_path.parent.mkdir(parents=True, exist_ok=True)
        dmap = model_mod.forward(model, pixels)
        if heatmap_path.suffix == ".png":
            figures.plot_density_heatmap(dmap, heatmap_path)
        elif heatmap_path.suffix == ".pgm":
            density.save_density_pgm(dmap, heatmap_path)
        else:
            density.save_dmap(dmap, heatmap_path)
        print(f"heatmap: {heatmap_path}")
    return 0


def _cmd_eval(args) -> int:
    _echo_config(
        {
            "ckpt": args.ckpt,
            "manifest": args.manifest,
            "scales": ",".join(f"{s:g}" for s in args.scales),
            "report": args.report,
            "threads": args.threads or 1,
            "seed": "none",
        }
    )
    model = model_mod.load_checkpoint(args.ckpt)
    manifest = data.load_manifest(args.manifest)
    report = evaluation.evaluate(model, manifest, args.scales, threads=args.threads)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_eval_csv(report, report_path)
    figure = figures.plot_eval_scatter(report, _figure_path(report_path, "_scatter.png"))
    print(f"MAE={report.mae:.4f}")
    print(f"MSE={report.mse:.4f}")
    print(f"report: {report_path}")
    print(f"figure: {figure}")
    for note in report.notes:
        print(f"warning: {note}", file=sys.stderr)
    return 0


def _cmd_xeval(args) -> int:
    _echo_config(
        {
            "ckpt": args.ckpt,
            "source": args.source,
            "target_manifest": args.target_manifest,
            "baseline": args.baseline,
            "report": args.report,
            "threads": args.threads or 1,
            "seed": "none",
        }
    )
    model = model_mod.load_checkpoint(args.ckpt)
    baseline = evaluation.read_eval_csv(args.baseline)
    manifest = data.load_manifest(args.target_manifest)
    scheme = baseline.scheme or DEFAULT_SCHEME
    cross, _ = evaluation.cross_evaluate(
        model, args.source, manifest, baseline, scheme=scheme, threads=args.threads
    )
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_cross_csv(cross, report_path)
    figure = figures.plot_cross_domain(cross, _figure_path(report_path, "_bars.png"))
    print(cross.summary())
    print(f"report: {report_path}")
    print(f"figure: {figure}")
    return 0


def _cmd_bench(args) -> int:
    _echo_config(
        {
            "ckpt": args.ckpt,
            "manifest": args.manifest,
            "scales": ",".join(f"{s:g}" for s in args.scales),
            "report": args.report,
            "seed": "none",
        }
    )
    model = model_mod.load_checkpoint(args.ckpt)
    manifest = data.load_manifest(args.manifest)
    points = evaluation.speed_accuracy_sweep(model, manifest, args.scales)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_sweep_csv(points, report_path)
    figure = figures.plot_tradeoff(points, _figure_path(report_path, "_curve.png"))
    for p in points:
        print(
            f"scale {p.scale:g}: MAE {p.mae:.2f} MSE {p.mse:.2f} "
            f"mean {p.mean_latency_ms:.1f} ms flops {p.flops:.4g}"
        )
    print(f"report: {report_path}")
    print(f"figure: {figure}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="crowdcount",
        description="Crowd counting via density-map regression with a small FCN.",
    )
    sub = parser.add_subparsers(dest="command")
    parser.set_defaults(func=None)

    p = sub.add_parser("gen-density", parents=[], help="render a density map")
    p.add_argument("--annotations", required=True, help="annotation .txt file")
    p.add_argument("--out", required=True, help="output .dmap path")
    p.add_argument("--stride", type=int, default=1, help="block-sum downsample factor")
    p.set_defaults(func=_cmd_gen_density)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--images", type=int, required=True, help="number of images")
    p.add_argument("--seed", type=int, required=True, help="base RNG seed")
    p.add_argument(
        "--density", choices=sorted(DENSITY_PRESETS), required=True,
        help="crowd density preset",
    )
    p.add_argument(
        "--dims", type=_parse_dims, default="128x128", help="image size WxH"
    )
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--manifest", required=True, help="training manifest")
    p.add_argument("--config", required=True, help="key=value training config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument(
        "--augmentation",
        choices=sorted(data.AUGMENTATION_SCHEMES),
        default="quadrants",
        help="training-set expansion scheme",
    )
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="estimate the count of one image")
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--image", required=True, help="PGM/PPM image")
    p.add_argument(
        "--scales", type=_parse_scales, default=DEFAULT_SCHEME,
        help="comma-separated scale factors",
    )
    p.add_argument(
        "--heatmap", default=None,
        help="optional density output (.dmap, .pgm, or .png)",
    )
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="evaluate a model on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--scales", type=_parse_scales, default=DEFAULT_SCHEME)
    p.add_argument("--report", required=True, help="output CSV path")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("xeval", help="cross-dataset evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", required=True, help="source-domain name")
    p.add_argument("--target-manifest", required=True)
    p.add_argument("--baseline", required=True, help="target's in-domain eval CSV")
    p.add_argument("--report", required=True, help="output CSV path")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_xeval)

    p = sub.add_parser("bench", help="speed-accuracy sweep over scales")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--scales", type=_parse_scales, default=BENCH_DEFAULT_SCALES)
    p.add_argument("--report", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.func is None:
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CrowdCountError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # safety net: anything unexpected is internal
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
