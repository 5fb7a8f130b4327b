"""Command-line entry point: gen-scenes, fit, train, eval, bench.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .core import DomainError, SemanticGrid
from .diff.checkpoint import FormatError
from .refinement import ConfigError
from .scenes import SceneError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _say(msg: str) -> None:
    print(msg, flush=True)


def cmd_gen_scenes(args) -> int:
    from .formats import write_json
    from .scenes import SceneSpec, gen_scene, occlusion_preset, save_bundle

    doc = {}
    if args.spec:
        try:
            doc = json.loads(Path(args.spec).read_text())
        except json.JSONDecodeError as exc:
            raise SceneError(f"{args.spec}: invalid JSON ({exc})") from None
    spec = SceneSpec.from_dict(doc)
    if args.preset == "occlusion":
        spec = occlusion_preset(spec)
    out = _out_dir(args.out)
    names = []
    for i in range(args.count):
        s = SceneSpec.from_dict({**spec.to_dict(), "seed": args.seed + i})
        name = f"scene_{i:04d}"
        save_bundle(gen_scene(s), out / name)
        names.append(name)
        _say(f"wrote {out / name}")
    write_json(out / "manifest.json", {"version": 1, "count": args.count, "seed": args.seed,
                                       "preset": args.preset, "spec": spec.to_dict(),
                                       "scenes": names})
    return EXIT_OK


def cmd_fit(args) -> int:
    from .experiments import fit
    from .formats import write_gaussians, write_gvox, write_json
    from .plotting import plot_label_views, plot_loss
    from .scenes import load_bundle

    cfg = load_config(args.config)
    bundle = load_bundle(args.scene)
    out = _out_dir(args.out)
    log_path = out / "fit_log.jsonl"
    records = []
    with open(log_path, "w") as fh:
        def log(rec):
            records.append(rec)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if rec["step"] % 50 == 0:
                _say(f"step {rec['step']:5d}  loss {rec['loss']:.5f}")

        res = fit(bundle, args.gaussians, args.steps, cfg, log=log)
    write_gaussians(out / "gaussians.gocc", res.gaussians)
    write_gvox(out / "grid.gvox", res.grid, kind=2)
    write_gvox(out / "labels.gvox", SemanticGrid(res.grid.spec, labels=res.grid.labels), kind=0)
    metrics = {**res.metrics.to_dict(), "initial_loss": res.losses[0],
               "final_loss": res.losses[-1], "steps": args.steps, "gaussians": args.gaussians,
               "seconds": res.seconds}
    write_json(out / "metrics.json", metrics)
    plot_loss(records, out / "fit_loss.png", title="direct fit loss")
    plot_label_views(res.grid.labels, bundle.gt.labels, out / "fit_labels.png",
                     cfg.pipeline.num_classes, title=f"IoU {res.metrics.iou:.3f} "
                     f"mIoU {res.metrics.miou:.3f}")
    _say(f"IoU {res.metrics.iou:.4f}  mIoU {res.metrics.miou:.4f}  ({res.seconds:.1f} s)")
    return EXIT_OK


def cmd_train(args) -> int:
    from .experiments import evaluate_model, load_scenes, split_scenes, train
    from .formats import write_json
    from .plotting import plot_loss, plot_per_class

    cfg = load_config(args.config)
    bundles = load_scenes(args.scenes)
    if len(bundles) < 2:
        raise ConfigError(f"train needs at least 2 scenes (train + held-out), found {len(bundles)}")
    heldout = cfg.data.heldout if cfg.data.heldout else 1
    tr, ho = split_scenes(bundles, min(heldout, len(bundles) - 1))
    out = _out_dir(args.out)

    def log(rec):
        if rec["step"] % 50 == 0:
            _say(f"step {rec['step']:5d}  loss {rec['total']:.4f}  lr {rec['lr']:.2e}")

    res = train(tr, cfg, ho, out_dir=out, resume=args.resume, steps=args.steps, log=log)
    agg, per_scene = evaluate_model(res.model, ho, cfg)
    sm = res.smoothed(cfg.eval.smooth_window)
    summary = {"heldout": agg.to_dict(), "per_scene": [m.to_dict() for m in per_scene],
               "train_scenes": len(tr), "heldout_scenes": len(ho), "steps": len(res.log),
               "smoothed_loss_start": float(sm[0]), "smoothed_loss_end": float(sm[-1]),
               "evals": res.evals, "seconds": res.seconds}
    write_json(out / "metrics.json", summary)
    plot_loss(res.log, out / "train_loss.png", cfg.eval.smooth_window)
    plot_per_class(agg.to_dict(), out / "heldout_per_class.png")
    _say(f"held-out IoU {agg.iou:.4f}  mIoU {agg.miou:.4f}  ({res.seconds:.1f} s)")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .experiments import evaluate_grids, load_model, load_scenes, predict
    from .formats import read_gaussians, read_gvox, write_json
    from .plotting import plot_label_views, plot_per_class
    from .splatting import splat_grid

    if args.checkpoint:
        cfg = load_config(args.config or Path(args.checkpoint).with_name("config.json"))
    else:
        cfg = load_config(args.config)
    bundles = load_scenes(args.scenes)
    gts = [b.gt.labels for b in bundles]
    out = _out_dir(args.out)
    if args.checkpoint:
        model = load_model(args.checkpoint, cfg, bundles[0].spec)
        preds = [predict(model, b, cfg).labels for b in bundles]
    else:
        if args.gaussians:
            gs = read_gaussians(args.gaussians)
            preds = [splat_grid(gs, b.spec, cfg.splat).labels for b in bundles]
        else:
            grids = sorted(Path(args.grids).glob("*.gvox")) if Path(args.grids).is_dir() \
                else [Path(args.grids)]
            if len(grids) != len(bundles):
                raise ConfigError(f"{len(grids)} grid files for {len(bundles)} scenes")
            preds = [read_gvox(p, cfg.splat.occupancy_threshold).labels for p in grids]
    agg, per_scene = evaluate_grids(preds, gts, cfg.pipeline.num_classes, cfg.eval.miou_mode)
    report = {**agg.to_dict(), "mode": cfg.eval.miou_mode,
              "per_scene": [m.to_dict() for m in per_scene], "scenes": len(bundles)}
    write_json(out / "metrics.json", report)
    plot_per_class(agg.to_dict(), out / "per_class.png")
    plot_label_views(preds[0], gts[0], out / "labels_scene0.png", cfg.pipeline.num_classes)
    _say(f"IoU {agg.iou:.4f}  mIoU {agg.miou:.4f}  over {len(bundles)} scene(s)")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .experiments import bench, bench_table
    from .formats import write_json
    from .plotting import plot_bench

    report = bench(args.preset, repeats=args.repeats, seed=args.seed)
    out = _out_dir(args.out)
    write_json(out / "bench.json", report)
    table = bench_table(report)
    (out / "bench.txt").write_text(table + "\n")
    plot_bench(report, out / "bench.png")
    _say(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gfocc", description="Semantic Gaussian occupancy toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-scenes", help="generate synthetic scene bundles")
    g.add_argument("--spec", help="scene spec JSON (defaults apply to missing fields)")
    g.add_argument("--preset", choices=("default", "occlusion"), default="default")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scenes)

    f = sub.add_parser("fit", help="fit Gaussians directly to one scene")
    f.add_argument("--scene", required=True)
    f.add_argument("--gaussians", type=int, default=512)
    f.add_argument("--steps", type=int, default=500)
    f.add_argument("--config")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    t = sub.add_parser("train", help="train the block pipeline over a scene set")
    t.add_argument("--scenes", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--steps", type=int, help="number of steps to run (default optim.steps)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate predictions against scene labels")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--gaussians", help="GOCC or JSON Gaussian set")
    src.add_argument("--grids", help="GVOX file or directory (one per scene, sorted)")
    e.add_argument("--scenes", required=True)
    e.add_argument("--config")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time pipeline stages on a fixed preset")
    b.add_argument("--preset", default="desk")
    b.add_argument("--repeats", type=int)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError, SceneError, DomainError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, OSError, ValueError, FloatingPointError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
