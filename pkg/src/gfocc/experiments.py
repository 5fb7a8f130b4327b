"""Fitting, training, evaluation and benchmarking drivers behind the CLI."""

from __future__ import annotations

import json
import math
import resource
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .config import RunConfig
from .core import DESK_GRID, FULL_GRID, GaussianSet, GridSpec, SemanticGrid
from .diff.checkpoint import read_checkpoint, write_checkpoint
from .diff.optim import AdamState, adam_step, lr_schedule
from .diff.tensor import Tape, backward
from .encoder import encode_modality
from .fusion import fuse
from .losses import ConfusionTable, Metrics, confusion, metrics_from_counts, total_loss
from .refinement import (ConfigError, GaussianTensors, LearnableInit, ModelParams,
                         init_gaussians, init_model, run_pipeline)
from .scenes import SceneBundle, SceneSpec, gen_scene, load_bundle
from .splatting import splat, splat_grid, splat_occupancy, splat_occupancy_dense


class NumericError(RuntimeError):
    """Non-finite loss or gradient during optimization."""


def _check_finite(loss: float, step: int, where: str, detail: str = "") -> None:
    if not math.isfinite(loss):
        raise NumericError(f"{where}: non-finite loss {loss} at step {step}{detail}")


# direct fitting ------------------------------------------------------------

def fit_init(bundle: SceneBundle, count: int, cfg: RunConfig) -> GaussianSet:
    """Initial Gaussians for direct fitting: point-sampled (or uniform) means."""
    fc = cfg.fit
    rng = np.random.default_rng(cfg.pipeline.seed)
    spec = bundle.spec
    if fc.init == "points":
        if len(bundle.points) == 0:
            raise ConfigError("points initialization needs a scene with surface points")
        idx = rng.choice(len(bundle.points), size=count, replace=len(bundle.points) < count)
        means = bundle.points[idx]
    else:
        means = rng.uniform(spec.min_corner, spec.max_corner, size=(count, 3))
    lo, hi = fc.init_scale
    scales = np.exp(rng.uniform(np.log(lo), np.log(hi), size=(count, 3)))
    rots = np.tile([1.0, 0.0, 0.0, 0.0], (count, 1))
    C = cfg.pipeline.num_classes
    return GaussianSet(means, scales, rots, np.full(count, fc.init_opacity),
                       np.zeros((count, C)), np.zeros((count, cfg.pipeline.width)))


def scene_loss(g: GaussianTensors, gt_labels, spec: GridSpec, cfg: RunConfig):
    alpha, cp = splat(g.means, g.scales, g.rotations, g.opacities, g.logits, spec, cfg.splat)
    return total_loss([(alpha, cp)], gt_labels, cfg.eval.lovasz_classes), alpha, cp


def evaluate_loss(gs: GaussianSet, bundle: SceneBundle, cfg: RunConfig) -> float:
    """Loss of a fixed Gaussian set against a scene, without recording gradients."""
    loss, _, _ = scene_loss(GaussianTensors.from_set(gs), bundle.gt.labels, bundle.spec, cfg)
    return loss.item()


@dataclass
class FitResult:
    gaussians: GaussianSet
    grid: SemanticGrid
    metrics: Metrics
    losses: list
    seconds: float


def fit(bundle: SceneBundle, count: int, steps: int, cfg: RunConfig,
        log: Optional[Callable[[dict], None]] = None,
        initial: Optional[GaussianSet] = None) -> FitResult:
    """Optimize Gaussian parameters directly against the scene labels.

    Adam on means, log-scales, raw quaternions, opacity logits and class
    logits; no weight decay. The first logged loss is that of the
    initialization.
    """
    t0 = time.perf_counter()
    gs0 = initial if initial is not None else fit_init(bundle, count, cfg)
    leaves = LearnableInit.from_set(gs0)
    params = {k: v for k, v in leaves.parameters("fit").items() if not k.endswith("queries")}
    state = AdamState(lr=cfg.fit.lr, weight_decay=0.0, beta1=cfg.optim.beta1,
                      beta2=cfg.optim.beta2, eps=cfg.optim.eps)
    gt, spec = bundle.gt.labels, bundle.spec
    losses = []
    for step in range(steps + 1):
        for p in params.values():
            p.zero_grad()
        with Tape() as tape:
            g, _ = leaves.tensors()
            loss, alpha, cp = scene_loss(g, gt, spec, cfg)
        value = loss.item()
        _check_finite(value, step, "fit")
        losses.append(value)
        lr = lr_schedule(step, cfg.fit.warmup_steps, max(steps, 1), cfg.fit.lr)
        if log is not None:
            log({"step": step, "lr": lr, "loss": value})
        if step == steps:
            break
        backward(tape, loss)
        adam_step(state, params, lr=lr)
    g, _ = leaves.tensors()
    final = g.to_set(np.zeros((len(gs0), gs0.channel_width)))
    grid = splat_grid(final, spec, cfg.splat)
    metrics = metrics_from_counts(confusion(grid.labels, gt, cfg.pipeline.num_classes),
                                  cfg.eval.miou_mode)
    return FitResult(final, grid, metrics, losses, time.perf_counter() - t0)


# pipeline training ---------------------------------------------------------

def list_scene_dirs(root) -> list:
    root = Path(root)
    if (root / "manifest.json").exists() and (root / "gt.gvox").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "gt.gvox").exists())
    if not dirs:
        raise FileNotFoundError(f"no scene bundles under {root}")
    return dirs


def load_scenes(root) -> list:
    return [load_bundle(d) for d in list_scene_dirs(root)]


def split_scenes(bundles: list, heldout: int):
    if heldout >= len(bundles):
        raise ConfigError(f"data.heldout={heldout} leaves no training scenes "
                          f"out of {len(bundles)}")
    if heldout == 0:
        return list(bundles), []
    return list(bundles[:-heldout]), list(bundles[-heldout:])


def _initial_set(model: ModelParams, bundle: SceneBundle) -> Optional[GaussianSet]:
    cfg = model.config
    if model.init is not None:
        return None
    return init_gaussians(cfg, bundle.spec, bundle.points,
                          np.random.default_rng([cfg.seed, 2]))


def forward_scene(model: ModelParams, bundle: SceneBundle, cfg: RunConfig):
    out = run_pipeline(bundle.pyramids, model, bundle.spec, cfg.splat,
                       initial=_initial_set(model, bundle))
    loss, parts = total_loss(out.blocks, bundle.gt.labels, cfg.eval.lovasz_classes,
                             return_parts=True)
    return out, loss, parts


def predict(model: ModelParams, bundle: SceneBundle, cfg: RunConfig) -> SemanticGrid:
    out = run_pipeline(bundle.pyramids, model, bundle.spec, cfg.splat,
                       initial=_initial_set(model, bundle))
    return out.blocks[-1].grid(bundle.spec, cfg.splat)


def evaluate_grids(preds, gts, num_classes: int, mode: str = "present"):
    """Per-scene metrics plus the micro-averaged aggregate (pooled counts)."""
    tables = [confusion(p, g, num_classes) for p, g in zip(preds, gts)]
    per_scene = [metrics_from_counts(t, mode) for t in tables]
    total = ConfusionTable(num_classes)
    for t in tables:
        total = total + t
    return metrics_from_counts(total, mode), per_scene


def evaluate_model(model: ModelParams, bundles, cfg: RunConfig):
    preds = [predict(model, b, cfg).labels for b in bundles]
    return evaluate_grids(preds, [b.gt.labels for b in bundles], cfg.pipeline.num_classes,
                          cfg.eval.miou_mode)


def no_decay_names(model: ModelParams) -> set:
    return {k for k in model.parameters() if k.startswith("init.")}


def checkpoint_tensors(model: ModelParams, state: Optional[AdamState]) -> dict:
    out = {k: v.values for k, v in model.parameters().items()}
    if state is not None:
        out["adam.step"] = np.array([state.step], dtype=np.float64)
        for k in state.m:
            out[f"adam.m.{k}"] = state.m[k]
            out[f"adam.v.{k}"] = state.v[k]
    return out


def save_model(path, model: ModelParams, state: Optional[AdamState] = None) -> None:
    write_checkpoint(path, checkpoint_tensors(model, state))


def load_model(path, cfg: RunConfig, spec: GridSpec, state: Optional[AdamState] = None):
    """Rebuild the model from config and overwrite its weights from a checkpoint."""
    tensors = read_checkpoint(path)
    model = init_model(cfg.pipeline, spec)
    params = model.parameters()
    missing = [k for k in params if k not in tensors]
    if missing:
        raise ConfigError(f"{path}: checkpoint lacks {len(missing)} tensors, e.g. {missing[0]} "
                          "(config does not match the checkpoint)")
    for k, p in params.items():
        if tensors[k].shape != p.shape:
            raise ConfigError(f"{path}: {k} has shape {tensors[k].shape}, expected {p.shape}")
        p.values[...] = tensors[k]
    if state is not None and "adam.step" in tensors:
        state.step = int(tensors["adam.step"][0])
        for k in params:
            if f"adam.m.{k}" in tensors:
                state.m[k] = tensors[f"adam.m.{k}"].astype(np.float64)
                state.v[k] = tensors[f"adam.v.{k}"].astype(np.float64)
    return model


@dataclass
class TrainResult:
    model: ModelParams
    state: AdamState
    log: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    seconds: float = 0.0

    def smoothed(self, window: int) -> np.ndarray:
        tot = np.array([r["total"] for r in self.log])
        if len(tot) < window:
            window = max(len(tot), 1)
        return np.convolve(tot, np.ones(window) / window, mode="valid")


def scene_order(n: int, steps: int, seed: int) -> np.ndarray:
    """Epoch-wise shuffled scene indices, deterministic in the seed."""
    rng = np.random.default_rng([seed, 3])
    epochs = -(-steps // max(n, 1)) + 1
    return np.concatenate([rng.permutation(n) for _ in range(epochs)])


def train(train_set: list, cfg: RunConfig, heldout: list = (), out_dir=None,
          resume=None, steps: Optional[int] = None,
          log: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train all block parameters (and learnable initial Gaussians) over scenes.

    One scene per step, each with its own tape. With ``out_dir`` a JSON-lines
    log, the final checkpoint and the config are written there. A non-finite
    loss stops training after saving the last good weights.
    """
    if not train_set:
        raise ConfigError("training needs at least one scene")
    t0 = time.perf_counter()
    spec = train_set[0].spec
    oc = cfg.optim
    state = AdamState(lr=oc.lr, beta1=oc.beta1, beta2=oc.beta2, eps=oc.eps,
                      weight_decay=oc.weight_decay)
    model = (load_model(resume, cfg, spec, state) if resume is not None
             else init_model(cfg.pipeline, spec))
    params = model.parameters()
    skip_decay = no_decay_names(model)
    total_steps = oc.steps if steps is None else steps
    order = scene_order(len(train_set), oc.steps + 1, cfg.pipeline.seed)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        log_fh = open(out / "train_log.jsonl", "a" if resume is not None else "w")
    result = TrainResult(model, state)
    first = state.step
    try:
        for step in range(first, first + total_steps):
            bundle = train_set[order[step % len(order)]]
            for p in params.values():
                p.zero_grad()
            with Tape() as tape:
                _, loss, parts = forward_scene(model, bundle, cfg)
            value = loss.item()
            if not math.isfinite(value):
                if out is not None:
                    save_model(out / "last_good.gfwt", model, state)
                raise NumericError(f"train: non-finite loss {value} at step {step}; last good "
                                   f"weights saved" + (f" to {out / 'last_good.gfwt'}" if out
                                                       else ""))
            backward(tape, loss)
            lr = lr_schedule(step, oc.warmup_steps, oc.steps, oc.lr)
            rec = {"step": step, "lr": lr, "scene": int(order[step % len(order)]),
                   "blocks": [{"lovasz": lz, "bce": bce} for lz, bce in parts],
                   "total": value}
            result.log.append(rec)
            if log_fh is not None and step % cfg.eval.log_every == 0:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if log is not None:
                log(rec)
            adam_step(state, params, lr=lr, no_decay=skip_decay)
            every = cfg.eval.eval_every
            if heldout and every and (step + 1) % every == 0:
                agg, _ = evaluate_model(model, heldout, cfg)
                ev = {"step": step + 1, "iou": agg.iou, "miou": agg.miou}
                result.evals.append(ev)
                if log_fh is not None:
                    log_fh.write(json.dumps({"eval": ev}, sort_keys=True) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None:
        save_model(out / "model.gfwt", model, state)
    result.seconds = time.perf_counter() - t0
    return result


# modality comparison -------------------------------------------------------

def occlusion_scenes(count: int, seed: int) -> list:
    """Occlusion-preset scenes with seeds derived from ``seed``."""
    from .scenes import occlusion_preset

    base = occlusion_preset(SceneSpec())
    return [gen_scene(SceneSpec.from_dict({**base.to_dict(), "seed": 1000 * seed + i}))
            for i in range(count)]


def modality_comparison(cfg: RunConfig, seeds=(0, 1, 2), scenes: int = 12,
                        modality_sets=(("camera",), ("camera", "lidar_bev")),
                        log: Optional[Callable[[dict], None]] = None) -> dict:
    """Held-out mIoU per modality set on occlusion-preset scenes, same budget each.

    Every seed draws its own scenes and model initialization; the report
    carries per-seed values and the median over seeds.
    """
    runs = {"+".join(m): [] for m in modality_sets}
    for seed in seeds:
        bundles = occlusion_scenes(scenes, seed)
        tr, ho = split_scenes(bundles, cfg.data.heldout)
        for mods in modality_sets:
            c = cfg.with_overrides(pipeline={"modalities": list(mods), "seed": seed},
                                   eval={"eval_every": 0})
            res = train(tr, c, ho)
            agg, _ = evaluate_model(res.model, ho, c)
            entry = {"seed": seed, "iou": agg.iou, "miou": agg.miou, "seconds": res.seconds}
            runs["+".join(mods)].append(entry)
            if log is not None:
                log({"modalities": list(mods), **entry})
    return {name: {"runs": r, "median_miou": statistics.median(e["miou"] for e in r),
                   "median_iou": statistics.median(e["iou"] for e in r)}
            for name, r in runs.items()}


# benchmarking --------------------------------------------------------------

BENCH_PRESETS = {
    "full": {"grid": FULL_GRID, "gaussians": 6400, "width": 128, "repeats": 5},
    "desk": {"grid": DESK_GRID, "gaussians": 512, "width": 64, "repeats": 5},
    "tiny": {"grid": GridSpec((-8.0, -8.0, -2.0), 0.5, (32, 32, 8)), "gaussians": 128,
             "width": 32, "repeats": 3},
}


def _timed(fn, repeats: int) -> list:
    out = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        out.append((time.perf_counter() - t) * 1e3)
    return out


def bench_gaussians(spec: GridSpec, count: int, seed: int = 0) -> GaussianSet:
    """Scene-like Gaussians: means uniform in the extent, scales 0.25-1 m, random rotations."""
    rng = np.random.default_rng(seed)
    means = rng.uniform(spec.min_corner, spec.max_corner, size=(count, 3))
    scales = np.exp(rng.uniform(np.log(0.25), np.log(1.0), size=(count, 3)))
    q = rng.normal(size=(count, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(means, scales, q, rng.uniform(0.1, 0.9, count),
                       rng.normal(size=(count, 17)), np.zeros((count, 1)))


def bench(preset: str = "desk", repeats: Optional[int] = None, seed: int = 0,
          stages=("splat_dense", "splat_culled", "encoder", "fusion", "block")) -> dict:
    """Median wall-clock (ms) per pipeline stage on a fixed preset.

    Each stage runs once to warm up (JIT compilation) and then ``repeats``
    timed times. Dense splatting shares the culled kernel, so it skips the
    warm-up run.
    """
    if preset not in BENCH_PRESETS:
        raise ConfigError(f"unknown bench preset {preset!r}; choose from {sorted(BENCH_PRESETS)}")
    pre = BENCH_PRESETS[preset]
    spec, P, D = pre["grid"], pre["gaussians"], pre["width"]
    repeats = repeats or pre["repeats"]
    gs = bench_gaussians(spec, P, seed)
    cfg = RunConfig().with_overrides(pipeline={"blocks": 1, "gaussian_count": P, "width": D,
                                               "seed": seed})
    scene = SceneSpec(seed=seed, grid=spec, object_count=(0, 0), points_per_scene=0,
                      camera_rig={"count": 4, "image_dims": [64, 128]})
    bundle = gen_scene(scene)
    model = init_model(cfg.pipeline, spec)
    blk = model.blocks[0]
    g, Q = model.init.tensors()

    def run_encoder():
        for m in cfg.pipeline.ordered_modalities:
            encode_modality(g.means, g.scales, g.rotations, Q, bundle.pyramids[m], blk.encoders[m])

    feats = [encode_modality(g.means, g.scales, g.rotations, Q, bundle.pyramids[m],
                             blk.encoders[m]) for m in cfg.pipeline.ordered_modalities]

    def run_block():
        with Tape() as tape:
            out, loss, _ = forward_scene(model, bundle, cfg)
        backward(tape, loss)

    fns = {
        "splat_dense": lambda: splat_occupancy_dense(gs, spec, cfg.splat),
        "splat_culled": lambda: splat_occupancy(gs, spec, cfg.splat),
        "encoder": run_encoder,
        "fusion": lambda: fuse(feats, g.means, blk.fusion),
        "block": run_block,
    }
    # compile the splat kernel on a small problem; the dense stage then needs no warm-up run
    splat_occupancy(gs.take(np.arange(min(P, 4))), spec, cfg.splat)
    entries = {}
    for name in stages:
        fn = fns[name]
        if name != "splat_dense":
            fn()
        samples = _timed(fn, repeats)
        entries[name] = {"median_ms": statistics.median(samples),
                         "min_ms": min(samples), "samples_ms": samples}
    report = {
        "preset": preset,
        "grid": spec.to_dict(),
        "gaussians": P,
        "width": D,
        "repeats": repeats,
        "entries": entries,
        "peak_rss_mb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0,
        "grid_bytes_estimate": int(spec.num_voxels * (1 + 17) * 8),
    }
    if "splat_dense" in entries and "splat_culled" in entries:
        report["cull_speedup"] = (entries["splat_dense"]["median_ms"]
                                  / entries["splat_culled"]["median_ms"])
    return report


def bench_table(report: dict) -> str:
    lines = [f"preset {report['preset']}: P={report['gaussians']} D={report['width']} "
             f"grid={tuple(report['grid']['dims'])} repeats={report['repeats']}",
             f"{'stage':<14}{'median ms':>12}{'min ms':>12}"]
    for name, e in report["entries"].items():
        lines.append(f"{name:<14}{e['median_ms']:>12.2f}{e['min_ms']:>12.2f}")
    if "cull_speedup" in report:
        lines.append(f"cull speedup {report['cull_speedup']:.1f}x")
    lines.append(f"peak RSS {report['peak_rss_mb']:.0f} MB")
    return "\n".join(lines)


__all__ = [
    "NumericError", "fit", "fit_init", "FitResult", "evaluate_loss", "train", "TrainResult",
    "evaluate_model", "evaluate_grids", "predict", "save_model", "load_model", "load_scenes",
    "split_scenes", "list_scene_dirs", "bench", "bench_table", "BENCH_PRESETS",
    "forward_scene", "scene_loss", "modality_comparison", "occlusion_scenes",
]
