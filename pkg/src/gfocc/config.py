"""Run configuration: one JSON document with pipeline, splat, optim, fit, data and eval sections.

Unknown keys anywhere are rejected; every field has a default, so ``{}`` is a
valid config. Defaults follow the full-scale model (4 blocks, 6400 Gaussians,
128 channels, AdamW peaking at 2e-4 after 500 warmup steps, decay 0.01).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .refinement import ConfigError, PipelineConfig
from .splatting import SplatConfig


@dataclass
class OptimConfig:
    lr: float = 2e-4
    warmup_steps: int = 500
    steps: int = 2000
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("optim.lr must be positive")
        if self.steps < 0 or self.warmup_steps < 0:
            raise ConfigError("optim.steps and optim.warmup_steps must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("optim.beta1/beta2 must lie in [0, 1)")


@dataclass
class FitConfig:
    """Direct Gaussian fitting (no encoder or fusion)."""

    lr: float = 0.05
    warmup_steps: int = 10
    init: str = "points"  # points | random
    init_opacity: float = 0.5
    init_scale: list = field(default_factory=lambda: [0.5, 2.0])

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("fit.lr must be positive")
        if self.init not in ("points", "random"):
            raise ConfigError(f"fit.init must be 'points' or 'random', got {self.init!r}")
        if not 0 < self.init_opacity < 1:
            raise ConfigError("fit.init_opacity must lie in (0, 1)")
        lo, hi = self.init_scale
        if not 0 < lo <= hi:
            raise ConfigError("fit.init_scale must be 0 < min <= max")


@dataclass
class DataConfig:
    scenes: str = ""
    heldout: int = 4  # last N scenes of the sorted list are held out
    out: str = "runs/out"

    def validate(self):
        if self.heldout < 0:
            raise ConfigError("data.heldout must be >= 0")


@dataclass
class EvalConfig:
    miou_mode: str = "present"  # present | literal
    lovasz_classes: str = "present"  # present | all
    eval_every: int = 100
    log_every: int = 1
    smooth_window: int = 50

    def validate(self):
        if self.miou_mode not in ("present", "literal"):
            raise ConfigError(f"eval.miou_mode must be 'present' or 'literal', got {self.miou_mode!r}")
        if self.lovasz_classes not in ("present", "all"):
            raise ConfigError("eval.lovasz_classes must be 'present' or 'all'")
        if self.eval_every < 0 or self.log_every < 1 or self.smooth_window < 1:
            raise ConfigError("eval.eval_every >= 0, log_every >= 1, smooth_window >= 1")


SECTIONS = {
    "pipeline": PipelineConfig,
    "splat": SplatConfig,
    "optim": OptimConfig,
    "fit": FitConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    splat: SplatConfig = field(default_factory=SplatConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        self.pipeline.validate()
        for sec in (self.optim, self.fit, self.data, self.eval):
            sec.validate()
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pipeline"]["modalities"] = list(self.pipeline.modalities)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        built = {}
        for name, typ in SECTIONS.items():
            sec = doc.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"{name}: expected an object")
            known = {f.name for f in dataclasses.fields(typ)}
            bad = set(sec) - known
            if bad:
                raise ConfigError(f"unknown key(s) in {name}: "
                                  + ", ".join(f"{name}.{k}" for k in sorted(bad)))
            try:
                built[name] = typ(**sec)
            except ConfigError as exc:
                raise ConfigError(f"{name}: {exc}") from None
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from None
        return cls(**built).validate()

    def with_overrides(self, **sections) -> "RunConfig":
        """Copy with per-section field overrides, e.g. ``pipeline={"blocks": 2}``."""
        d = self.to_dict()
        for name, vals in sections.items():
            d.setdefault(name, {}).update(vals)
        return RunConfig.from_dict(d)


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(doc)


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def toy_config() -> RunConfig:
    """Desk-scale training preset: 2 blocks, 256 Gaussians, camera + lidar BEV."""
    return RunConfig().with_overrides(
        pipeline={"blocks": 2, "gaussian_count": 256, "width": 64,
                  "modalities": ["camera", "lidar_bev"]},
        optim={"lr": 2e-3, "warmup_steps": 20, "steps": 400, "weight_decay": 0.01},
        data={"heldout": 4},
        eval={"eval_every": 0, "smooth_window": 50},
    )


__all__ = ["RunConfig", "OptimConfig", "FitConfig", "DataConfig", "EvalConfig", "ConfigError",
           "load_config", "save_config", "toy_config", "SECTIONS"]
