"""Gaussian initialization, per-block property heads, and the block loop.

Each block runs encode (per modality) -> fuse -> refine -> splat. The mean is
updated additively by a bounded offset; scale, rotation, opacity and logits
are predicted fresh from the fused queries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import DEFAULT_NUM_CLASSES, GaussianSet, GridSpec, SemanticGrid
from .diff import ops
from .diff.nn import init_mlp, mlp_forward, mlp_parameters
from .diff.tensor import DiffTensor, as_tensor
from .encoder import EncoderParams, FeaturePyramid, encode_modality, init_encoder
from .fusion import MODALITY_ORDER, FusionParams, fuse, init_fusion
from .splatting import SplatConfig, grid_from_tensors, splat

INIT_MODES = ("random", "learnable", "points")
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    blocks: int = 4
    gaussian_count: int = 6400
    width: int = 128
    modalities: tuple = ("camera", "lidar_bev")
    init: str = "learnable"
    seed: int = 0
    num_classes: int = DEFAULT_NUM_CLASSES
    feat_channels: int = 32
    n_refs: int = 4
    n_samples: int = 4
    n_levels: int = 2
    fusion_voxel_size: float = 2.0
    offset_range: float = 2.0
    scale_min: float = 0.05
    scale_max: float = 20.0

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.validate()

    def validate(self) -> None:
        if self.blocks < 1:
            raise ConfigError("blocks must be >= 1")
        if self.gaussian_count < 1:
            raise ConfigError("gaussian_count must be >= 1")
        if not self.modalities:
            raise ConfigError("modalities must be non-empty")
        unknown = set(self.modalities) - set(MODALITY_ORDER)
        if unknown:
            raise ConfigError(f"unknown modalities {sorted(unknown)}")
        if self.init not in INIT_MODES:
            raise ConfigError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        if not 0 < self.scale_min < self.scale_max:
            raise ConfigError("need 0 < scale_min < scale_max")

    @property
    def ordered_modalities(self) -> tuple:
        return tuple(m for m in MODALITY_ORDER if m in self.modalities)


@dataclass
class RefineParams:
    refine_mlp: list  # D -> D -> 11 + C
    offset_range: float = 2.0
    scale_min: float = 0.05
    scale_max: float = 20.0

    def __post_init__(self):
        if not 0 < self.scale_min < self.scale_max:
            raise ValueError("need 0 < scale_min < scale_max")

    @property
    def num_classes(self) -> int:
        return self.refine_mlp[-1].out_dim - 11

    def parameters(self, prefix: str = "refine") -> dict:
        return mlp_parameters(self.refine_mlp, prefix)


def init_refine(rng, width: int, num_classes: int, offset_range=2.0, scale_min=0.05,
                scale_max=20.0, name="refine") -> RefineParams:
    layers = init_mlp(rng, [width, width, 11 + num_classes], out_gain=0.1, name=name)
    bias = layers[-1].bias.values
    bias[3:6] = np.log(np.expm1(1.0))  # softplus -> 1 m
    bias[6] = 1.0  # rotation near identity
    bias[10] = -1.0  # opacity sigmoid(-1) ~ 0.27
    return RefineParams(layers, offset_range, scale_min, scale_max)


@dataclass
class BlockParams:
    encoders: dict  # modality -> EncoderParams
    fusion: FusionParams
    refine: RefineParams

    def parameters(self, prefix: str) -> dict:
        out = {}
        for mod in MODALITY_ORDER:
            if mod in self.encoders:
                out.update(self.encoders[mod].parameters(f"{prefix}.enc.{mod}"))
        out.update(self.fusion.parameters(f"{prefix}.fusion"))
        out.update(self.refine.parameters(f"{prefix}.refine"))
        return out


@dataclass
class LearnableInit:
    """Trainable initial Gaussians in unconstrained coordinates."""

    means: DiffTensor
    log_scales: DiffTensor
    quats: DiffTensor
    opacity_logits: DiffTensor
    logits: DiffTensor
    queries: DiffTensor

    def parameters(self, prefix: str = "init") -> dict:
        return {f"{prefix}.{k}": getattr(self, k) for k in
                ("means", "log_scales", "quats", "opacity_logits", "logits", "queries")}

    def tensors(self):
        g = GaussianTensors(
            self.means, ops.exp(self.log_scales),
            ops.normalize(self.quats, axis=-1, fallback=IDENTITY_QUAT),
            ops.sigmoid(self.opacity_logits), self.logits)
        return g, self.queries

    @classmethod
    def from_set(cls, gs: GaussianSet) -> "LearnableInit":
        a = np.clip(gs.opacities, 1e-6, 1 - 1e-6)
        mk = lambda v, n: DiffTensor(np.array(v), requires_grad=True, name=f"init.{n}")
        return cls(mk(gs.means, "means"), mk(np.log(gs.scales), "log_scales"),
                   mk(gs.rotations, "quats"), mk(np.log(a / (1 - a)), "opacity_logits"),
                   mk(gs.logits, "logits"), mk(gs.queries, "queries"))


@dataclass
class ModelParams:
    blocks: list
    config: PipelineConfig
    init: Optional[LearnableInit] = None

    def parameters(self) -> dict:
        out = {}
        if self.init is not None:
            out.update(self.init.parameters())
        for b, blk in enumerate(self.blocks):
            out.update(blk.parameters(f"block{b}"))
        return out

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))


@dataclass
class GaussianTensors:
    means: DiffTensor
    scales: DiffTensor
    rotations: DiffTensor
    opacities: DiffTensor
    logits: DiffTensor

    @classmethod
    def from_set(cls, gs: GaussianSet) -> "GaussianTensors":
        return cls(DiffTensor(gs.means), DiffTensor(gs.scales), DiffTensor(gs.rotations),
                   DiffTensor(gs.opacities), DiffTensor(gs.logits))

    def to_set(self, queries) -> GaussianSet:
        q = queries.values if isinstance(queries, DiffTensor) else queries
        rot = self.rotations.values.astype(np.float64)
        rot = rot / np.linalg.norm(rot, axis=1, keepdims=True)
        return GaussianSet(self.means.values, self.scales.values, rot,
                           np.clip(self.opacities.values, 0.0, 1.0), self.logits.values, q)


def init_gaussians(cfg: PipelineConfig, spec: GridSpec, points=None,
                   rng: Optional[np.random.Generator] = None) -> GaussianSet:
    """Initial Gaussians and queries.

    Means are uniform in the grid extent (or a uniform subsample of
    ``points`` for points-init; sampled with replacement when there are fewer
    points than Gaussians), scales log-uniform in [0.5, 2] m, identity
    rotation, opacity 0.1, zero logits, queries N(0, 0.02^2).
    """
    rng = rng or np.random.default_rng(cfg.seed)
    P = cfg.gaussian_count
    if cfg.init == "points":
        if points is None or len(points) == 0:
            raise ConfigError("points initialization needs a point cloud")
        pts = np.asarray(points, dtype=np.float64)[:, :3]
        idx = rng.choice(len(pts), size=P, replace=len(pts) < P)
        means = pts[idx]
    else:
        lo = np.asarray(spec.min_corner)
        means = rng.uniform(lo, spec.max_corner, size=(P, 3))
    scales = np.exp(rng.uniform(np.log(0.5), np.log(2.0), size=(P, 3)))
    rots = np.tile(IDENTITY_QUAT, (P, 1))
    opac = np.full(P, 0.1)
    logits = np.zeros((P, cfg.num_classes))
    queries = rng.normal(size=(P, cfg.width)) * 0.02
    return GaussianSet(means, scales, rots, opac, logits, queries)


def init_model(cfg: PipelineConfig, spec: GridSpec, points=None) -> ModelParams:
    rng = np.random.default_rng([cfg.seed, 1])
    blocks = []
    mods = cfg.ordered_modalities
    for b in range(cfg.blocks):
        encs = {m: init_encoder(rng, cfg.width, cfg.feat_channels, cfg.n_refs, cfg.n_samples,
                                cfg.n_levels, name=f"block{b}.enc.{m}") for m in mods}
        fus = init_fusion(rng, cfg.width, len(mods), cfg.fusion_voxel_size,
                          name=f"block{b}.fusion")
        ref = init_refine(rng, cfg.width, cfg.num_classes, cfg.offset_range, cfg.scale_min,
                          cfg.scale_max, name=f"block{b}.refine")
        blocks.append(BlockParams(encs, fus, ref))
    learn = None
    if cfg.init == "learnable":
        learn = LearnableInit.from_set(init_gaussians(cfg, spec, points))
    return ModelParams(blocks, cfg, learn)


def refine_step(g: GaussianTensors, Q, params: RefineParams) -> GaussianTensors:
    """Decode new Gaussian properties from the fused queries."""
    Q = as_tensor(Q)
    C = params.num_classes
    raw = mlp_forward(params.refine_mlp, Q)
    means = ops.add(g.means, ops.mul(ops.tanh(raw[:, 0:3]), params.offset_range))
    scales = ops.clamp(ops.softplus(raw[:, 3:6]), params.scale_min, params.scale_max)
    rots = ops.normalize(raw[:, 6:10], axis=-1, fallback=IDENTITY_QUAT)
    opac = ops.sigmoid(raw[:, 10])
    logits = raw[:, 11:11 + C]
    return GaussianTensors(means, scales, rots, opac, logits)


@dataclass
class BlockOutput:
    gaussians: GaussianTensors
    queries: DiffTensor
    alpha: DiffTensor
    class_probs: DiffTensor

    def grid(self, spec: GridSpec, cfg: SplatConfig) -> SemanticGrid:
        return grid_from_tensors(self.alpha, self.class_probs, spec, cfg)


@dataclass
class PipelineOutput:
    blocks: list = field(default_factory=list)
    input_queries: list = field(default_factory=list)

    def sets(self) -> list:
        return [b.gaussians.to_set(b.queries) for b in self.blocks]

    def grids(self, spec: GridSpec, cfg: SplatConfig) -> list:
        return [b.grid(spec, cfg) for b in self.blocks]


def run_pipeline(inputs: dict, model: ModelParams, spec: GridSpec,
                 splat_cfg: SplatConfig = SplatConfig(),
                 initial: Optional[GaussianSet] = None) -> PipelineOutput:
    """Run all blocks; every block's Gaussians and splatted grid are returned.

    ``inputs`` maps modality name -> list of FeaturePyramid. ``initial`` is
    required unless the model carries learnable initial Gaussians.
    """
    cfg = model.config
    missing = [m for m in cfg.ordered_modalities if not inputs.get(m)]
    if missing:
        raise ConfigError(f"missing modality inputs: {missing}")
    if model.init is not None:
        g, Q = model.init.tensors()
    elif initial is not None:
        g, Q = GaussianTensors.from_set(initial), DiffTensor(initial.queries)
    else:
        raise ConfigError("run_pipeline needs initial Gaussians")
    out = PipelineOutput()
    for blk in model.blocks:
        out.input_queries.append(Q)
        feats = [encode_modality(g.means, g.scales, g.rotations, Q, inputs[m], blk.encoders[m])
                 for m in cfg.ordered_modalities]
        Q = fuse(feats, g.means, blk.fusion)
        g = refine_step(g, Q, blk.refine)
        alpha, cp = splat(g.means, g.scales, g.rotations, g.opacities, g.logits, spec, splat_cfg)
        out.blocks.append(BlockOutput(g, Q, alpha, cp))
    return out


__all__ = [
    "PipelineConfig", "RefineParams", "BlockParams", "ModelParams", "LearnableInit",
    "GaussianTensors", "ConfigError", "init_gaussians", "init_model", "init_refine",
    "refine_step", "run_pipeline", "PipelineOutput", "BlockOutput", "EncoderParams",
    "FeaturePyramid",
]
