"""Modality-agnostic Gaussian encoder.

Reference points are generated around every Gaussian from its query, shaped
by the Gaussian's scale and rotation, projected into each sensor's feature
space, and read with multi-scale deformable attention. Contributions are
summed over sensors and reference points; invisible points contribute zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .diff import ops
from .diff.nn import Linear, init_linear, init_mlp, mlp_forward, mlp_parameters
from .diff.tensor import DiffTensor, ShapeError, as_tensor

NEAR_PLANE = 0.1


@dataclass(frozen=True)
class CameraSensor:
    intrinsics: np.ndarray  # 3x3, pixels
    extrinsics: np.ndarray  # 4x4 world -> camera
    image_dims: tuple  # (H, W)
    kind: str = "camera"

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        T = np.asarray(self.extrinsics, dtype=np.float64).reshape(4, 4)
        if abs(np.linalg.det(K)) < 1e-12:
            raise ValueError("camera intrinsics must be invertible")
        R = T[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("camera extrinsics must be a rigid transform")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", T)
        object.__setattr__(self, "image_dims", tuple(int(v) for v in self.image_dims))

    @property
    def center(self) -> np.ndarray:
        R, t = self.extrinsics[:3, :3], self.extrinsics[:3, 3]
        return -R.T @ t

    def to_dict(self) -> dict:
        return {"kind": "camera", "intrinsics": self.intrinsics.tolist(),
                "extrinsics": self.extrinsics.tolist(), "image_dims": list(self.image_dims)}


@dataclass(frozen=True)
class BevSensor:
    extent: tuple  # (x_min, y_min, x_max, y_max), meters
    map_dims: tuple  # (H, W): rows follow y, columns follow x
    kind: str = "bev"

    def __post_init__(self):
        ext = tuple(float(v) for v in self.extent)
        if not (ext[2] > ext[0] and ext[3] > ext[1]):
            raise ValueError(f"degenerate BEV extent {ext}")
        object.__setattr__(self, "extent", ext)
        object.__setattr__(self, "map_dims", tuple(int(v) for v in self.map_dims))

    def to_dict(self) -> dict:
        return {"kind": "bev", "extent": list(self.extent), "map_dims": list(self.map_dims)}


SensorModel = Union[CameraSensor, BevSensor]


def sensor_from_dict(d: dict) -> SensorModel:
    if d["kind"] == "camera":
        return CameraSensor(np.array(d["intrinsics"]), np.array(d["extrinsics"]),
                            tuple(d["image_dims"]))
    if d["kind"] == "bev":
        return BevSensor(tuple(d["extent"]), tuple(d["map_dims"]))
    raise ValueError(f"unknown sensor kind {d['kind']!r}")


@dataclass
class FeaturePyramid:
    sensor: SensorModel
    levels: list  # each (Cf, H_l, W_l)

    def __post_init__(self):
        if not self.levels:
            raise ValueError("a feature pyramid needs at least one level")
        self.levels = [np.asarray(lv) for lv in self.levels]
        cf = {lv.shape[0] for lv in self.levels}
        if len(cf) != 1 or any(lv.ndim != 3 for lv in self.levels):
            raise ShapeError("FeaturePyramid", *[lv.shape for lv in self.levels],
                             detail="levels must share the channel count")

    @property
    def channels(self) -> int:
        return self.levels[0].shape[0]

    @property
    def num_levels(self) -> int:
        return len(self.levels)


def _uv_bounds(u, v):
    return (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (v <= 1.0)


def project(sensor: SensorModel, p) -> Optional[tuple]:
    """Normalized (u, v) of world point ``p`` in the sensor's feature space, or None."""
    uv, vis = project_points(sensor, np.asarray(p, dtype=np.float64).reshape(1, 3))
    return (float(uv[0, 0]), float(uv[0, 1])) if vis[0] else None


def project_points(sensor: SensorModel, pts: np.ndarray):
    """Vectorized numpy projection: (..., 3) -> (uv (..., 2), visible (...))."""
    uv, vis = project_tensor(sensor, DiffTensor(pts, dtype=np.float64))
    return uv.values, vis


def project_tensor(sensor: SensorModel, pts: DiffTensor):
    """Differentiable projection of (..., 3) points; returns (uv tensor, visibility mask).

    Invisible points get finite placeholder coordinates; callers must mask
    their contributions.
    """
    pts = as_tensor(pts)
    if sensor.kind == "bev":
        x0, y0, x1, y1 = sensor.extent
        u = ops.mul(ops.sub(pts[..., 0], x0), 1.0 / (x1 - x0))
        v = ops.mul(ops.sub(pts[..., 1], y0), 1.0 / (y1 - y0))
        vis = _uv_bounds(u.values, v.values)
        return ops.stack([u, v], axis=-1), vis
    R = sensor.extrinsics[:3, :3]
    t = sensor.extrinsics[:3, 3]
    xs = ops.add(ops.matmul(pts.reshape(-1, 3), R.T), t)
    z = xs[:, 2]
    front = z.values > NEAR_PLANE
    zsafe = ops.add(ops.mul(z, front), (~front).astype(np.float64))
    pix = ops.matmul(xs, sensor.intrinsics.T)
    H, W = sensor.image_dims
    u = ops.div(pix[:, 0], ops.mul(zsafe, float(W)))
    v = ops.div(pix[:, 1], ops.mul(zsafe, float(H)))
    vis = front & _uv_bounds(u.values, v.values)
    lead = pts.shape[:-1]
    return ops.stack([u, v], axis=-1).reshape(lead + (2,)), vis.reshape(lead)


@dataclass
class EncoderParams:
    offset_mlp: list  # D -> hidden -> 3 * n_refs
    attn: Linear  # D -> n_refs * n_levels * n_samples * 3 (2 offsets + 1 logit)
    value_proj: Linear  # Cf -> D
    n_refs: int = 4
    n_samples: int = 4
    n_levels: int = 2

    def __post_init__(self):
        if self.n_refs < 1 or self.n_samples < 1 or self.n_levels < 1:
            raise ValueError("n_refs, n_samples and n_levels must be >= 1")
        if self.offset_mlp[-1].out_dim != 3 * self.n_refs:
            raise ShapeError("EncoderParams", self.offset_mlp[-1].weight.shape,
                             detail=f"offset head must emit 3 * {self.n_refs}")
        want = self.n_refs * self.n_levels * self.n_samples * 3
        if self.attn.out_dim != want:
            raise ShapeError("EncoderParams", self.attn.weight.shape,
                             detail=f"attention head must emit {want}")

    @property
    def width(self) -> int:
        return self.value_proj.out_dim

    def parameters(self, prefix: str = "enc") -> dict:
        out = mlp_parameters(self.offset_mlp, f"{prefix}.offset")
        out[f"{prefix}.attn.weight"] = self.attn.weight
        out[f"{prefix}.attn.bias"] = self.attn.bias
        out[f"{prefix}.value.weight"] = self.value_proj.weight
        out[f"{prefix}.value.bias"] = self.value_proj.bias
        return out


def init_encoder(rng: np.random.Generator, width: int, feat_channels: int, n_refs: int = 4,
                 n_samples: int = 4, n_levels: int = 2, name: str = "enc") -> EncoderParams:
    offset = init_mlp(rng, [width, width, 3 * n_refs], out_gain=0.1, name=f"{name}.offset")
    # spread reference points to distinct fixed directions inside the Gaussian
    dirs = rng.normal(size=(n_refs, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    offset[-1].bias.values[...] = (dirs * (np.arange(n_refs)[:, None] > 0)).reshape(-1)
    attn = init_linear(rng, width, n_refs * n_levels * n_samples * 3, gain=0.01,
                       name=f"{name}.attn")
    bias = np.zeros((n_refs, n_levels, n_samples, 3))
    ang = 2 * np.pi * np.arange(n_samples) / n_samples
    ring = np.stack([np.cos(ang), np.sin(ang)], axis=1) * (1 + np.arange(n_samples))[:, None] * 0.5
    bias[..., :2] = ring[None, None]
    attn.bias.values[...] = bias.reshape(-1)
    value = init_linear(rng, feat_channels, width, name=f"{name}.value")
    return EncoderParams(offset, attn, value, n_refs, n_samples, n_levels)


def reference_points(means, scales, rotations, queries, params: EncoderParams) -> DiffTensor:
    """World-space reference points (P, N_R, 3): m + R diag(s) o_i with o = offset MLP(q)."""
    means, scales = as_tensor(means), as_tensor(scales)
    rotations, queries = as_tensor(rotations), as_tensor(queries)
    P = means.shape[0]
    o = mlp_forward(params.offset_mlp, queries).reshape(P, params.n_refs, 3)
    so = ops.mul(o, scales.reshape(P, 1, 3))
    R = ops.quat_to_rotmat(ops.normalize(rotations, axis=-1, fallback=[1.0, 0.0, 0.0, 0.0]))
    delta = ops.matmul(so, ops.transpose(R, (0, 2, 1)))
    return ops.add(means.reshape(P, 1, 3), delta)


def gen_reference_points(g, q, params: EncoderParams) -> np.ndarray:
    """Reference points for a single Gaussian, shape (N_R, 3)."""
    pts = reference_points(np.reshape(g.mean, (1, 3)), np.reshape(g.scale, (1, 3)),
                           np.reshape(g.rotation, (1, 4)),
                           np.reshape(np.asarray(q, dtype=np.float64), (1, -1)), params)
    return pts.values[0]


def attention_heads(queries, params: EncoderParams):
    """Sampling offsets (P, N_R, M, S, 2) in texels and weights (P, N_R, M, S)."""
    queries = as_tensor(queries)
    P = queries.shape[0]
    R_, M, S = params.n_refs, params.n_levels, params.n_samples
    h = ops.add(ops.matmul(queries, params.attn.weight), params.attn.bias)
    h = h.reshape(P, R_, M, S, 3)
    offsets = h[..., :2]
    logits = h[..., 2].reshape(P, R_, M * S)
    weights = ops.softmax(logits, axis=-1).reshape(P, R_, M, S)
    return offsets, weights


def sample_levels(uv: DiffTensor, offsets: DiffTensor, weights: DiffTensor,
                  levels: Sequence[np.ndarray]) -> DiffTensor:
    """Weighted multi-level bilinear samples.

    ``uv`` is (K, 2), ``offsets`` (K, M, S, 2) in texels of each level,
    ``weights`` (K, M, S). Returns (K, Cf).
    """
    K = uv.shape[0]
    total = None
    for lv, fmap in enumerate(levels):
        _, H, W = fmap.shape
        S = offsets.shape[2]
        step = np.array([1.0 / W, 1.0 / H])
        loc = ops.add(uv.reshape(K, 1, 2), ops.mul(offsets[:, lv], step))
        samples = ops.bilinear_sample2d(fmap, loc.reshape(K * S, 2)).reshape(K, S, -1)
        part = ops.sum(ops.mul(samples, weights[:, lv].reshape(K, S, 1)), axis=1)
        total = part if total is None else ops.add(total, part)
    return total


def deformable_attention(q, uv, pyramid: FeaturePyramid, params: EncoderParams,
                         ref: int = 0) -> DiffTensor:
    """Single-query deformable attention at normalized location ``uv``.

    Uses the offset/weight slots of reference point ``ref``; returns a
    D-vector.
    """
    q = as_tensor(q).reshape(1, -1)
    if pyramid.num_levels != params.n_levels:
        raise ShapeError("deformable_attention", (pyramid.num_levels,), (params.n_levels,),
                         detail="pyramid levels vs attention levels")
    offsets, weights = attention_heads(q, params)
    uvt = as_tensor(uv).reshape(1, 2)
    agg = sample_levels(uvt, offsets[:, ref], weights[:, ref], pyramid.levels)
    out = ops.add(ops.matmul(agg, params.value_proj.weight), params.value_proj.bias)
    return out.reshape(-1)


def encode_modality(means, scales, rotations, queries, pyramids: Sequence[FeaturePyramid],
                    params: EncoderParams, return_visibility: bool = False):
    """Per-Gaussian features (P, D) summed over sensors and reference points."""
    queries = as_tensor(queries)
    P = queries.shape[0]
    if not pyramids:
        raise ValueError("encode_modality needs at least one sensor input")
    cf = {p.channels for p in pyramids}
    if len(cf) != 1:
        raise ShapeError("encode_modality", *[(p.channels,) for p in pyramids],
                         detail="channel mismatch across sensors")
    if cf.pop() != params.value_proj.in_dim:
        raise ShapeError("encode_modality", (pyramids[0].channels,),
                         params.value_proj.weight.shape)
    refs = reference_points(means, scales, rotations, queries, params)
    offsets, weights = attention_heads(queries, params)
    RN = params.n_refs
    K = P * RN
    off_k = offsets.reshape(K, params.n_levels, params.n_samples, 2)
    w_k = weights.reshape(K, params.n_levels, params.n_samples)
    total = None
    count = np.zeros(P)
    visibility = []
    for pyr in pyramids:
        if pyr.num_levels != params.n_levels:
            raise ShapeError("encode_modality", (pyr.num_levels,), (params.n_levels,),
                             detail="pyramid levels vs attention levels")
        uv, vis = project_tensor(pyr.sensor, refs)
        visibility.append(vis)
        if not vis.any():
            continue
        agg = sample_levels(uv.reshape(K, 2), off_k, w_k, pyr.levels)
        mask = vis.reshape(K, 1).astype(np.float64)
        part = ops.sum(ops.mul(agg, mask).reshape(P, RN, -1), axis=1)
        total = part if total is None else ops.add(total, part)
        count += vis.sum(axis=1)
    D = params.value_proj.out_dim
    if total is None:
        out = DiffTensor(np.zeros((P, D)), dtype=queries.dtype)
    else:
        out = ops.add(ops.matmul(total, params.value_proj.weight),
                      ops.mul(params.value_proj.bias, count.reshape(P, 1)))
    if return_visibility:
        return out, np.stack(visibility, axis=0)
    return out


__all__ = [
    "CameraSensor", "BevSensor", "SensorModel", "FeaturePyramid", "EncoderParams",
    "project", "project_points", "project_tensor", "init_encoder", "reference_points",
    "gen_reference_points", "attention_heads", "sample_levels", "deformable_attention",
    "encode_modality", "sensor_from_dict",
]
