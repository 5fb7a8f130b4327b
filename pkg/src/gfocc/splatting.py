"""Gaussian-to-voxel splatting.

Occupancy is the complement-product of independent per-Gaussian
probabilities, ``alpha(x) = 1 - prod_i (1 - a_i g_i(x))``, accumulated in log
space. Semantics are the opacity-density weighted mixture of each
Gaussian's class distribution. Both are restricted to each Gaussian's
k-sigma cull box.

The heavy loops are numba kernels. The forward pass is parallel over x-slabs
of the grid and visits Gaussians in index order inside every voxel, so the
result does not depend on how slabs are scheduled. The backward pass is
parallel over Gaussians; each writes only its own gradient row.
"""

from __future__ import annotations

from dataclasses import dataclass

import os

import numba
import numpy as np

if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"

from .core import GaussianSet, GridSpec, SemanticGrid, quat_to_matrix
from .diff.tensor import DiffTensor, as_tensor, record

W_MAX = 1.0 - 1e-7
# exp(-q/2) is exactly 0.0 in float64 beyond this, so skipping changes nothing
Q_ZERO = 1500.0


@dataclass(frozen=True)
class SplatConfig:
    cutoff_sigma: float = 4.0
    occupancy_threshold: float = 0.5
    eps: float = 1e-8

    def __post_init__(self):
        if not self.cutoff_sigma > 0:
            raise ValueError("cutoff_sigma must be positive")
        if not 0.0 < self.occupancy_threshold < 1.0:
            raise ValueError("occupancy_threshold must lie in (0, 1)")


def _softmax_rows(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cull_boxes(means, scales, rotations, spec: GridSpec, cutoff: float) -> np.ndarray:
    """Inclusive voxel index boxes (P, 6) = (lo_x, lo_y, lo_z, hi_x, hi_y, hi_z).

    A box is empty when lo > hi on some axis. ``cutoff = inf`` selects the
    whole grid for every Gaussian.
    """
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    P = len(means)
    dims = np.asarray(spec.dims)
    if np.isinf(cutoff):
        boxes = np.zeros((P, 6), dtype=np.int64)
        boxes[:, 3:] = dims - 1
        return boxes
    R = quat_to_matrix(np.asarray(rotations, dtype=np.float64).reshape(-1, 4)
                       / np.linalg.norm(np.asarray(rotations, dtype=np.float64).reshape(-1, 4),
                                        axis=1, keepdims=True))
    s2 = np.asarray(scales, dtype=np.float64).reshape(-1, 3) ** 2
    # diag(R diag(s^2) R^T)
    var = np.einsum("pij,pj->pi", R * R, s2)
    ext = cutoff * np.sqrt(var)
    mc = np.asarray(spec.min_corner)
    # voxel i is inside iff its center lies in [m - ext, m + ext]
    lo = np.ceil((means - ext - mc) / spec.voxel_size - 0.5).astype(np.int64)
    hi = np.floor((means + ext - mc) / spec.voxel_size - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, dims - 1)
    return np.concatenate([lo, hi], axis=1)


@dataclass
class CullList:
    boxes: np.ndarray

    def __len__(self):
        return len(self.boxes)

    def is_empty(self, i: int) -> bool:
        b = self.boxes[i]
        return bool(np.any(b[:3] > b[3:]))

    def contains(self, i: int, idx) -> bool:
        b = self.boxes[i]
        idx = np.asarray(idx)
        return bool(np.all(idx >= b[:3]) and np.all(idx <= b[3:]))

    def volume(self) -> int:
        ext = np.clip(self.boxes[:, 3:] - self.boxes[:, :3] + 1, 0, None)
        return int(np.prod(ext, axis=1).sum())


def cull(gaussians: GaussianSet, spec: GridSpec, cfg: SplatConfig = SplatConfig()) -> CullList:
    return CullList(cull_boxes(gaussians.means, gaussians.scales, gaussians.rotations,
                               spec, cfg.cutoff_sigma))


@numba.njit(parallel=True, cache=True, fastmath=False)
def _forward_kernel(means, rmats, inv_s, opac, probs, boxes, origin, vs, nx, ny, nz,
                    with_sem):
    P = means.shape[0]
    C = probs.shape[1]
    logsum = np.zeros((nx, ny, nz))
    wsum = np.zeros((nx, ny, nz))
    sem = np.zeros((nx, ny, nz, C if with_sem else 0))
    for i in numba.prange(nx):
        cx = origin[0] + (i + 0.5) * vs
        for p in range(P):
            if boxes[p, 0] > i or boxes[p, 3] < i:
                continue
            if boxes[p, 1] > boxes[p, 4] or boxes[p, 2] > boxes[p, 5]:
                continue
            dx = cx - means[p, 0]
            a = opac[p]
            for j in range(boxes[p, 1], boxes[p, 4] + 1):
                dy = origin[1] + (j + 0.5) * vs - means[p, 1]
                for k in range(boxes[p, 2], boxes[p, 5] + 1):
                    dz = origin[2] + (k + 0.5) * vs - means[p, 2]
                    q = 0.0
                    for c in range(3):
                        yl = (rmats[p, 0, c] * dx + rmats[p, 1, c] * dy
                              + rmats[p, 2, c] * dz) * inv_s[p, c]
                        q += yl * yl
                    if q > Q_ZERO:
                        continue
                    w = a * np.exp(-0.5 * q)
                    if w > W_MAX:
                        w = W_MAX
                    logsum[i, j, k] += np.log1p(-w)
                    wsum[i, j, k] += w
                    if with_sem:
                        for c in range(C):
                            sem[i, j, k, c] += w * probs[p, c]
    return logsum, wsum, sem


@numba.njit(parallel=True, cache=True, fastmath=False)
def _backward_kernel(means, rmats, inv_s, opac, probs, boxes, origin, vs,
                     alpha, wsum, g_alpha, g_cp, dot_gcp_cp, eps, with_sem):
    P = means.shape[0]
    C = probs.shape[1]
    g_mean = np.zeros((P, 3))
    g_scale = np.zeros((P, 3))
    g_rmat = np.zeros((P, 3, 3))
    g_opac = np.zeros(P)
    g_probs = np.zeros((P, C))
    for p in numba.prange(P):
        if (boxes[p, 0] > boxes[p, 3] or boxes[p, 1] > boxes[p, 4]
                or boxes[p, 2] > boxes[p, 5]):
            continue
        a = opac[p]
        d = np.empty(3)
        yl = np.empty(3)
        for i in range(boxes[p, 0], boxes[p, 3] + 1):
            d[0] = origin[0] + (i + 0.5) * vs - means[p, 0]
            for j in range(boxes[p, 1], boxes[p, 4] + 1):
                d[1] = origin[1] + (j + 0.5) * vs - means[p, 1]
                for k in range(boxes[p, 2], boxes[p, 5] + 1):
                    d[2] = origin[2] + (k + 0.5) * vs - means[p, 2]
                    q = 0.0
                    for c in range(3):
                        yl[c] = (rmats[p, 0, c] * d[0] + rmats[p, 1, c] * d[1]
                                 + rmats[p, 2, c] * d[2])
                        t = yl[c] * inv_s[p, c]
                        q += t * t
                    if q > Q_ZERO:
                        continue
                    g = np.exp(-0.5 * q)
                    w = a * g
                    clamped = w > W_MAX
                    if clamped:
                        w = W_MAX
                    dldw = g_alpha[i, j, k] * (1.0 - alpha[i, j, k]) / (1.0 - w)
                    if with_sem:
                        denom = wsum[i, j, k] + eps
                        gp = 0.0
                        for c in range(C):
                            gp += g_cp[i, j, k, c] * probs[p, c]
                            g_probs[p, c] += w * g_cp[i, j, k, c] / denom
                        dldw += (gp - dot_gcp_cp[i, j, k]) / denom
                    if clamped or dldw == 0.0:
                        continue
                    g_opac[p] += dldw * g
                    dldq = -0.5 * g * a * dldw
                    for c in range(3):
                        t = yl[c] * inv_s[p, c] * inv_s[p, c]
                        g_scale[p, c] -= dldq * 2.0 * yl[c] * t * inv_s[p, c]
                        for r in range(3):
                            g_rmat[p, r, c] += dldq * 2.0 * t * d[r]
                            g_mean[p, r] -= dldq * 2.0 * t * rmats[p, r, c]
    return g_mean, g_scale, g_rmat, g_opac, g_probs


def _prepare(means, scales, rotations, opacities, logits, spec, cutoff):
    means = np.ascontiguousarray(means, dtype=np.float64).reshape(-1, 3)
    scales = np.ascontiguousarray(scales, dtype=np.float64).reshape(-1, 3)
    rot = np.asarray(rotations, dtype=np.float64).reshape(-1, 4)
    qn = np.linalg.norm(rot, axis=1, keepdims=True)
    rot_unit = rot / qn
    rmats = np.ascontiguousarray(quat_to_matrix(rot_unit))
    opac = np.ascontiguousarray(opacities, dtype=np.float64).reshape(-1)
    logits = np.asarray(logits, dtype=np.float64)
    logits = logits.reshape(len(means), logits.shape[-1] if logits.ndim == 2 else -1)
    probs = np.ascontiguousarray(_softmax_rows(logits)) if len(means) else logits
    boxes = np.ascontiguousarray(cull_boxes(means, scales, rot_unit, spec, cutoff))
    return dict(means=means, scales=scales, rot=rot, qn=qn, rot_unit=rot_unit, rmats=rmats,
                inv_s=np.ascontiguousarray(1.0 / scales), opac=opac, probs=probs,
                boxes=boxes)


def _forward(prep, spec: GridSpec, cfg: SplatConfig, with_sem=True):
    nx, ny, nz = spec.dims
    origin = np.asarray(spec.min_corner, dtype=np.float64)
    logsum, wsum, sem = _forward_kernel(prep["means"], prep["rmats"], prep["inv_s"],
                                        prep["opac"], prep["probs"], prep["boxes"], origin,
                                        spec.voxel_size, nx, ny, nz, with_sem)
    alpha = -np.expm1(logsum)
    cp = sem / (wsum + cfg.eps)[..., None] if with_sem else None
    return alpha, wsum, cp


def _dense_cfg(cfg: SplatConfig) -> SplatConfig:
    return SplatConfig(np.inf, cfg.occupancy_threshold, cfg.eps)


def splat_occupancy(gaussians: GaussianSet, spec: GridSpec,
                    cfg: SplatConfig = SplatConfig()) -> np.ndarray:
    """Occupancy alpha in [0, 1] at every voxel center, shape ``spec.dims``."""
    prep = _prepare(gaussians.means, gaussians.scales, gaussians.rotations,
                    gaussians.opacities, gaussians.logits, spec, cfg.cutoff_sigma)
    alpha, _, _ = _forward(prep, spec, cfg, with_sem=False)
    return alpha


def splat_occupancy_dense(gaussians: GaussianSet, spec: GridSpec,
                          cfg: SplatConfig = SplatConfig()) -> np.ndarray:
    """Same kernel with culling disabled: every Gaussian visits every voxel."""
    return splat_occupancy(gaussians, spec, _dense_cfg(cfg))


def labels_from(alpha: np.ndarray, class_probs: np.ndarray, threshold: float) -> np.ndarray:
    """Empty (0) below the occupancy threshold, else the best non-empty class.

    Ties go to the lowest class index.
    """
    best = np.argmax(class_probs[..., 1:], axis=-1) + 1
    return np.where(alpha < threshold, 0, best).astype(np.int64)


def splat_semantics(gaussians: GaussianSet, spec: GridSpec,
                    cfg: SplatConfig = SplatConfig()):
    """Per-voxel class distribution (dims x C) and labels (dims)."""
    grid = splat_grid(gaussians, spec, cfg)
    return grid.class_probs, grid.labels


def splat_grid(gaussians: GaussianSet, spec: GridSpec,
               cfg: SplatConfig = SplatConfig()) -> SemanticGrid:
    prep = _prepare(gaussians.means, gaussians.scales, gaussians.rotations,
                    gaussians.opacities, gaussians.logits, spec, cfg.cutoff_sigma)
    alpha, _, cp = _forward(prep, spec, cfg)
    return SemanticGrid(spec, occupancy=alpha, class_probs=cp,
                        labels=labels_from(alpha, cp, cfg.occupancy_threshold))


def _rotation_vjp(g_rmat, rot, qn, rot_unit):
    """Chain dL/dR through R(q / |q|) back to the raw quaternion."""
    w, x, y, z = rot_unit.T
    g = g_rmat
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0]
              - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    gu = np.stack([gw, gx, gy, gz], axis=1)
    # tangent projection of the normalization
    return (gu - rot_unit * (gu * rot_unit).sum(axis=1, keepdims=True)) / qn


def splat_backward(gaussians_or_prep, spec: GridSpec, cfg: SplatConfig,
                   occupancy_grad, class_probs_grad=None, saved=None) -> dict:
    """Analytic gradients of a scalar L given dL/dalpha and dL/dclass_probs.

    Returns a dict with ``means``, ``scales``, ``rotations``, ``opacities``
    and ``logits``. The rotation gradient is taken through the quaternion
    normalization, i.e. it lies in the tangent space of the unit sphere at
    unit inputs.
    """
    if isinstance(gaussians_or_prep, GaussianSet):
        gs = gaussians_or_prep
        prep = _prepare(gs.means, gs.scales, gs.rotations, gs.opacities, gs.logits,
                        spec, cfg.cutoff_sigma)
    else:
        prep = gaussians_or_prep
    with_sem = class_probs_grad is not None
    if saved is None:
        saved = _forward(prep, spec, cfg, with_sem=with_sem)
    alpha, wsum, cp = saved
    g_alpha = np.ascontiguousarray(occupancy_grad, dtype=np.float64)
    C = prep["probs"].shape[1]
    if with_sem:
        g_cp = np.ascontiguousarray(class_probs_grad, dtype=np.float64)
        dot = np.ascontiguousarray((g_cp * cp).sum(axis=-1))
    else:
        g_cp = np.zeros(spec.dims + (C,))
        dot = np.zeros(spec.dims)
    origin = np.asarray(spec.min_corner, dtype=np.float64)
    g_mean, g_scale, g_rmat, g_opac, g_probs = _backward_kernel(
        prep["means"], prep["rmats"], prep["inv_s"], prep["opac"], prep["probs"],
        prep["boxes"], origin, spec.voxel_size, np.ascontiguousarray(alpha),
        np.ascontiguousarray(wsum), g_alpha, g_cp, dot, cfg.eps, with_sem)
    probs = prep["probs"]
    g_logits = probs * (g_probs - (g_probs * probs).sum(axis=1, keepdims=True))
    return {
        "means": g_mean,
        "scales": g_scale,
        "rotations": _rotation_vjp(g_rmat, prep["rot"], prep["qn"], prep["rot_unit"]),
        "opacities": g_opac,
        "logits": g_logits,
    }


def splat(means, scales, rotations, opacities, logits, spec: GridSpec,
          cfg: SplatConfig = SplatConfig()):
    """Differentiable splatting primitive; returns (alpha, class_probs) tensors.

    Quaternions are normalized internally.
    """
    ins = [as_tensor(t) for t in (means, scales, rotations, opacities, logits)]
    prep = _prepare(*(t.values for t in ins), spec, cfg.cutoff_sigma)
    saved = _forward(prep, spec, cfg)
    alpha, _, cp = saved
    dtype = ins[0].dtype
    a_out = DiffTensor(alpha, dtype=dtype)
    cp_out = DiffTensor(cp, dtype=dtype)

    def vjp(g_alpha, g_cp):
        grads = splat_backward(prep, spec, cfg, g_alpha, g_cp, saved=saved)
        return tuple(grads[k].reshape(t.shape) for k, t in
                     zip(("means", "scales", "rotations", "opacities", "logits"), ins))

    record("splat", ins, (a_out, cp_out), vjp)
    return a_out, cp_out


def grid_from_tensors(alpha: DiffTensor, class_probs: DiffTensor, spec: GridSpec,
                      cfg: SplatConfig = SplatConfig()) -> SemanticGrid:
    a = alpha.values.astype(np.float64)
    cp = class_probs.values.astype(np.float64)
    return SemanticGrid(spec, occupancy=np.clip(a, 0.0, 1.0), class_probs=cp,
                        labels=labels_from(a, cp, cfg.occupancy_threshold))


def occupancy_at_points(gaussians: GaussianSet, points) -> np.ndarray:
    """Off-grid evaluation of alpha at arbitrary points (no culling)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros(len(pts))
    if not len(gaussians):
        return out
    R = quat_to_matrix(gaussians.rotations / np.linalg.norm(gaussians.rotations, axis=1,
                                                            keepdims=True))
    logsum = np.zeros(len(pts))
    for i in range(len(gaussians)):
        d = pts - gaussians.means[i]
        local = d @ R[i] / gaussians.scales[i]
        w = np.minimum(gaussians.opacities[i] * np.exp(-0.5 * (local ** 2).sum(axis=1)), W_MAX)
        logsum += np.log1p(-w)
    return -np.expm1(logsum)


__all__ = [
    "SplatConfig", "CullList", "cull", "cull_boxes", "splat_occupancy",
    "splat_occupancy_dense", "splat_semantics", "splat_grid", "splat_backward", "splat",
    "labels_from", "grid_from_tensors", "occupancy_at_points",
]
