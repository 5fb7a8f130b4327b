"""Gaussians, voxel grids, and the geometry they share.

Quaternions are stored (w, x, y, z). Arrays indexed by voxel use ``[x, y, z]``
axis order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DEFAULT_NUM_CLASSES = 17
QUAT_TOL = 1e-6

CLASS_NAMES = (
    "empty", "barrier", "bicycle", "bus", "car", "construction_vehicle", "motorcycle",
    "pedestrian", "traffic_cone", "trailer", "truck", "driveable_surface", "other_flat",
    "sidewalk", "terrain", "manmade", "vegetation",
)


class DomainError(ValueError):
    pass


def normalize_quat(q, tol: float = QUAT_TOL) -> np.ndarray:
    """Return ``q / |q|``; raises unless ``|q|`` is within ``tol`` of 1."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(np.abs(n - 1.0) > tol):
        raise DomainError(f"quaternion norm {n.ravel()} is not within {tol} of 1")
    return q / n


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix (or stack of them) for unit quaternions (w, x, y, z)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` (apply ``b`` first, then ``a``)."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def _check_scale(scale):
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(~(scale > 0)):
        raise DomainError(f"scales must be strictly positive, got {scale.ravel()}")
    return scale


def build_covariance(scale, rotation) -> np.ndarray:
    """Sigma = R diag(s)^2 R^T. Works on single Gaussians or stacks."""
    s = _check_scale(scale)
    R = quat_to_matrix(normalize_quat(rotation))
    return (R * (s * s)[..., None, :]) @ np.swapaxes(R, -1, -2)


def inverse_covariance(scale, rotation) -> np.ndarray:
    s = _check_scale(scale)
    R = quat_to_matrix(normalize_quat(rotation))
    return (R * (1.0 / (s * s))[..., None, :]) @ np.swapaxes(R, -1, -2)


@dataclass(frozen=True)
class SemanticGaussian:
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    logits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).reshape(3))
        object.__setattr__(self, "scale", _check_scale(self.scale).reshape(3))
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(rot) - 1.0) > 1e-9:
            rot = normalize_quat(rot)
        object.__setattr__(self, "rotation", rot)
        if not 0.0 <= self.opacity <= 1.0:
            raise DomainError(f"opacity {self.opacity} outside [0, 1]")
        logits = np.asarray(self.logits, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(logits)):
            raise DomainError("logits must be finite")
        object.__setattr__(self, "logits", logits)

    @property
    def covariance(self) -> np.ndarray:
        return build_covariance(self.scale, self.rotation)


def gaussian_weight(x, g: SemanticGaussian) -> float:
    """Unnormalized density exp(-0.5 d^T Sigma^-1 d), peak 1 at the mean."""
    d = np.asarray(x, dtype=np.float64) - g.mean
    R = quat_to_matrix(g.rotation)
    local = R.T @ d / g.scale
    return float(np.exp(-0.5 * local @ local))


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GaussianSet:
    """P Gaussians stored field-by-field, with their P x D query matrix."""

    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    logits: np.ndarray
    queries: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        P = len(means)
        scales = np.asarray(self.scales, dtype=np.float64).reshape(P, 3)
        _check_scale(scales)
        rots = np.asarray(self.rotations, dtype=np.float64).reshape(P, 4)
        if P:
            norms = np.linalg.norm(rots, axis=1)
            if np.any(np.abs(norms - 1.0) > QUAT_TOL):
                raise DomainError("rotations must be unit quaternions")
        opac = np.asarray(self.opacities, dtype=np.float64).reshape(P)
        if np.any((opac < 0) | (opac > 1)):
            raise DomainError("opacities must lie in [0, 1]")
        logits = np.asarray(self.logits, dtype=np.float64)
        logits = logits.reshape(P, logits.shape[-1] if logits.ndim == 2 else -1)
        if not np.all(np.isfinite(logits)):
            raise DomainError("logits must be finite")
        queries = np.asarray(self.queries, dtype=np.float64)
        if queries.ndim != 2 or queries.shape[0] != P:
            raise DomainError(f"queries shape {queries.shape} does not match {P} Gaussians")
        for name, arr in (("means", means), ("scales", scales), ("rotations", rots),
                          ("opacities", opac), ("logits", logits), ("queries", queries)):
            object.__setattr__(self, name, _frozen(arr))

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i) -> SemanticGaussian:
        return SemanticGaussian(self.means[i], self.scales[i], self.rotations[i],
                                float(self.opacities[i]), self.logits[i])

    @property
    def gaussians(self) -> list[SemanticGaussian]:
        return [self[i] for i in range(len(self))]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    @property
    def channel_width(self) -> int:
        return self.queries.shape[1]

    def replace(self, **changes) -> "GaussianSet":
        fields = dict(means=self.means, scales=self.scales, rotations=self.rotations,
                      opacities=self.opacities, logits=self.logits, queries=self.queries)
        fields.update(changes)
        return GaussianSet(**fields)

    def take(self, idx) -> "GaussianSet":
        idx = np.asarray(idx)
        return GaussianSet(self.means[idx], self.scales[idx], self.rotations[idx],
                           self.opacities[idx], self.logits[idx], self.queries[idx])

    @classmethod
    def from_gaussians(cls, gaussians, queries) -> "GaussianSet":
        return cls(np.array([g.mean for g in gaussians]).reshape(-1, 3),
                   np.array([g.scale for g in gaussians]).reshape(-1, 3),
                   np.array([g.rotation for g in gaussians]).reshape(-1, 4),
                   np.array([g.opacity for g in gaussians]),
                   np.array([g.logits for g in gaussians]).reshape(len(gaussians), -1),
                   queries)


@dataclass(frozen=True)
class GridSpec:
    min_corner: tuple
    voxel_size: float
    dims: tuple

    def __post_init__(self):
        mc = tuple(float(v) for v in self.min_corner)
        dims = tuple(int(d) for d in self.dims)
        if len(mc) != 3 or len(dims) != 3:
            raise DomainError("min_corner and dims need three components")
        if not self.voxel_size > 0:
            raise DomainError(f"voxel_size must be positive, got {self.voxel_size}")
        if any(d < 1 for d in dims):
            raise DomainError(f"dims must be >= 1, got {dims}")
        object.__setattr__(self, "min_corner", mc)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def max_corner(self) -> np.ndarray:
        return np.asarray(self.min_corner) + np.asarray(self.dims) * self.voxel_size

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self.dims))

    def centers(self) -> np.ndarray:
        """All voxel centers, shape dims + (3,)."""
        axes = [self.min_corner[k] + (np.arange(self.dims[k]) + 0.5) * self.voxel_size
                for k in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_dict(self) -> dict:
        return {"min_corner": list(self.min_corner), "voxel_size": self.voxel_size,
                "dims": list(self.dims)}


# [-50, 50] x [-50, 50] x [-5, 3] m at 0.5 m
FULL_GRID = GridSpec((-50.0, -50.0, -5.0), 0.5, (200, 200, 16))
DESK_GRID = GridSpec((-16.0, -16.0, -2.0), 0.5, (64, 64, 8))


def voxel_center(spec: GridSpec, idx) -> np.ndarray:
    idx = np.asarray(idx)
    if idx.shape != (3,) or np.any(idx < 0) or np.any(idx >= np.asarray(spec.dims)):
        raise IndexError(f"voxel index {tuple(idx)} outside dims {spec.dims}")
    return np.asarray(spec.min_corner) + (idx + 0.5) * spec.voxel_size


def world_to_voxel(spec: GridSpec, p) -> Optional[tuple]:
    """Index of the voxel containing ``p`` (half-open cells), or None outside."""
    rel = (np.asarray(p, dtype=np.float64) - np.asarray(spec.min_corner)) / spec.voxel_size
    idx = np.floor(rel).astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= np.asarray(spec.dims)):
        return None
    return tuple(int(i) for i in idx)


@dataclass
class SemanticGrid:
    spec: GridSpec
    occupancy: Optional[np.ndarray] = None
    class_probs: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = self.spec.dims
        if self.occupancy is not None:
            occ = np.asarray(self.occupancy)
            if occ.shape != dims:
                raise DomainError(f"occupancy shape {occ.shape} != dims {dims}")
            if np.any((occ < 0) | (occ > 1)):
                raise DomainError("occupancy values must lie in [0, 1]")
            self.occupancy = occ
        if self.class_probs is not None:
            cp = np.asarray(self.class_probs)
            if cp.shape[:3] != dims or cp.ndim != 4:
                raise DomainError(f"class_probs shape {cp.shape} does not match dims {dims}")
            self.class_probs = cp
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != dims:
                raise DomainError(f"labels shape {lab.shape} != dims {dims}")
            if lab.size and lab.min() < 0:
                raise DomainError("labels must be non-negative")
            self.labels = lab.astype(np.int64)
