"""Per-Gaussian multi-modal fusion.

Modality features are concatenated in a fixed order and mapped back to width
D by the fuser MLP. In parallel, Gaussian means are voxelized at a coarse
resolution and one submanifold sparse convolution gathers neighborhood
context; its per-Gaussian output is added to the MLP path.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .diff import ops
from .diff.nn import init_mlp, mlp_forward, mlp_parameters
from .diff.tensor import DiffTensor, ShapeError, as_tensor

MODALITY_ORDER = ("camera", "lidar_bev", "radar_bev")
KERNEL_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
CENTER = 13


@dataclass
class FusionParams:
    fuser_mlp: list  # n*D -> D -> D
    sc_kernel: DiffTensor  # (27, D, D), offsets in KERNEL_OFFSETS order
    sc_bias: DiffTensor  # (D,)
    fusion_voxel_size: float = 2.0

    def parameters(self, prefix: str = "fusion") -> dict:
        out = mlp_parameters(self.fuser_mlp, f"{prefix}.fuser")
        out[f"{prefix}.sc.kernel"] = self.sc_kernel
        out[f"{prefix}.sc.bias"] = self.sc_bias
        return out


def init_fusion(rng: np.random.Generator, width: int, n_modalities: int,
                fusion_voxel_size: float = 2.0, name: str = "fusion") -> FusionParams:
    fuser = init_mlp(rng, [n_modalities * width, width, width], name=f"{name}.fuser")
    std = 0.1 / np.sqrt(27 * width)
    kernel = rng.normal(scale=std, size=(27, width, width))
    return FusionParams(fuser, DiffTensor(kernel, requires_grad=True, name=f"{name}.sc.kernel"),
                        DiffTensor(np.zeros(width), requires_grad=True, name=f"{name}.sc.bias"),
                        fusion_voxel_size)


@dataclass
class SparseVoxelSet:
    coords: np.ndarray  # (V, 3) occupied cells, lexicographic order
    assignment: np.ndarray  # (P,) cell index of each Gaussian
    neighbors: np.ndarray  # (V, 27) neighbor cell index per kernel offset, -1 if empty
    features: DiffTensor = None  # (V, D)

    def __len__(self):
        return len(self.coords)


def concat_modalities(features) -> DiffTensor:
    """Row-wise concatenation of per-modality P x D matrices."""
    feats = [as_tensor(f) for f in features]
    if not feats:
        raise ShapeError("concat_modalities", detail="no modality features")
    shapes = {f.shape for f in feats}
    if len(shapes) != 1 or feats[0].ndim != 2:
        raise ShapeError("concat_modalities", *[f.shape for f in feats],
                         detail="modalities must share P and D")
    if len(feats) == 1:
        return feats[0]
    return ops.concat(feats, axis=1)


def _neighbor_table(coords: np.ndarray) -> np.ndarray:
    index = {tuple(c): i for i, c in enumerate(coords.tolist())}
    nbr = np.full((len(coords), 27), -1, dtype=np.int64)
    for v, c in enumerate(coords.tolist()):
        for k, off in enumerate(KERNEL_OFFSETS.tolist()):
            nbr[v, k] = index.get((c[0] + off[0], c[1] + off[1], c[2] + off[2]), -1)
    return nbr


def voxelize_means(means, fusion_voxel_size: float, features=None) -> SparseVoxelSet:
    """Group Gaussians by floor(mean / size); cell features are per-cell averages."""
    m = np.asarray(means.values if isinstance(means, DiffTensor) else means, dtype=np.float64)
    cells = np.floor(m.reshape(-1, 3) / fusion_voxel_size).astype(np.int64)
    coords, assignment = np.unique(cells, axis=0, return_inverse=True)
    assignment = assignment.reshape(-1)
    svs = SparseVoxelSet(coords, assignment, _neighbor_table(coords))
    if features is not None:
        feats = as_tensor(features)
        counts = np.bincount(assignment, minlength=len(coords)).astype(np.float64)
        sums = ops.segment_sum(feats, assignment, len(coords))
        svs.features = ops.div(sums, counts.reshape(-1, 1))
    return svs


def sparse_conv3d_cells(svs: SparseVoxelSet, kernel, bias) -> DiffTensor:
    """Submanifold convolution evaluated at occupied cells only; returns (V, D)."""
    kernel, bias = as_tensor(kernel), as_tensor(bias)
    feats = svs.features
    V = len(svs)
    out = None
    for k in range(27):
        nb = svs.neighbors[:, k]
        present = nb >= 0
        if not present.any():
            continue
        if present.all():
            gathered = feats[nb]
        else:
            gathered = ops.mul(feats[np.where(present, nb, 0)],
                               present.reshape(V, 1).astype(np.float64))
        term = ops.matmul(gathered, kernel[k])
        out = term if out is None else ops.add(out, term)
    return ops.add(out, bias)


def sparse_conv3d(svs: SparseVoxelSet, params: FusionParams) -> DiffTensor:
    """Per-Gaussian context vectors: each Gaussian receives its cell's conv output."""
    cells = sparse_conv3d_cells(svs, params.sc_kernel, params.sc_bias)
    return cells[svs.assignment]


def fuse(modality_features, means, params: FusionParams, return_parts: bool = False):
    """Q = fuser(concat(features)) + sparse-conv context of the voxelized means."""
    fused = mlp_forward(params.fuser_mlp, concat_modalities(modality_features))
    if fused.shape[1] != params.sc_kernel.shape[2]:
        raise ShapeError("fuse", fused.shape, params.sc_kernel.shape)
    svs = voxelize_means(means, params.fusion_voxel_size, features=fused)
    context = sparse_conv3d(svs, params)
    Q = ops.add(fused, context)
    if return_parts:
        return Q, fused, context, svs
    return Q


__all__ = [
    "MODALITY_ORDER", "KERNEL_OFFSETS", "FusionParams", "SparseVoxelSet", "init_fusion",
    "concat_modalities", "voxelize_means", "sparse_conv3d", "sparse_conv3d_cells", "fuse",
]
