"""File formats: voxel grids (GVOX), Gaussian sets (GOCC binary and JSON), metrics JSON.

All binary layouts are little-endian with a 4-byte magic and a u32 version.
Grid payloads are voxel-major with x varying fastest.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import GaussianSet, GridSpec, SemanticGrid
from .diff.checkpoint import FormatError
from .splatting import labels_from

GVOX_MAGIC = b"GVOX"
GOCC_MAGIC = b"GOCC"
VERSION = 1
KIND_LABELS, KIND_OCCUPANCY, KIND_SEMANTIC = 0, 1, 2
_GVOX_HEADER = struct.Struct("<4sI3I3ffB")


def _x_fastest(arr: np.ndarray) -> np.ndarray:
    """(nx, ny, nz, ...) -> (nz, ny, nx, ...) so a C-order dump has x fastest."""
    return np.ascontiguousarray(np.swapaxes(arr, 0, 2))


def encode_gvox(grid: SemanticGrid, kind: int = None) -> bytes:
    if kind is None:
        kind = (KIND_SEMANTIC if grid.class_probs is not None
                else KIND_OCCUPANCY if grid.occupancy is not None else KIND_LABELS)
    s = grid.spec
    hdr = _GVOX_HEADER.pack(GVOX_MAGIC, VERSION, *s.dims, *s.min_corner, s.voxel_size, kind)
    if kind == KIND_LABELS:
        if grid.labels is None:
            raise FormatError("GVOX kind 0 needs labels")
        if grid.labels.size and grid.labels.max() > 0xFFFF:
            raise FormatError("labels exceed u16 range")
        body = _x_fastest(grid.labels).astype("<u2").tobytes()
    elif kind == KIND_OCCUPANCY:
        if grid.occupancy is None:
            raise FormatError("GVOX kind 1 needs occupancy")
        body = _x_fastest(grid.occupancy).astype("<f4").tobytes()
    elif kind == KIND_SEMANTIC:
        if grid.occupancy is None or grid.class_probs is None:
            raise FormatError("GVOX kind 2 needs occupancy and class_probs")
        both = np.concatenate([grid.occupancy[..., None], grid.class_probs], axis=-1)
        body = _x_fastest(both).astype("<f4").tobytes()
    else:
        raise FormatError(f"unknown GVOX payload kind {kind}")
    return hdr + body


def decode_gvox(buf: bytes, threshold: float = 0.5, source: str = "<bytes>") -> SemanticGrid:
    """Parse a GVOX buffer. Kind 2 carries C inferred from the payload length.

    Occupancy payloads get labels from the threshold rule so a decoded grid
    can be evaluated directly.
    """
    if len(buf) < _GVOX_HEADER.size:
        raise FormatError(f"{source}: truncated header")
    magic, version, nx, ny, nz, x0, y0, z0, vs, kind = _GVOX_HEADER.unpack_from(buf)
    if magic != GVOX_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    # f32 header fields widen exactly to float64
    spec = GridSpec((x0, y0, z0), vs, (nx, ny, nz))
    n = nx * ny * nz
    body = buf[_GVOX_HEADER.size:]
    if kind == KIND_LABELS:
        if len(body) != 2 * n:
            raise FormatError(f"{source}: expected {2 * n} payload bytes, got {len(body)}")
        lab = np.frombuffer(body, "<u2").reshape(nz, ny, nx).swapaxes(0, 2)
        return SemanticGrid(spec, labels=lab.astype(np.int64))
    if kind == KIND_OCCUPANCY:
        if len(body) != 4 * n:
            raise FormatError(f"{source}: expected {4 * n} payload bytes, got {len(body)}")
        occ = np.frombuffer(body, "<f4").reshape(nz, ny, nx).swapaxes(0, 2).astype(np.float64)
        return SemanticGrid(spec, occupancy=occ, labels=(occ >= threshold).astype(np.int64))
    if kind == KIND_SEMANTIC:
        per = len(body) // (4 * n) if n else 0
        if per < 2 or len(body) != 4 * n * per:
            raise FormatError(f"{source}: payload length {len(body)} is not voxels x (1 + C) f32")
        arr = np.frombuffer(body, "<f4").reshape(nz, ny, nx, per).swapaxes(0, 2)
        arr = arr.astype(np.float64)
        occ, cp = arr[..., 0], arr[..., 1:]
        return SemanticGrid(spec, occupancy=occ, class_probs=cp,
                            labels=labels_from(occ, cp, threshold))
    raise FormatError(f"{source}: unknown payload kind {kind}")


def write_gvox(path, grid: SemanticGrid, kind: int = None) -> None:
    Path(path).write_bytes(encode_gvox(grid, kind))


def read_gvox(path, threshold: float = 0.5) -> SemanticGrid:
    return decode_gvox(Path(path).read_bytes(), threshold, str(path))


# Gaussian sets -------------------------------------------------------------

_GOCC_HEADER = struct.Struct("<4sIIII")
_FIELDS = ("means", "scales", "rotations", "opacities", "logits", "queries")


def encode_gocc(gs: GaussianSet) -> bytes:
    """Header (P, C, D) then each field as a contiguous f32 block in field order."""
    P, C, D = len(gs), gs.num_classes, gs.channel_width
    parts = [_GOCC_HEADER.pack(GOCC_MAGIC, VERSION, P, C, D)]
    parts += [np.ascontiguousarray(getattr(gs, f), dtype="<f4").tobytes() for f in _FIELDS]
    return b"".join(parts)


def decode_gocc(buf: bytes, source: str = "<bytes>") -> GaussianSet:
    if len(buf) < _GOCC_HEADER.size:
        raise FormatError(f"{source}: truncated header")
    magic, version, P, C, D = _GOCC_HEADER.unpack_from(buf)
    if magic != GOCC_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    shapes = [(P, 3), (P, 3), (P, 4), (P,), (P, C), (P, D)]
    need = 4 * sum(int(np.prod(s)) for s in shapes)
    if len(buf) - _GOCC_HEADER.size != need:
        raise FormatError(f"{source}: expected {need} payload bytes, "
                          f"got {len(buf) - _GOCC_HEADER.size}")
    off = _GOCC_HEADER.size
    arrays = []
    for shp in shapes:
        cnt = int(np.prod(shp))
        arrays.append(np.frombuffer(buf, "<f4", count=cnt, offset=off).reshape(shp)
                      .astype(np.float64))
        off += 4 * cnt
    return GaussianSet(*arrays)


def write_gocc(path, gs: GaussianSet) -> None:
    Path(path).write_bytes(encode_gocc(gs))


def read_gocc(path) -> GaussianSet:
    return decode_gocc(Path(path).read_bytes(), str(path))


def gaussians_to_json(gs: GaussianSet) -> dict:
    return {
        "version": VERSION,
        "channel_width": gs.channel_width,
        "gaussians": [
            {"mean": gs.means[i].tolist(), "scale": gs.scales[i].tolist(),
             "rotation": gs.rotations[i].tolist(), "opacity": float(gs.opacities[i]),
             "logits": gs.logits[i].tolist()}
            for i in range(len(gs))
        ],
        "queries": gs.queries.reshape(-1).tolist(),
    }


def gaussians_from_json(doc: dict) -> GaussianSet:
    if doc.get("version") != VERSION:
        raise FormatError(f"unsupported Gaussian JSON version {doc.get('version')}")
    items = doc["gaussians"]
    D = int(doc["channel_width"])
    P = len(items)
    q = np.asarray(doc["queries"], dtype=np.float64)
    if q.size != P * D:
        raise FormatError(f"queries hold {q.size} values, expected {P} x {D}")
    C = len(items[0]["logits"]) if items else 0
    col = lambda k, w: np.asarray([g[k] for g in items], dtype=np.float64).reshape(P, w)
    return GaussianSet(col("mean", 3), col("scale", 3), col("rotation", 4),
                       np.asarray([g["opacity"] for g in items], dtype=np.float64),
                       col("logits", C), q.reshape(P, D))


def dump_json(obj) -> str:
    """Canonical JSON text (sorted keys, fixed indent, trailing newline)."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dump_json(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


def write_gaussians(path, gs: GaussianSet) -> None:
    """Binary for ``.gocc``, JSON for anything else."""
    if str(path).endswith(".gocc"):
        write_gocc(path, gs)
    else:
        write_json(path, gaussians_to_json(gs))


def read_gaussians(path) -> GaussianSet:
    raw = Path(path).read_bytes()
    if raw[:4] == GOCC_MAGIC:
        return decode_gocc(raw, str(path))
    return gaussians_from_json(json.loads(raw))


__all__ = [
    "FormatError", "encode_gvox", "decode_gvox", "write_gvox", "read_gvox",
    "encode_gocc", "decode_gocc", "write_gocc", "read_gocc", "gaussians_to_json",
    "gaussians_from_json", "write_gaussians", "read_gaussians", "dump_json", "write_json",
    "read_json",
]
