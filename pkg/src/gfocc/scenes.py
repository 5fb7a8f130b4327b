"""Synthetic semantic scenes and stand-in sensor features.

A scene is a voxel label grid built from placed primitives, a surface point
cloud, and feature pyramids rendered from the labels: z-buffered class codes
plus inverse depth for cameras, top-down class codes plus height for the BEV
modalities. Everything derives from the scene seed.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numba
import numpy as np

from .core import CLASS_NAMES, DEFAULT_NUM_CLASSES, DESK_GRID, GridSpec, SemanticGrid
from .encoder import BevSensor, CameraSensor, FeaturePyramid, project_points, sensor_from_dict
from .formats import read_gvox, write_gvox

GROUND_LABEL = CLASS_NAMES.index("driveable_surface")
CODE_SEED = 1234
DYNAMIC_LABELS = {CLASS_NAMES.index(n) for n in
                  ("car", "truck", "bus", "pedestrian", "bicycle", "motorcycle")}
OBJECT_KINDS = ("box", "wall", "cylinder", "ground_patch")


class SceneError(ValueError):
    pass


@dataclass
class ObjectKind:
    """One placeable object family. Sizes are (min, max) meters per dimension.

    ``box``/``wall``/``ground_patch`` use (length, width, height); ``cylinder``
    uses (radius, height, unused).
    """

    kind: str
    label: int
    size_range: list
    weight: float = 1.0
    dynamic: bool = False

    def __post_init__(self):
        if self.kind not in OBJECT_KINDS:
            raise SceneError(f"object kind must be one of {OBJECT_KINDS}, got {self.kind!r}")
        if not 0 < self.label < DEFAULT_NUM_CLASSES:
            raise SceneError(f"object label {self.label} out of range")
        rng = np.asarray(self.size_range, dtype=np.float64)
        if rng.shape != (3, 2) or np.any(rng <= 0) or np.any(rng[:, 0] > rng[:, 1]):
            raise SceneError(f"size_range must be 3 positive (min, max) pairs, got {self.size_range}")
        self.size_range = rng.tolist()


def default_object_kinds() -> list:
    n = CLASS_NAMES.index
    return [
        ObjectKind("box", n("car"), [[3.5, 4.5], [1.7, 2.0], [1.4, 1.7]], 3.0, True),
        ObjectKind("box", n("truck"), [[6.0, 8.0], [2.2, 2.6], [2.5, 3.0]], 1.0, True),
        ObjectKind("box", n("barrier"), [[2.0, 4.0], [0.5, 0.6], [1.0, 1.0]], 1.0),
        ObjectKind("cylinder", n("vegetation"), [[1.0, 1.6], [2.5, 3.5], [1.0, 1.0]], 1.5),
        ObjectKind("cylinder", n("pedestrian"), [[0.45, 0.55], [1.6, 1.8], [1.0, 1.0]], 1.0, True),
        ObjectKind("wall", n("manmade"), [[5.0, 10.0], [0.5, 1.0], [2.5, 3.5]], 1.0),
        ObjectKind("ground_patch", n("sidewalk"), [[6.0, 12.0], [2.0, 4.0], [0.5, 0.5]], 1.0),
    ]


@dataclass
class CameraRig:
    count: int = 4
    height: float = 0.0  # world z of the optical centers
    yaw_offset: float = 0.0  # radians
    hfov: float = math.pi / 2
    image_dims: tuple = (64, 128)
    feature_stride: int = 2

    def sensors(self) -> list:
        H, W = self.image_dims
        f = 0.5 * W / math.tan(0.5 * self.hfov)
        K = np.array([[f, 0.0, W / 2.0], [0.0, f, H / 2.0], [0.0, 0.0, 1.0]])
        out = []
        for i in range(self.count):
            yaw = self.yaw_offset + 2 * math.pi * i / self.count
            out.append(CameraSensor(K, camera_extrinsics(yaw, self.height), (H, W)))
        return out


def camera_extrinsics(yaw: float, height: float, position=(0.0, 0.0)) -> np.ndarray:
    """World->camera transform for a level camera looking along ``yaw`` (x right, y down)."""
    fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    R = np.stack([right, down, fwd])
    c = np.array([position[0], position[1], height])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ c
    return T


@dataclass
class PlacedObject:
    kind: str
    label: int
    center: list  # x, y of the footprint center; z of the base
    size: list
    yaw: float = 0.0
    velocity: list = field(default_factory=lambda: [0.0, 0.0])


@dataclass
class SceneSpec:
    seed: int = 0
    grid: GridSpec = DESK_GRID
    object_count: tuple = (6, 10)
    object_kinds: list = field(default_factory=default_object_kinds)
    fixed_objects: list = field(default_factory=list)  # PlacedObject, placed first
    ground: bool = True
    min_radius: float = 3.0  # keep the sensor origin clear
    max_radius: Optional[float] = None
    camera_rig: CameraRig = field(default_factory=CameraRig)
    feat_channels: int = 32
    levels: int = 2
    feature_noise: float = 0.0
    dropout: dict = field(default_factory=lambda: {"camera": 0.0, "lidar_bev": 0.0,
                                                   "radar_bev": 0.0})
    radar_keep_prob: float = 0.3
    points_per_scene: int = 4096
    max_retries: int = 200

    def __post_init__(self):
        if isinstance(self.grid, dict):
            self.grid = GridSpec(**self.grid)
        if isinstance(self.camera_rig, dict):
            self.camera_rig = CameraRig(**self.camera_rig)
        self.object_kinds = [k if isinstance(k, ObjectKind) else ObjectKind(**k)
                             for k in self.object_kinds]
        self.fixed_objects = [o if isinstance(o, PlacedObject) else PlacedObject(**o)
                              for o in self.fixed_objects]
        self.object_count = tuple(int(v) for v in self.object_count)
        if len(self.object_count) != 2 or not 0 <= self.object_count[0] <= self.object_count[1]:
            raise SceneError(f"object_count must be (min, max), got {self.object_count}")
        if not self.ground:
            raise SceneError("ground: scenes need a ground plane")
        if self.object_count[1] > 0 and not self.object_kinds:
            raise SceneError("object_kinds: no kinds to place")
        if self.feat_channels < 3:
            raise SceneError("feat_channels must be >= 3")
        if not 0 <= self.radar_keep_prob <= 1:
            raise SceneError("radar_keep_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        d["camera_rig"]["image_dims"] = list(self.camera_rig.image_dims)
        d["object_count"] = list(self.object_count)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise SceneError(f"unknown scene spec fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise SceneError(str(exc)) from None


@dataclass
class SceneBundle:
    gt: SemanticGrid
    points: np.ndarray  # (K, 3)
    point_labels: np.ndarray  # (K,)
    pyramids: dict  # modality -> list of FeaturePyramid
    rig: list  # sensor models
    instances: np.ndarray = None  # dims, object index or -1
    velocity: np.ndarray = None  # dims + (2,)
    objects: list = field(default_factory=list)
    seed: int = 0

    @property
    def spec(self) -> GridSpec:
        return self.gt.spec


def class_codes(num_classes: int, code_dim: int, seed: int = CODE_SEED) -> np.ndarray:
    """Fixed per-class unit codes; row 0 (empty) is zero."""
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(max(code_dim, num_classes), max(code_dim, num_classes)))
    Qm, _ = np.linalg.qr(A)
    codes = Qm[:num_classes, :code_dim]
    codes /= np.linalg.norm(codes, axis=1, keepdims=True)
    codes[0] = 0.0
    return codes


def _footprint_mask(obj: PlacedObject, centers: np.ndarray) -> np.ndarray:
    x, y, z = centers[..., 0], centers[..., 1], centers[..., 2]
    dx, dy = x - obj.center[0], y - obj.center[1]
    z0 = obj.center[2]
    if obj.kind == "cylinder":
        r, h = obj.size[0], obj.size[1]
        return (dx * dx + dy * dy <= r * r) & (z >= z0) & (z < z0 + h)
    c, s = math.cos(obj.yaw), math.sin(obj.yaw)
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    L, Wd, H = obj.size
    return ((np.abs(lx) <= L / 2) & (np.abs(ly) <= Wd / 2) & (z >= z0) & (z < z0 + H))


def _half_extent(obj: PlacedObject) -> float:
    if obj.kind == "cylinder":
        return obj.size[0]
    return 0.5 * math.hypot(obj.size[0], obj.size[1])


def rasterize(spec: GridSpec, objects, ground: bool = True):
    """Labels and instance ids; ground first, later objects overwrite earlier ones."""
    centers = spec.centers()
    labels = np.zeros(spec.dims, dtype=np.int64)
    inst = np.full(spec.dims, -1, dtype=np.int64)
    if ground:
        labels[:, :, 0] = GROUND_LABEL
    for i, obj in enumerate(objects):
        m = _footprint_mask(obj, centers)
        labels[m] = obj.label
        inst[m] = i
    return labels, inst


def ground_top(spec: GridSpec) -> float:
    return spec.min_corner[2] + spec.voxel_size


def _place_objects(spec: SceneSpec, rng: np.random.Generator) -> list:
    g = spec.grid
    placed = list(spec.fixed_objects)
    n = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    if n == 0:
        return placed
    weights = np.array([k.weight for k in spec.object_kinds], dtype=np.float64)
    weights /= weights.sum()
    lo = np.asarray(g.min_corner[:2])
    hi = np.asarray(g.max_corner[:2])
    z0 = ground_top(g)
    max_r = spec.max_radius
    for _ in range(n):
        kind = spec.object_kinds[rng.choice(len(spec.object_kinds), p=weights)]
        for attempt in range(spec.max_retries):
            size = [float(rng.uniform(a, b)) for a, b in kind.size_range]
            yaw = float(rng.uniform(0, math.pi))
            base = g.min_corner[2] if kind.kind == "ground_patch" else z0
            obj = PlacedObject(kind.kind, kind.label, [0.0, 0.0, base], size, yaw)
            ext = _half_extent(obj)
            xy = rng.uniform(lo + ext, hi - ext) if np.all(hi - lo > 2 * ext) else None
            if xy is None:
                continue
            r = float(np.hypot(*xy))
            if r - ext < spec.min_radius or (max_r is not None and r > max_r):
                continue
            obj.center = [float(xy[0]), float(xy[1]), base]
            if kind.kind != "ground_patch" and any(
                    o.kind != "ground_patch"
                    and np.hypot(o.center[0] - xy[0], o.center[1] - xy[1])
                    < _half_extent(o) + ext + 0.5 for o in placed):
                continue
            if kind.dynamic:
                speed = float(rng.uniform(1.0, 10.0))
                obj.velocity = [speed * math.cos(yaw), speed * math.sin(yaw)]
            placed.append(obj)
            break
        else:
            raise SceneError(f"could not place a {kind.kind} (label {kind.label}) after "
                             f"{spec.max_retries} retries: min_radius/max_radius/spacing "
                             "constraints too tight for the grid")
    # ground patches go first so solid objects overwrite them
    return sorted(placed, key=lambda o: o.kind != "ground_patch")


def surface_voxels(labels: np.ndarray) -> np.ndarray:
    """Occupied voxels with at least one empty (or out-of-grid above) 6-neighbor."""
    occ = labels != 0
    pad = np.pad(occ, 1, constant_values=False)
    # the grid floor is not a visible surface
    pad[:, :, 0] = True
    exposed = np.zeros_like(occ)
    for ax in range(3):
        for sh in (-1, 1):
            nb = np.roll(pad, sh, axis=ax)[1:-1, 1:-1, 1:-1]
            exposed |= ~nb
    return occ & exposed


def sample_surface_points(spec: GridSpec, labels: np.ndarray, count: int,
                          rng: np.random.Generator):
    surf = np.argwhere(surface_voxels(labels))
    if len(surf) == 0 or count == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    pick = surf[rng.integers(0, len(surf), size=count)]
    margin = 1e-3
    jitter = rng.uniform(margin, 1 - margin, size=(count, 3))
    pts = np.asarray(spec.min_corner) + (pick + jitter) * spec.voxel_size
    return pts, labels[tuple(pick.T)]


def velocity_grid(spec: GridSpec, instances: np.ndarray, objects) -> np.ndarray:
    vel = np.zeros(spec.dims + (2,))
    for i, obj in enumerate(objects):
        vel[instances == i] = obj.velocity
    return vel


def avg_pool2(level: np.ndarray) -> np.ndarray:
    C, H, W = level.shape
    h2, w2 = H // 2, W // 2
    return level[:, :2 * h2, :2 * w2].reshape(C, h2, 2, w2, 2).mean(axis=(2, 4))


def _pyramid_levels(level0: np.ndarray, levels: int, noise: float,
                    rng: np.random.Generator) -> list:
    out = [level0]
    for _ in range(levels - 1):
        out.append(avg_pool2(out[-1]))
    if noise > 0:
        out = [lv + rng.normal(scale=noise, size=lv.shape) for lv in out]
    return out


@numba.njit(cache=True)
def _zbuffer(px, py, depth, half, rows, cols):
    zbuf = np.full((rows, cols), np.inf)
    owner = np.full((rows, cols), -1, dtype=np.int64)
    for n in range(px.shape[0]):
        i0 = max(int(math.ceil(py[n] - half[n] - 0.5)), 0)
        i1 = min(int(math.ceil(py[n] + half[n] - 0.5)), rows)
        j0 = max(int(math.ceil(px[n] - half[n] - 0.5)), 0)
        j1 = min(int(math.ceil(px[n] + half[n] - 0.5)), cols)
        for i in range(i0, i1):
            for j in range(j0, j1):
                if depth[n] < zbuf[i, j]:
                    zbuf[i, j] = depth[n]
                    owner[i, j] = n
    return zbuf, owner


def render_camera_features(bundle: SceneBundle, sensor: CameraSensor, levels: int = 2,
                           channels: int = 32, noise: float = 0.0, stride: int = 2,
                           dropout: float = 0.0, rng=None) -> FeaturePyramid:
    """Z-buffered class-code image of the occupied voxels, plus inverse depth.

    Each voxel covers a square of its projected size centered on its
    projected center; the nearest voxel wins every pixel.
    """
    rng = rng if rng is not None else np.random.default_rng(bundle.seed)
    spec = bundle.spec
    H, W = sensor.image_dims
    rows, cols = H // stride, W // stride
    codes = class_codes(DEFAULT_NUM_CLASSES, channels - 2)
    feats = np.zeros((channels, rows, cols))
    labels = bundle.gt.labels
    occ = np.argwhere(labels != 0)
    if len(occ):
        centers = np.asarray(spec.min_corner) + (occ + 0.5) * spec.voxel_size
        R, t = sensor.extrinsics[:3, :3], sensor.extrinsics[:3, 3]
        xs = centers @ R.T + t
        front = xs[:, 2] > 0.1
        xs, occ_f = xs[front], occ[front]
        K = sensor.intrinsics
        pix = xs @ K.T
        px = pix[:, 0] / pix[:, 2] / stride
        py = pix[:, 1] / pix[:, 2] / stride
        half = 0.5 * spec.voxel_size * K[0, 0] / xs[:, 2] / stride
        zbuf, owner = _zbuffer(px, py, xs[:, 2], half, rows, cols)
        hit = owner >= 0
        lab = labels[tuple(occ_f[owner[hit]].T)]
        feats[:channels - 2, hit] = codes[lab].T
        feats[channels - 2, hit] = 1.0 / zbuf[hit]
    if dropout > 0:
        feats *= rng.uniform(size=(1, rows, cols)) >= dropout
    return FeaturePyramid(sensor, _pyramid_levels(feats, levels, noise, rng))


def bev_sensor(spec: GridSpec) -> BevSensor:
    lo, hi = spec.min_corner, spec.max_corner
    return BevSensor((lo[0], lo[1], hi[0], hi[1]), (spec.dims[1], spec.dims[0]))


def render_bev_features(bundle: SceneBundle, kind: str = "lidar_bev", channels: int = 32,
                        levels: int = 2, noise: float = 0.0, dropout: float = 0.0,
                        keep_prob: float = 0.3, rng=None) -> FeaturePyramid:
    """Top-down class code of the highest occupied voxel plus its height.

    ``radar_bev`` keeps each populated cell with probability ``keep_prob``
    and adds a radial-velocity channel for dynamic objects.
    """
    if kind not in ("lidar_bev", "radar_bev"):
        raise ValueError(f"unknown BEV kind {kind!r}")
    rng = rng if rng is not None else np.random.default_rng(bundle.seed)
    spec = bundle.spec
    nx, ny, nz = spec.dims
    codes = class_codes(DEFAULT_NUM_CLASSES, channels - 2)
    labels = bundle.gt.labels
    occ = labels != 0
    has = occ.any(axis=2)
    top = nz - 1 - np.argmax(occ[:, :, ::-1], axis=2)
    ix, iy = np.nonzero(has)
    feats = np.zeros((channels, ny, nx))
    keep = np.ones(len(ix), dtype=bool)
    if kind == "radar_bev":
        keep = rng.uniform(size=len(ix)) < keep_prob
    ix, iy = ix[keep], iy[keep]
    tz = top[ix, iy]
    lab = labels[ix, iy, tz]
    feats[:channels - 2, iy, ix] = codes[lab].T
    feats[channels - 2, iy, ix] = (tz + 1) / nz
    if kind == "radar_bev" and bundle.velocity is not None and len(ix):
        v = bundle.velocity[ix, iy, tz]
        c = np.asarray(spec.min_corner[:2]) + (np.stack([ix, iy], 1) + 0.5) * spec.voxel_size
        r = c / np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-6)
        feats[channels - 1, iy, ix] = (v * r).sum(axis=1) / 10.0
    if dropout > 0:
        feats *= rng.uniform(size=(1, ny, nx)) >= dropout
    return FeaturePyramid(bev_sensor(spec), _pyramid_levels(feats, levels, noise, rng))


def bundle_from_labels(spec: GridSpec, labels: np.ndarray, seed: int = 0,
                       rig: Optional[list] = None, objects=(), instances=None,
                       points_per_scene: int = 0) -> SceneBundle:
    """Bare bundle (no pyramids) around an explicit label grid."""
    rng = np.random.default_rng(seed)
    pts, plab = sample_surface_points(spec, labels, points_per_scene, rng)
    if instances is None:
        instances = np.full(spec.dims, -1, dtype=np.int64)
    return SceneBundle(SemanticGrid(spec, labels=labels), pts, plab, {}, list(rig or []),
                       instances, velocity_grid(spec, instances, objects), list(objects), seed)


def gen_scene(spec: SceneSpec) -> SceneBundle:
    """Build a scene bundle from its spec; deterministic per seed."""
    ss = np.random.SeedSequence(spec.seed)
    place_rng, point_rng, cam_rng, lidar_rng, radar_rng = [np.random.default_rng(s)
                                                          for s in ss.spawn(5)]
    objects = _place_objects(spec, place_rng)
    labels, inst = rasterize(spec.grid, objects, spec.ground)
    rig = spec.camera_rig.sensors()
    bundle = bundle_from_labels(spec.grid, labels, spec.seed, rig, objects, inst, 0)
    bundle.points, bundle.point_labels = sample_surface_points(
        spec.grid, labels, spec.points_per_scene, point_rng)
    stride = spec.camera_rig.feature_stride
    bundle.pyramids = {
        "camera": [render_camera_features(bundle, s, spec.levels, spec.feat_channels,
                                          spec.feature_noise, stride,
                                          spec.dropout.get("camera", 0.0), cam_rng)
                   for s in rig],
        "lidar_bev": [render_bev_features(bundle, "lidar_bev", spec.feat_channels,
                                          spec.levels, spec.feature_noise,
                                          spec.dropout.get("lidar_bev", 0.0), rng=lidar_rng)],
        "radar_bev": [render_bev_features(bundle, "radar_bev", spec.feat_channels,
                                          spec.levels, spec.feature_noise,
                                          spec.dropout.get("radar_bev", 0.0),
                                          spec.radar_keep_prob, rng=radar_rng)],
    }
    return bundle


def occlusion_preset(spec: Optional[SceneSpec] = None, wall_radius: float = 6.0,
                     walls: bool = True, max_extent: float = 3.0) -> SceneSpec:
    """Ring of full-height walls around the cameras with objects placed outside it.

    Objects behind the ring have no camera-visible surface but appear in the
    BEV modalities.
    """
    base = spec or SceneSpec()
    g = base.grid
    z0 = g.min_corner[2]
    height = g.max_corner[2] - z0
    manmade = CLASS_NAMES.index("manmade")
    span = 2 * wall_radius + 1.0
    ring = []
    if walls:
        for cx, cy, yaw in ((wall_radius, 0.0, math.pi / 2), (-wall_radius, 0.0, math.pi / 2),
                            (0.0, wall_radius, 0.0), (0.0, -wall_radius, 0.0)):
            ring.append(PlacedObject("box", manmade, [cx, cy, z0], [span, 1.0, height], yaw))
    # only objects small enough to fit between the ring corners and the grid edge
    kinds = [k for k in base.object_kinds if k.kind != "ground_patch" and k.label != manmade
             and 0.5 * math.hypot(k.size_range[0][1], k.size_range[1][1]) <= max_extent]
    if not kinds:
        raise SceneError("occlusion_preset: no object kind fits behind the wall ring")
    d = base.to_dict()
    d.update(fixed_objects=[asdict(o) for o in ring], object_kinds=[asdict(k) for k in kinds],
             min_radius=wall_radius * math.sqrt(2) + 1.5,
             object_count=[min(base.object_count[0], 4), min(base.object_count[1], 6)])
    return SceneSpec.from_dict(d)


def camera_visible_voxels(bundle: SceneBundle, step_frac: float = 0.25) -> np.ndarray:
    """Boolean grid: occupied voxels whose center is seen by at least one camera.

    A center is seen when it projects inside the image in front of the camera
    and the segment from the optical center to it crosses no other occupied
    voxel.
    """
    spec = bundle.spec
    labels = bundle.gt.labels
    occ = labels != 0
    idx = np.argwhere(occ)
    seen = np.zeros(len(idx), dtype=bool)
    centers = np.asarray(spec.min_corner) + (idx + 0.5) * spec.voxel_size
    origin = np.asarray(spec.min_corner)
    dims = np.asarray(spec.dims)
    for cam in bundle.rig:
        if cam.kind != "camera":
            continue
        _, vis = project_points(cam, centers)
        cand = np.nonzero(vis & ~seen)[0]
        if not len(cand):
            continue
        c0 = cam.center
        for n in cand:
            seg = centers[n] - c0
            length = np.linalg.norm(seg)
            steps = np.arange(0.0, length - 0.75 * spec.voxel_size, step_frac * spec.voxel_size)
            if not len(steps):
                seen[n] = True
                continue
            pts = c0 + np.outer(steps / length, seg)
            vi = np.floor((pts - origin) / spec.voxel_size).astype(np.int64)
            inside = np.all((vi >= 0) & (vi < dims), axis=1)
            vi = vi[inside]
            hits = occ[vi[:, 0], vi[:, 1], vi[:, 2]]
            own = np.all(vi == idx[n], axis=1)
            if not np.any(hits & ~own):
                seen[n] = True
    out = np.zeros(spec.dims, dtype=bool)
    out[tuple(idx[seen].T)] = True
    return out


def hidden_objects(bundle: SceneBundle) -> list:
    """Indices of placed objects with no camera-visible voxel."""
    vis = camera_visible_voxels(bundle)
    out = []
    for i in range(len(bundle.objects)):
        m = bundle.instances == i
        if m.any() and not np.any(vis & m):
            out.append(i)
    return out


# scene bundle files -------------------------------------------------------

_POINTS_MAGIC = b"GPTS"


def save_bundle(bundle: SceneBundle, directory) -> None:
    """Directory layout: gt.gvox, points.bin, <modality>_<i>_L<l>.f32, manifest.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_gvox(d / "gt.gvox", bundle.gt, kind=0)
    pts = np.ascontiguousarray(bundle.points, dtype="<f4").reshape(-1, 3)
    hdr = _POINTS_MAGIC + struct.pack("<II", 1, len(pts))
    (d / "points.bin").write_bytes(hdr + pts.tobytes()
                                   + np.asarray(bundle.point_labels, dtype="<u2").tobytes())
    pyr_meta = {}
    for mod, pyrs in sorted(bundle.pyramids.items()):
        entries = []
        for i, pyr in enumerate(pyrs):
            files = []
            for lv, arr in enumerate(pyr.levels):
                name = f"{mod}_{i}_L{lv}.f32"
                (d / name).write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
                files.append({"file": name, "shape": list(arr.shape)})
            entries.append({"sensor": pyr.sensor.to_dict(), "levels": files})
        pyr_meta[mod] = entries
    if bundle.velocity is not None:
        (d / "velocity.f32").write_bytes(np.ascontiguousarray(bundle.velocity, "<f4").tobytes())
    if bundle.instances is not None:
        (d / "instances.i32").write_bytes(np.ascontiguousarray(bundle.instances, "<i4").tobytes())
    manifest = {
        "version": 1, "seed": bundle.seed, "grid": bundle.spec.to_dict(),
        "rig": [s.to_dict() for s in bundle.rig], "pyramids": pyr_meta,
        "objects": [asdict(o) for o in bundle.objects],
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_bundle(directory) -> SceneBundle:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    gt = read_gvox(d / "gt.gvox")
    raw = (d / "points.bin").read_bytes()
    if raw[:4] != _POINTS_MAGIC:
        raise SceneError(f"{d / 'points.bin'}: bad magic")
    _, n = struct.unpack_from("<II", raw, 4)
    pts = np.frombuffer(raw, "<f4", count=3 * n, offset=12).reshape(n, 3).astype(np.float64)
    plab = np.frombuffer(raw, "<u2", count=n, offset=12 + 12 * n).astype(np.int64)
    pyramids = {}
    for mod, entries in man["pyramids"].items():
        pyramids[mod] = [
            FeaturePyramid(sensor_from_dict(e["sensor"]),
                           [np.frombuffer((d / f["file"]).read_bytes(), "<f4")
                            .reshape(f["shape"]).astype(np.float64) for f in e["levels"]])
            for e in entries]
    spec = gt.spec
    vel = inst = None
    if (d / "velocity.f32").exists():
        vel = np.frombuffer((d / "velocity.f32").read_bytes(), "<f4").reshape(
            spec.dims + (2,)).astype(np.float64)
    if (d / "instances.i32").exists():
        inst = np.frombuffer((d / "instances.i32").read_bytes(), "<i4").reshape(
            spec.dims).astype(np.int64)
    return SceneBundle(gt, pts, plab, pyramids, [sensor_from_dict(s) for s in man["rig"]],
                       inst, vel, [PlacedObject(**o) for o in man["objects"]], man["seed"])


__all__ = [
    "SceneSpec", "SceneBundle", "ObjectKind", "PlacedObject", "CameraRig", "SceneError",
    "gen_scene", "render_camera_features", "render_bev_features", "occlusion_preset",
    "bundle_from_labels", "rasterize", "class_codes", "camera_visible_voxels",
    "hidden_objects", "save_bundle", "load_bundle", "bev_sensor", "camera_extrinsics",
    "surface_voxels", "avg_pool2",
]
