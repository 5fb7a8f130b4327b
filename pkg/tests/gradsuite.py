"""Registry of gradient-check cases: every differentiable operation with a random instance builder.

Each builder takes a numpy Generator and returns ``(loss_fn, params)``; the
loss is a fixed random projection of the operation's outputs so that every
output element carries gradient. Instances avoid kinks (relu at 0, clamp
bounds, texel boundaries) so central differences are well defined.
"""

import numpy as np

from gfocc.core import GaussianSet, GridSpec
from gfocc.diff import ops
from gfocc.diff.nn import init_mlp, mlp_forward
from gfocc.diff.tensor import DiffTensor
from gfocc.encoder import CameraSensor, FeaturePyramid, encode_modality, init_encoder
from gfocc.fusion import fuse, init_fusion
from gfocc.losses import bce_occupancy, lovasz_softmax, total_loss
from gfocc.refinement import GaussianTensors, PipelineConfig, init_model, init_refine, \
    refine_step, run_pipeline
from gfocc.encoder import BevSensor
from gfocc.splatting import SplatConfig, splat

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-5
ABS_FLOOR = 1e-9


def leaf(values, name=""):
    return DiffTensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)


def projected(out, rng):
    """Scalar loss sum(out * R) with a fixed random R (scaled to keep the loss O(1))."""
    outs = out if isinstance(out, tuple) else (out,)
    weights = [rng.normal(size=o.shape) / np.sqrt(max(o.size, 1)) for o in outs]

    def loss(vals):
        total = None
        for o, w in zip(vals if isinstance(vals, tuple) else (vals,), weights):
            term = ops.sum(ops.mul(o, w))
            total = term if total is None else ops.add(total, term)
        return total

    return loss


def away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def _unary(op, sampler):
    def build(rng):
        x = leaf(sampler(rng))
        proj = projected(op(x), rng)
        return (lambda: proj(op(x))), [x]
    return build


def _binary(op, shape_a, shape_b, sampler_b=None):
    def build(rng):
        a = leaf(rng.normal(size=shape_a))
        b = leaf(sampler_b(rng, shape_b) if sampler_b else rng.normal(size=shape_b))
        proj = projected(op(a, b), rng)
        return (lambda: proj(op(a, b))), [a, b]
    return build


def _bilinear(rng):
    C, H, W = 3, int(rng.integers(2, 6)), int(rng.integers(2, 6))
    fmap = leaf(rng.normal(size=(C, H, W)))
    K = 7
    # pixel coordinates strictly inside cells, plus a few clamped border samples
    px = rng.integers(0, W - 1, size=K) + rng.uniform(0.05, 0.95, size=K)
    py = rng.integers(0, H - 1, size=K) + rng.uniform(0.05, 0.95, size=K)
    px[0] = -0.3  # left of the first texel center: clamped in x
    py[1] = H - 0.6  # beyond the last texel center: clamped in y
    uv = leaf(np.stack([(px + 0.5) / W, (py + 0.5) / H], axis=1))
    op = lambda: ops.bilinear_sample2d(fmap, uv)
    proj = projected(op(), rng)
    return (lambda: proj(op())), [fmap, uv]


def _matmul(rng):
    n, k, m = rng.integers(1, 5, size=3)
    return _binary(ops.matmul, (2, n, k), (k, m))(rng)


def _concat(rng):
    a = leaf(rng.normal(size=(3, 2)))
    b = leaf(rng.normal(size=(3, 4)))
    op = lambda: ops.concat([a, b], axis=1)
    proj = projected(op(), rng)
    return (lambda: proj(op())), [a, b]


def _stack(rng):
    a = leaf(rng.normal(size=(3, 2)))
    b = leaf(rng.normal(size=(3, 2)))
    op = lambda: ops.stack([a, b], axis=1)
    proj = projected(op(), rng)
    return (lambda: proj(op())), [a, b]


def _slice(rng):
    a = leaf(rng.normal(size=(5, 4)))
    idx = rng.integers(0, 5, size=6)  # repeated rows exercise accumulation
    op = lambda: ops.add(ops.slice(a, (idx, slice(1, 3))), ops.slice(a, (slice(None), 0)).sum())
    proj = projected(op(), rng)
    return (lambda: proj(op())), [a]


def _segment_sum(rng):
    a = leaf(rng.normal(size=(6, 3)))
    ids = rng.integers(0, 3, size=6)
    op = lambda: ops.segment_sum(a, ids, 3)
    proj = projected(op(), rng)
    return (lambda: proj(op())), [a]


def _clamp(rng):
    x = rng.uniform(-2, 2, size=(4, 3))
    x = np.where(np.abs(np.abs(x) - 1.0) < 0.05, x * 1.2, x)
    return _unary(lambda t: ops.clamp(t, -1.0, 1.0), lambda r: x)(rng)


def _mlp(rng):
    layers = init_mlp(rng, [3, 5, 2], hidden_activation="tanh")
    x = leaf(rng.normal(size=(4, 3)))
    params = [x] + [p for l in layers for p in (l.weight, l.bias)]
    proj = projected(mlp_forward(layers, x), rng)
    return (lambda: proj(mlp_forward(layers, x))), params


PRIMITIVES = {
    "add": _binary(ops.add, (3, 4), (4,)),
    "sub": _binary(ops.sub, (3, 4), (3, 1)),
    "mul": _binary(ops.mul, (3, 4), (1, 4)),
    "div": _binary(ops.div, (3, 4), (3, 4), lambda r, s: r.uniform(0.5, 2.0, s)
                   * r.choice([-1, 1], s)),
    "neg": _unary(ops.neg, lambda r: r.normal(size=(3, 2))),
    "square": _unary(ops.square, lambda r: r.normal(size=(3, 2))),
    "matmul": _matmul,
    "concat": _concat,
    "stack": _stack,
    "slice": _slice,
    "reshape": _unary(lambda t: ops.reshape(t, (2, 6)), lambda r: r.normal(size=(3, 4))),
    "transpose": _unary(lambda t: ops.transpose(t, (1, 0, 2)), lambda r: r.normal(size=(2, 3, 2))),
    "relu": _unary(ops.relu, lambda r: away_from_zero(r, (4, 5))),
    "sigmoid": _unary(ops.sigmoid, lambda r: r.normal(size=(4, 5)) * 2),
    "tanh": _unary(ops.tanh, lambda r: r.normal(size=(4, 5))),
    "softplus": _unary(ops.softplus, lambda r: r.normal(size=(4, 5)) * 3),
    "exp": _unary(ops.exp, lambda r: r.normal(size=(4, 5))),
    "log": _unary(ops.log, lambda r: r.uniform(0.2, 3.0, size=(4, 5))),
    "softmax": _unary(lambda t: ops.softmax(t, axis=-1), lambda r: r.normal(size=(3, 5))),
    "softmax_axis0": _unary(lambda t: ops.softmax(t, axis=0), lambda r: r.normal(size=(3, 5))),
    "sum": _unary(lambda t: ops.sum(t, axis=1), lambda r: r.normal(size=(3, 4))),
    "sum_keepdims": _unary(lambda t: ops.sum(t, axis=0, keepdims=True),
                           lambda r: r.normal(size=(3, 4))),
    "mean": _unary(lambda t: ops.mean(t, axis=1), lambda r: r.normal(size=(3, 4))),
    "clamp": _clamp,
    "segment_sum": _segment_sum,
    "normalize": _unary(lambda t: ops.normalize(t, axis=-1), lambda r: r.normal(size=(4, 4))),
    "quat_to_rotmat": _unary(ops.quat_to_rotmat, lambda r: r.normal(size=(3, 4))),
    "bilinear_sample2d": _bilinear,
    "mlp": _mlp,
}


def random_set(rng, P, C, grid_extent=3.0, D=1):
    means = rng.uniform(0.5, grid_extent - 0.5, size=(P, 3))
    scales = rng.uniform(0.4, 1.2, size=(P, 3))
    q = rng.normal(size=(P, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(means, scales, q, rng.uniform(0.2, 0.9, P), rng.normal(size=(P, C)),
                       np.zeros((P, D)))


def _splat(rng):
    spec = GridSpec((0.0, 0.0, 0.0), 0.5, (6, 6, 6))
    gs = random_set(rng, 4, 5)
    params = [leaf(gs.means), leaf(gs.scales), leaf(gs.rotations * 1.1), leaf(gs.opacities),
              leaf(gs.logits)]
    cfg = SplatConfig(cutoff_sigma=4.0)
    op = lambda: splat(*params, spec, cfg)
    proj = projected(op(), rng)
    return (lambda: proj(op())), params


def camera_rig_fixture(rng, Cf=3, levels=2):
    K = np.array([[8.0, 0.0, 8.0], [0.0, 8.0, 6.0], [0.0, 0.0, 1.0]])
    cam = CameraSensor(K, np.eye(4), (12, 16))
    lv = [rng.normal(size=(Cf, 6, 8))]
    for _ in range(levels - 1):
        lv.append(rng.normal(size=(Cf, lv[-1].shape[1] // 2, lv[-1].shape[2] // 2)))
    return FeaturePyramid(cam, lv)


def _encoder(rng):
    D, Cf = 4, 3
    pyr = camera_rig_fixture(rng, Cf)
    params = init_encoder(rng, D, Cf, n_refs=2, n_samples=2, n_levels=2)
    # make the attention heads non-trivial
    params.attn.weight.values[...] = rng.normal(size=params.attn.weight.shape) * 0.3
    means = leaf(np.column_stack([rng.uniform(-0.5, 0.5, 2), rng.uniform(-0.4, 0.4, 2),
                                  rng.uniform(4.0, 6.0, 2)]))
    scales = leaf(rng.uniform(0.2, 0.5, size=(2, 3)))
    q = rng.normal(size=(2, 4))
    rots = leaf(q / np.linalg.norm(q, axis=1, keepdims=True))
    queries = leaf(rng.normal(size=(2, D)))
    leaves = [queries, means, scales, rots] + list(params.parameters().values())
    op = lambda: encode_modality(means, scales, rots, queries, [pyr], params)
    proj = projected(op(), rng)
    return (lambda: proj(op())), leaves


def _fusion(rng):
    D, P = 3, 4
    params = init_fusion(rng, D, 2, fusion_voxel_size=1.0)
    params.sc_kernel.values[...] = rng.normal(size=params.sc_kernel.shape) * 0.3
    params.sc_bias.values[...] = rng.normal(size=D)
    feats = [leaf(rng.normal(size=(P, D))), leaf(rng.normal(size=(P, D)))]
    means = np.array([[0.2, 0.3, 0.1], [0.7, 0.4, 0.6], [1.5, 0.5, 0.5], [3.5, 3.5, 3.5]])
    means = means + rng.uniform(0, 0.05, size=means.shape)
    leaves = feats + list(params.parameters().values())
    op = lambda: fuse(feats, means, params)
    proj = projected(op(), rng)
    return (lambda: proj(op())), leaves


def _refine(rng):
    D, C, P = 4, 3, 3
    params = init_refine(rng, D, C, scale_min=0.05, scale_max=20.0)
    g = GaussianTensors(leaf(rng.normal(size=(P, 3))), leaf(np.ones((P, 3))),
                        leaf(np.tile([1.0, 0, 0, 0], (P, 1))), leaf(np.full(P, 0.5)),
                        leaf(np.zeros((P, C))))
    Q = leaf(rng.normal(size=(P, D)))
    leaves = [Q, g.means] + list(params.parameters().values())

    def op():
        out = refine_step(g, Q, params)
        return (out.means, out.scales, out.rotations, out.opacities, out.logits)

    proj = projected(op(), rng)
    return (lambda: proj(op())), leaves


def _bce(rng):
    alpha = leaf(rng.uniform(0.05, 0.95, size=(3, 3, 2)))
    gt = rng.integers(0, 3, size=(3, 3, 2))
    return (lambda: bce_occupancy(alpha, gt)), [alpha]


def _lovasz(rng):
    logits = leaf(rng.normal(size=(8, 3)) * 2)
    gt = rng.integers(0, 3, size=8)
    return (lambda: lovasz_softmax(ops.softmax(logits, axis=-1), gt)), [logits]


def _total_loss(rng):
    a1 = leaf(rng.uniform(0.05, 0.95, size=(2, 2, 2)))
    a2 = leaf(rng.uniform(0.05, 0.95, size=(2, 2, 2)))
    l1 = leaf(rng.normal(size=(2, 2, 2, 3)))
    l2 = leaf(rng.normal(size=(2, 2, 2, 3)))
    gt = rng.integers(0, 3, size=(2, 2, 2))
    op = lambda: total_loss([(a1, ops.softmax(l1)), (a2, ops.softmax(l2))], gt)
    return op, [a1, a2, l1, l2]


def small_pipeline(rng, modalities=("camera", "lidar_bev")):
    # coarse grid fully covered by the Gaussians: far-tail voxels with near-equal
    # alpha would make the Lovasz sort order flip inside the FD step
    spec = GridSpec((-2.0, -2.0, 3.0), 1.0, (4, 4, 3))
    cfg = PipelineConfig(blocks=2, gaussian_count=3, width=4, modalities=modalities,
                         feat_channels=3, n_refs=2, n_samples=2, n_levels=2, seed=int(rng.integers(1e6)),
                         num_classes=3)
    model = init_model(cfg, spec)
    model.init.means.values[...] = np.column_stack([rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3),
                                                   rng.uniform(4.0, 5.5, 3)])
    cam = camera_rig_fixture(rng, 3)
    bev = FeaturePyramid(BevSensor((-2.0, -2.0, 2.0, 2.0), (8, 8)),
                         [rng.normal(size=(3, 8, 8)), rng.normal(size=(3, 4, 4))])
    inputs = {"camera": [cam], "lidar_bev": [bev]}
    gt = rng.integers(0, 3, size=spec.dims)
    return spec, cfg, model, inputs, gt


def _pipeline(rng):
    spec, cfg, model, inputs, gt = small_pipeline(rng)
    params = model.parameters()
    # one small tensor per stage; the large weights are covered by the per-stage cases
    picked = [params[k] for k in ("init.means", "init.queries", "block0.enc.camera.attn.bias",
                                  "block0.fusion.sc.bias", "block1.enc.lidar_bev.value.bias",
                                  "block1.refine.1.bias")]

    def op():
        out = run_pipeline(inputs, model, spec)
        return total_loss(out.blocks, gt)

    return op, picked


COMPOSITES = {
    "splat": _splat,
    "encoder": _encoder,
    "fusion": _fusion,
    "refine_step": _refine,
    "bce_occupancy": _bce,
    "lovasz_softmax": _lovasz,
    "total_loss": _total_loss,
    "pipeline": _pipeline,
}
