import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from gfocc.core import SemanticGaussian, quat_multiply, quat_to_matrix
from gfocc.diff import DiffTensor, ShapeError
from gfocc.encoder import (
    BevSensor, CameraSensor, FeaturePyramid, attention_heads, deformable_attention,
    encode_modality, gen_reference_points, init_encoder, project, project_points,
    reference_points, sensor_from_dict,
)

seeds = st.integers(0, 2**32 - 1)
K = np.array([[20.0, 0.0, 16.0], [0.0, 20.0, 12.0], [0.0, 0.0, 1.0]])


def camera(dims=(24, 32), extrinsics=None):
    return CameraSensor(K, np.eye(4) if extrinsics is None else extrinsics, dims)


def pyramid(rng, sensor, Cf=3, levels=2, hw=(6, 8)):
    lv = []
    for i in range(levels):
        lv.append(rng.normal(size=(Cf, max(1, hw[0] >> i), max(1, hw[1] >> i))))
    return FeaturePyramid(sensor, lv)


def random_params(rng, D=4, Cf=3, n_refs=2, n_samples=3, n_levels=2):
    p = init_encoder(rng, D, Cf, n_refs, n_samples, n_levels)
    for t in p.parameters().values():
        t.values[...] = rng.normal(size=t.shape) * 0.5
    return p


def random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def gaussians_in_view(rng, P):
    means = np.column_stack([rng.uniform(-1, 1, P), rng.uniform(-1, 1, P), rng.uniform(4, 8, P)])
    q = rng.normal(size=(P, 4))
    return means, rng.uniform(0.2, 0.6, (P, 3)), q / np.linalg.norm(q, axis=1, keepdims=True)


class TestSensors:
    def test_camera_validation(self):
        with pytest.raises(ValueError):
            CameraSensor(np.zeros((3, 3)), np.eye(4), (4, 4))
        bad = np.eye(4)
        bad[0, 0] = 2.0
        with pytest.raises(ValueError):
            CameraSensor(K, bad, (4, 4))
        with pytest.raises(ValueError):
            BevSensor((0, 0, 0, 1), (4, 4))

    def test_sensor_dict_round_trip(self):
        for s in (camera(), BevSensor((-2, -3, 4, 5), (8, 6))):
            back = sensor_from_dict(s.to_dict())
            assert back.to_dict() == s.to_dict()

    def test_pyramid_validation(self, rng):
        with pytest.raises(ShapeError):
            FeaturePyramid(camera(), [np.zeros((3, 4, 4)), np.zeros((2, 2, 2))])
        with pytest.raises(ValueError):
            FeaturePyramid(camera(), [])


class TestProject:
    def test_optical_axis_hits_principal_point(self):
        uv = project(camera(), [0.0, 0.0, 1.0])
        assert uv == pytest.approx((16.0 / 32, 12.0 / 24))

    def test_behind_and_near_plane(self):
        assert project(camera(), [0.0, 0.0, -1.0]) is None
        assert project(camera(), [0.0, 0.0, 0.05]) is None
        assert project(camera(), [100.0, 0.0, 1.0]) is None  # outside the image

    def test_extrinsics_applied(self):
        T = np.eye(4)
        T[:3, 3] = [0.0, 0.0, 2.0]  # world origin sits 2 m in front of the camera
        assert project(camera(extrinsics=T), [0.0, 0.0, 0.0]) == pytest.approx((0.5, 0.5))

    def test_bev(self):
        bev = BevSensor((-4.0, -2.0, 4.0, 6.0), (8, 8))
        assert project(bev, [0.0, 2.0, 17.0]) == pytest.approx((0.5, 0.5))
        assert project(bev, [4.5, 2.0, 0.0]) is None


class TestReferencePoints:
    def test_zero_offset_collapses_to_mean(self, rng, f64):
        p = random_params(rng)
        for layer in p.offset_mlp:
            layer.weight.values[...] = 0
            layer.bias.values[...] = 0
        g = SemanticGaussian([1.0, 2.0, 3.0], [0.5, 1.0, 2.0], random_quat(rng), 0.5, [0.0])
        pts = gen_reference_points(g, rng.normal(size=4), p)
        np.testing.assert_array_equal(pts, np.tile(g.mean, (2, 1)))

    def test_matches_formula(self, rng, f64):
        p = random_params(rng)
        g = SemanticGaussian(rng.normal(size=3), rng.uniform(0.3, 2, 3), random_quat(rng), 0.5,
                             [0.0])
        q = rng.normal(size=4)
        h = np.tanh(q @ p.offset_mlp[0].weight.values + p.offset_mlp[0].bias.values) \
            if p.offset_mlp[0].activation == "tanh" else \
            np.maximum(q @ p.offset_mlp[0].weight.values + p.offset_mlp[0].bias.values, 0)
        o = (h @ p.offset_mlp[1].weight.values + p.offset_mlp[1].bias.values).reshape(2, 3)
        R = oracles.rotation_from_quat(g.rotation)
        expected = g.mean + (R @ np.diag(g.scale) @ o.T).T
        np.testing.assert_allclose(gen_reference_points(g, q, p), expected, atol=1e-12)


class TestDeformableAttention:
    def test_one_hot_zero_offset_identity_value(self, rng, f64):
        p = random_params(rng, D=3, Cf=3, n_refs=1, n_samples=2, n_levels=2)
        p.attn.weight.values[...] = 0
        b = np.zeros((1, 2, 2, 3))
        b[0, 1, 0, 2] = 80.0  # level 1, sample 0 dominates
        p.attn.bias.values[...] = b.reshape(-1)
        p.value_proj.weight.values[...] = np.eye(3)
        p.value_proj.bias.values[...] = 0
        pyr = pyramid(rng, camera())
        uv = (0.37, 0.61)
        out = deformable_attention(rng.normal(size=3), uv, pyr, p).values
        np.testing.assert_allclose(out, oracles.bilinear(pyr.levels[1], *uv), atol=1e-12)

    def test_constant_features(self, rng, f64):
        p = random_params(rng)
        pyr = FeaturePyramid(camera(), [np.full((3, 6, 8), 1.5), np.full((3, 3, 4), 1.5)])
        out = deformable_attention(rng.normal(size=4), (0.2, 0.9), pyr, p).values
        expected = 1.5 * np.ones(3) @ p.value_proj.weight.values + p.value_proj.bias.values
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_matches_enumeration(self, rng, f64):
        for _ in range(10):
            p = random_params(rng)
            pyr = pyramid(rng, camera())
            q, uv, ref = rng.normal(size=4), rng.uniform(0, 1, 2), int(rng.integers(2))
            want = oracles.deformable_attention_enum(
                q, uv, pyr.levels, p.attn.weight.values, p.attn.bias.values,
                p.value_proj.weight.values, p.value_proj.bias.values, 2, 3, ref)
            got = deformable_attention(q, uv, pyr, p, ref=ref).values
            np.testing.assert_allclose(got, want, atol=1e-9)

    def test_level_mismatch(self, rng, f64):
        p = random_params(rng, n_levels=2)
        with pytest.raises(ShapeError):
            deformable_attention(np.zeros(4), (0.5, 0.5), pyramid(rng, camera(), levels=1), p)


class TestEncodeModality:
    def test_behind_camera_gives_zero(self, rng, f64):
        p = random_params(rng)
        means = np.array([[0.0, 0.0, -5.0], [0.0, 0.0, 5.0]])
        out = encode_modality(means, np.full((2, 3), 0.1), np.tile([1.0, 0, 0, 0], (2, 1)),
                              rng.normal(size=(2, 4)), [pyramid(rng, camera())], p).values
        np.testing.assert_array_equal(out[0], 0.0)
        assert np.any(out[1] != 0)

    def test_single_sensor_single_ref_is_one_attention_call(self, rng, f64):
        p = random_params(rng, n_refs=1)
        pyr = pyramid(rng, camera())
        means, scales, rots = gaussians_in_view(rng, 1)
        q = rng.normal(size=(1, 4))
        ref = reference_points(means, scales, rots, q, p).values[0, 0]
        want = deformable_attention(q[0], project(pyr.sensor, ref), pyr, p).values
        got = encode_modality(means, scales, rots, q, [pyr], p).values[0]
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_sums_over_sensors_and_visible_refs(self, rng, f64):
        p = random_params(rng, n_refs=3)
        T = np.eye(4)
        T[:3, :3] = quat_to_matrix([np.cos(0.2), 0, np.sin(0.2), 0])
        pyrs = [pyramid(rng, camera()), pyramid(rng, camera(extrinsics=T))]
        means, scales, rots = gaussians_in_view(rng, 4)
        scales = scales * 6  # spread refs so some leave the view
        q = rng.normal(size=(4, 4))
        refs = reference_points(means, scales, rots, q, p).values
        want = np.zeros((4, 4))
        n_vis = 0
        for pyr in pyrs:
            for i in range(4):
                for r in range(3):
                    uv = project(pyr.sensor, refs[i, r])
                    if uv is not None:
                        n_vis += 1
                        want[i] += deformable_attention(q[i], uv, pyr, p, ref=r).values
        assert 0 < n_vis < 24
        got = encode_modality(means, scales, rots, q, pyrs, p).values
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_channel_mismatch(self, rng, f64):
        p = random_params(rng)
        means, scales, rots = gaussians_in_view(rng, 2)
        with pytest.raises(ShapeError):
            encode_modality(means, scales, rots, rng.normal(size=(2, 4)),
                            [pyramid(rng, camera(), Cf=3), pyramid(rng, camera(), Cf=2)], p)
        with pytest.raises(ValueError):
            encode_modality(means, scales, rots, rng.normal(size=(2, 4)), [], p)


@pytest.mark.invariant
class TestEncoderInvariants:
    @given(seeds)
    def test_attention_weights_sum_to_one(self, f64, seed):
        rng = np.random.default_rng(seed)
        p = random_params(rng, n_refs=3, n_samples=2, n_levels=3)
        _, w = attention_heads(rng.normal(size=(5, 4)) * 3, p)
        np.testing.assert_allclose(w.values.sum(axis=(2, 3)), 1.0, atol=1e-6)

    @given(seeds)
    def test_permutation_equivariant(self, f64, seed):
        rng = np.random.default_rng(seed)
        p = random_params(rng)
        pyrs = [pyramid(rng, camera()), pyramid(rng, BevSensor((-2, -2, 2, 2), (6, 8)))]
        means, scales, rots = gaussians_in_view(rng, 5)
        q = rng.normal(size=(5, 4))
        perm = rng.permutation(5)
        base = encode_modality(means, scales, rots, q, pyrs, p).values
        moved = encode_modality(means[perm], scales[perm], rots[perm], q[perm], pyrs, p).values
        np.testing.assert_allclose(moved, base[perm], atol=1e-12)

    @given(seeds)
    def test_scale_and_rotation_equivariance(self, f64, seed):
        rng = np.random.default_rng(seed)
        p = random_params(rng, n_refs=3)
        g = SemanticGaussian(rng.normal(size=3), rng.uniform(0.2, 2, 3), random_quat(rng), 0.5,
                             [0.0])
        q = rng.normal(size=4)
        base = gen_reference_points(g, q, p) - g.mean
        doubled = SemanticGaussian(g.mean, 2 * g.scale, g.rotation, 0.5, [0.0])
        np.testing.assert_allclose(gen_reference_points(doubled, q, p) - g.mean, 2 * base,
                                   atol=1e-12)
        q0 = random_quat(rng)
        turned = SemanticGaussian(g.mean, g.scale, quat_multiply(q0, g.rotation), 0.5, [0.0])
        np.testing.assert_allclose(gen_reference_points(turned, q, p) - g.mean,
                                   base @ quat_to_matrix(q0).T, atol=1e-9)
        for layer in p.offset_mlp:
            layer.weight.values[...] = 0
            layer.bias.values[...] = 0
        np.testing.assert_allclose(gen_reference_points(g, q, p), np.tile(g.mean, (3, 1)),
                                   atol=0)

    @given(seeds)
    def test_visibility_monotone_in_image_bounds(self, f64, seed):
        rng = np.random.default_rng(seed)
        H, W = int(rng.integers(8, 40)), int(rng.integers(8, 40))
        h, w = int(rng.integers(1, H + 1)), int(rng.integers(1, W + 1))
        pts = rng.normal(size=(50, 3)) * [3, 3, 4] + [0, 0, 2]
        _, vis_big = project_points(camera((H, W)), pts)
        _, vis_small = project_points(camera((h, w)), pts)
        assert not np.any(vis_small & ~vis_big)
