import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import gradsuite
import oracles
from gfocc.diff import (AdamState, DiffTensor, ShapeError, StaleTapeError, Tape, adam_step,
                        backward, init_linear, init_mlp, lr_schedule, mlp_forward, ops)
from gfocc.diff.checkpoint import FormatError, read_checkpoint, write_checkpoint
from gfocc.diff.gradcheck import analytic_grads, check_gradients
from gfocc.diff.nn import Linear
from gfocc.diff.tensor import get_dtype, record

seeds = st.integers(0, 2**32 - 1)
CASES = {**gradsuite.PRIMITIVES, **gradsuite.COMPOSITES}


def leaf(v):
    return DiffTensor(np.array(v, dtype=np.float64), requires_grad=True)


class TestForward:
    def test_softmax_of_zeros(self, f64):
        np.testing.assert_allclose(ops.softmax(np.zeros(3)).values, [1 / 3] * 3, rtol=1e-15)

    def test_bilinear_center_is_texel_mean(self, f64):
        fmap = np.arange(8.0).reshape(2, 2, 2)
        out = ops.bilinear_sample2d(fmap, [[0.5, 0.5]]).values[0]
        np.testing.assert_allclose(out, fmap.reshape(2, 4).mean(axis=1))

    def test_bilinear_matches_oracle(self, f64, rng):
        fmap = rng.normal(size=(3, 5, 7))
        uv = rng.uniform(-0.2, 1.2, size=(30, 2))
        out = ops.bilinear_sample2d(fmap, uv).values
        for k in range(len(uv)):
            np.testing.assert_allclose(out[k], oracles.bilinear(fmap, *uv[k]), atol=1e-12)

    def test_bilinear_clamp_has_zero_gradient_along_clamped_axis(self, f64, rng):
        fmap = DiffTensor(rng.normal(size=(2, 4, 4)))
        uv = leaf([[-0.3, 0.4], [0.6, 1.4]])
        with Tape() as tape:
            loss = ops.sum(ops.bilinear_sample2d(fmap, uv))
        backward(tape, loss)
        assert uv.grad[0, 0] == 0.0 and uv.grad[0, 1] != 0.0
        assert uv.grad[1, 1] == 0.0 and uv.grad[1, 0] != 0.0

    def test_precision_modes(self):
        assert get_dtype() == np.float32
        assert DiffTensor([1.0]).dtype == np.float32
        from gfocc.diff import precision
        with precision("test"):
            assert DiffTensor([1.0]).dtype == np.float64
        with pytest.raises(ValueError):
            with precision("half"):
                pass

    @pytest.mark.parametrize("op,args", [
        (ops.matmul, (np.zeros((2, 3)), np.zeros((2, 3)))),
        (ops.add, (np.zeros((2, 3)), np.zeros((4,)))),
        (ops.concat, ([np.zeros((2, 3)), np.zeros((3, 3))],)),
        (ops.bilinear_sample2d, (np.zeros((2, 2)), np.zeros((1, 2)))),
    ])
    def test_shape_errors_name_the_primitive(self, op, args):
        with pytest.raises(ShapeError) as exc:
            op(*args)
        assert op.__name__ in str(exc.value)
        assert "(" in str(exc.value)


class TestBackward:
    def test_sum_gradient_is_ones(self, f64):
        x = leaf(np.arange(6.0).reshape(2, 3))
        with Tape() as tape:
            loss = ops.sum(x)
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_sum_of_squares_gradient(self, f64, rng):
        x = leaf(rng.normal(size=5))
        with Tape() as tape:
            loss = ops.sum(ops.mul(x, x))
        backward(tape, loss)
        np.testing.assert_allclose(x.grad, 2 * x.values)

    def test_non_scalar_loss_rejected(self, f64):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            y = ops.mul(x, 2.0)
        with pytest.raises(ShapeError):
            backward(tape, y)

    def test_second_backward_is_stale(self, f64):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            loss = ops.sum(x)
        backward(tape, loss)
        with pytest.raises(StaleTapeError):
            backward(tape, loss)
        tape.reset()
        with tape:
            loss = ops.sum(x)
        backward(tape, loss)

    def test_loss_from_other_tape_rejected(self, f64):
        x = leaf([1.0])
        with Tape():
            loss = ops.sum(x)
        with pytest.raises(ValueError):
            backward(Tape(), loss)

    def test_tape_is_topologically_ordered(self, f64, rng):
        layers = init_mlp(rng, [3, 4, 2])
        with Tape() as tape:
            loss = ops.sum(mlp_forward(layers, leaf(rng.normal(size=(2, 3)))))
        produced = {}
        for k, node in enumerate(tape.nodes):
            for t in node.inputs:
                if t._node is not None:
                    assert produced[id(t)] < k
            for o in node.outputs:
                produced[id(o)] = k
        assert tape.nodes[-1] is loss._node

    def test_gradients_accumulate_across_tapes(self, f64, rng):
        x = leaf(rng.normal(size=3))
        for _ in range(2):
            with Tape() as tape:
                loss = ops.sum(ops.square(x))
            backward(tape, loss)
        np.testing.assert_allclose(x.grad, 4 * x.values)

    def test_untracked_inputs_record_nothing(self, f64):
        with Tape() as tape:
            ops.add(DiffTensor([1.0]), DiffTensor([2.0]))
        assert len(tape) == 0


class TestMLP:
    def test_zero_layer_gives_zero(self, f64):
        layer = Linear(leaf(np.zeros((3, 2))), leaf(np.zeros(2)))
        np.testing.assert_array_equal(mlp_forward([layer], leaf(np.ones((4, 3)))).values, 0.0)

    def test_single_layer_is_affine(self, f64, rng):
        layer = init_linear(rng, 3, 2)
        layer.bias.values[...] = rng.normal(size=2)
        x = rng.normal(size=(5, 3))
        np.testing.assert_allclose(mlp_forward([layer], DiffTensor(x)).values,
                                   x @ layer.weight.values + layer.bias.values)

    def test_dimension_mismatch(self, f64, rng):
        with pytest.raises(ShapeError):
            mlp_forward(init_mlp(rng, [3, 2]), DiffTensor(np.zeros((1, 4))))


class TestGradientChecker:
    def test_detects_a_wrong_vjp(self, f64, rng):
        def bad_square(a):
            out = DiffTensor(a.values ** 2)
            record("bad_square", (a,), out, lambda g: (3.0 * g * a.values,))
            return out

        x = leaf(rng.uniform(0.5, 1.0, 4))
        assert check_gradients(lambda: ops.sum(bad_square(x)), [x]) > 0.1

    @pytest.mark.parametrize("name", sorted(CASES))
    def test_case_matches_finite_differences(self, f64, name):
        tol = gradsuite.PRIMITIVE_TOL if name in gradsuite.PRIMITIVES else gradsuite.COMPOSITE_TOL
        for i in range(2):
            fn, params = CASES[name](np.random.default_rng(1000 + i))
            assert check_gradients(fn, params, atol=gradsuite.ABS_FLOOR) <= tol


class TestOptimizer:
    def test_schedule_examples(self):
        assert lr_schedule(250, 500, 2000, 2e-4) == pytest.approx(1e-4, rel=1e-15)
        assert lr_schedule(500, 500, 2000, 2e-4) == pytest.approx(2e-4, rel=1e-15)
        assert lr_schedule(2000, 500, 2000, 2e-4) == pytest.approx(0.0, abs=1e-20)
        assert lr_schedule(0, 500, 2000, 2e-4) == 0.0
        assert lr_schedule(5000, 500, 2000, 2e-4) == lr_schedule(2000, 500, 2000, 2e-4)
        mid = lr_schedule(1250, 500, 2000, 2e-4)
        assert mid == pytest.approx(2e-4 * 0.5 * (1 + math.cos(math.pi * 0.5)))

    def test_adamw_matches_reference(self, f64, rng):
        p = leaf(rng.normal(size=(2, 3)))
        q = leaf(rng.normal(size=3))
        ref_p, ref_q = p.values.copy(), q.values.copy()
        st_ = AdamState(lr=0.1, weight_decay=0.05)
        m = {"p": 0.0, "q": 0.0}
        v = {"p": 0.0, "q": 0.0}
        for t in range(1, 4):
            gp, gq = rng.normal(size=(2, 3)), rng.normal(size=3)
            adam_step(st_, {"p": p, "q": q}, {"p": gp, "q": gq}, no_decay={"q"})
            for name, g in (("p", gp), ("q", gq)):
                m[name] = 0.9 * m[name] + 0.1 * g
                v[name] = 0.999 * v[name] + 0.001 * g * g
                upd = (m[name] / (1 - 0.9 ** t)) / (np.sqrt(v[name] / (1 - 0.999 ** t)) + 1e-8)
                if name == "p":
                    ref_p = ref_p * (1 - 0.1 * 0.05) - 0.1 * upd
                else:
                    ref_q = ref_q - 0.1 * upd
        np.testing.assert_allclose(p.values, ref_p, rtol=1e-12)
        np.testing.assert_allclose(q.values, ref_q, rtol=1e-12)
        assert st_.step == 3
        assert st_.m["p"].shape == p.shape and st_.v["q"].shape == q.shape

    def test_adam_shape_mismatch(self, f64):
        with pytest.raises(ShapeError):
            adam_step(AdamState(), {"p": leaf(np.zeros(3))}, {"p": np.zeros(2)})

    def test_parameters_without_grad_are_skipped(self, f64):
        p = leaf(np.ones(3))
        adam_step(AdamState(weight_decay=0.5), {"p": p})
        np.testing.assert_array_equal(p.values, 1.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        tensors = {"a.weight": rng.normal(size=(3, 4)), "b": rng.normal(size=5),
                   "scalar": np.array(2.5), "üñí": np.zeros((0, 2))}
        path = tmp_path / "w.gfwt"
        write_checkpoint(path, tensors)
        back = read_checkpoint(path)
        assert list(back) == list(tensors)
        for k in tensors:
            np.testing.assert_array_equal(back[k], tensors[k].astype(np.float32))
        write_checkpoint(tmp_path / "again.gfwt", back)
        assert (tmp_path / "again.gfwt").read_bytes() == path.read_bytes()

    def test_bad_files(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(FormatError):
            read_checkpoint(tmp_path / "x")
        write_checkpoint(tmp_path / "y", {"a": np.ones(2)})
        (tmp_path / "z").write_bytes((tmp_path / "y").read_bytes() + b"\0")
        with pytest.raises(FormatError):
            read_checkpoint(tmp_path / "z")


@pytest.mark.invariant
class TestDiffInvariants:
    @given(seeds)
    def test_backward_is_linear_in_the_loss(self, f64, seed):
        rng = np.random.default_rng(seed)
        layers = init_mlp(rng, [3, 4, 2], hidden_activation="tanh")
        x = leaf(rng.normal(size=(3, 3)))
        params = [x] + [p for l in layers for p in (l.weight, l.bias)]
        w1, w2 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        l1 = lambda: ops.sum(ops.mul(mlp_forward(layers, x), w1))
        l2 = lambda: ops.sum(ops.square(ops.mul(mlp_forward(layers, x), w2)))
        g1 = analytic_grads(l1, params)
        g2 = analytic_grads(l2, params)
        g12 = analytic_grads(lambda: ops.add(l1(), l2()), params)
        for a, b, c in zip(g1, g2, g12):
            np.testing.assert_allclose(c, a + b, rtol=0, atol=1e-12)

    @given(seeds)
    def test_replay_is_bit_identical(self, f64, seed):
        fn, params = CASES["encoder"](np.random.default_rng(seed))
        g1 = analytic_grads(fn, params)
        v1 = fn().values.copy()
        g2 = analytic_grads(fn, params)
        assert np.array_equal(fn().values, v1)
        for a, b in zip(g1, g2):
            assert np.array_equal(a, b)

    @given(seeds)
    def test_forward_values_are_finite(self, f64, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng.normal(size=(4, 5)) * 30)
        for op in (ops.sigmoid, ops.tanh, ops.softplus, lambda t: ops.softmax(t, axis=-1),
                   lambda t: ops.normalize(t, axis=-1)):
            assert np.all(np.isfinite(op(x).values))
