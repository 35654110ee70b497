"""Numerics substrate: forward semantics, reverse-mode gradients, oracles."""

import math

import numpy as np
import pytest

from sonoseg import tensor as T
from sonoseg.tensor import ShapeError, Tensor, backward, grad_check


def t(data, dtype=np.float64, rg=True):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=rg)


class TestMatmul:
    def test_identity(self):
        a = t([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(t(np.eye(2)), a)
        np.testing.assert_allclose(out.data, a.data)

    def test_hand_product(self):
        out = T.matmul(t([[1.0, 2.0], [3.0, 4.0]]), t([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_allclose(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_inner_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="inner extents"):
            T.matmul(t(np.zeros((2, 3))), t(np.zeros((4, 2))))

    def test_against_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(-1, 1, (8, 8)).astype(np.float32)
        b = rng.uniform(-1, 1, (8, 8)).astype(np.float32)
        got = T.matmul(Tensor(a), Tensor(b)).data
        want = np.zeros((8, 8), dtype=np.float64)
        for i in range(8):
            for j in range(8):
                for k in range(8):
                    want[i, j] += float(a[i, k]) * float(b[k, j])
        assert np.max(np.abs(got - want)) < 1e-5

    def test_batched(self):
        rng = np.random.default_rng(1)
        a = rng.random((3, 4, 5))
        b = rng.random((3, 5, 2))
        out = T.matmul(t(a), t(b))
        np.testing.assert_allclose(out.data, a @ b)


class TestElementwise:
    def test_sigmoid_symmetry(self):
        assert T.sigmoid(t([0.0])).item() == pytest.approx(0.5)

    def test_add(self):
        np.testing.assert_allclose(T.add(t([1.0, 2.0]), t([3.0, 4.0])).data, [4.0, 6.0])

    def test_gelu_at_zero(self):
        assert T.gelu(t([0.0])).item() == 0.0

    def test_dispatcher(self):
        out = T.elementwise("mul", t([2.0]), t([3.0]))
        assert out.item() == 6.0
        with pytest.raises(ValueError, match="unknown elementwise op"):
            T.elementwise("pow", t([1.0]), t([2.0]))

    def test_incompatible_shapes_rejected(self):
        with pytest.raises(ShapeError):
            T.add(t(np.zeros((2, 3))), t(np.zeros((4,))))

    def test_sigmoid_extreme_logits_finite(self):
        out = T.sigmoid(t([-500.0, 500.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [0.0, 1.0], atol=1e-12)


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(T.softmax(t([0.0, 0.0])).data, [0.5, 0.5])

    def test_large_inputs_stable(self):
        out = T.softmax(t([1000.0, 1000.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_log_inputs_closed_form(self):
        out = T.softmax(t([math.log(1), math.log(2), math.log(3)]))
        np.testing.assert_allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)

    def test_rows_sum_to_one_and_shift_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-5, 5, (6, 9))
        out = T.softmax(Tensor(x.astype(np.float32)), axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
        shifted = T.softmax(Tensor((x + 7.25).astype(np.float32)), axis=-1).data
        np.testing.assert_allclose(out, shifted, atol=1e-6)

    def test_axis_out_of_bounds(self):
        with pytest.raises(ShapeError):
            T.softmax(t([1.0, 2.0]), axis=3)


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = T.layer_norm(t([[5.0, 5.0, 5.0]]), t([1.0, 1.0, 1.0]), t([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-9)

    def test_two_point_row(self):
        out = T.layer_norm(t([[1.0, 3.0]]), t([1.0, 1.0]), t([0.0, 0.0]), eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)

    def test_row_statistics(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(-1, 1, (10, 32)).astype(np.float32))
        out = T.layer_norm(x, Tensor(np.ones(32, np.float32)), Tensor(np.zeros(32, np.float32))).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-6
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-4

    def test_bad_eps_rejected(self):
        with pytest.raises(ValueError, match="eps"):
            T.layer_norm(t([[1.0, 2.0]]), t([1.0, 1.0]), t([0.0, 0.0]), eps=0.0)


class TestPatchEmbed:
    def test_token_count(self):
        img = t(np.zeros((1, 64, 64)))
        w = t(np.zeros((16, 64)))
        b = t(np.zeros(16))
        assert T.patch_embed(img, 8, w, b).shape == (64, 16)

    def test_constant_image_tokens_equal(self):
        img = t(np.full((1, 16, 16), 0.7))
        rng = np.random.default_rng(0)
        w = t(rng.random((8, 16)))
        b = t(np.zeros(8))
        out = T.patch_embed(img, 4, w, b).data
        np.testing.assert_allclose(out - out[0], 0.0, atol=1e-12)

    def test_matches_explicit_patch_loop(self):
        rng = np.random.default_rng(11)
        img = rng.random((1, 16, 16)).astype(np.float32)
        w = rng.random((6, 16)).astype(np.float32)
        b = rng.random(6).astype(np.float32)
        got = T.patch_embed(Tensor(img), 4, Tensor(w), Tensor(b)).data
        idx = 0
        for gi in range(4):
            for gj in range(4):
                patch = img[0, gi * 4 : gi * 4 + 4, gj * 4 : gj * 4 + 4].reshape(-1)
                np.testing.assert_allclose(got[idx], w @ patch + b, atol=1e-6)
                idx += 1

    def test_indivisible_rejected(self):
        with pytest.raises(ShapeError, match="divisible"):
            T.patch_embed(t(np.zeros((1, 10, 10))), 4, t(np.zeros((2, 16))), t(np.zeros(2)))


class TestUpsample2x:
    def test_shape(self):
        out = T.upsample_2x(t(np.zeros((8, 4, 4))), t(np.zeros((8, 4, 2, 2))), t(np.zeros(4)))
        assert out.shape == (4, 8, 8)

    def test_identity_kernel_replicates(self):
        rng = np.random.default_rng(2)
        x = rng.random((3, 5, 5))
        w = np.zeros((3, 3, 2, 2))
        for c in range(3):
            w[c, c] = 1.0
        out = T.upsample_2x(t(x), t(w), t(np.zeros(3))).data
        np.testing.assert_allclose(out, np.repeat(np.repeat(x, 2, axis=1), 2, axis=2), atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        x = t(rng.uniform(-1, 1, (2, 3, 3)))
        w = t(rng.uniform(-1, 1, (2, 2, 2, 2)))
        b = t(rng.uniform(-1, 1, 2))

        def fn(x, w, b):
            out = T.upsample_2x(x, w, b)
            return T.tmean(T.mul(out, out))

        report = grad_check(fn, [x, w, b], h=1e-5, tol=1e-3)
        assert report.passed, report.entries


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = t([1.0, -2.0, 3.0])
        backward(T.tsum(x))
        np.testing.assert_allclose(x.grad, 1.0)

    def test_quadratic_gradient(self):
        x = t([1.0, -2.0, 3.0])
        backward(T.tsum(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_accumulation_across_paths(self):
        x = t([2.0])
        backward(T.tsum(T.add(x, x)))
        np.testing.assert_allclose(x.grad, 2.0)

    def test_composite_graph_finite_differences(self):
        rng = np.random.default_rng(7)
        a = t(rng.uniform(-1, 1, (4, 3)))
        b = t(rng.uniform(-1, 1, (3, 4)))

        def fn(a, b):
            z = T.matmul(a, b)
            z = T.gelu(z)
            z = T.softmax(z, axis=-1)
            return T.tmean(T.mul(z, T.sigmoid(z)))

        report = grad_check(fn, [a, b], h=1e-3, tol=1e-3)
        assert report.passed, report.entries

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            backward(t([1.0, 2.0]))

    def test_leaf_without_path_untouched(self):
        x = t([1.0])
        y = t([2.0])
        backward(T.tsum(x))
        assert y.grad is None


def _op_cases():
    return [
        ("add", lambda a, b: T.tmean(T.add(a, b)), lambda rng: [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (3, 4))]),
        ("add_broadcast", lambda a, b: T.tmean(T.mul(T.add(a, b), T.add(a, b))), lambda rng: [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4,))]),
        ("sub", lambda a, b: T.tmean(T.mul(T.sub(a, b), T.sub(a, b))), lambda rng: [rng.uniform(-1, 1, (5,)), rng.uniform(-1, 1, (5,))]),
        ("mul", lambda a, b: T.tmean(T.mul(a, b)), lambda rng: [rng.uniform(-1, 1, (2, 3)), rng.uniform(-1, 1, (2, 3))]),
        ("div", lambda a, b: T.tmean(T.div(a, b)), lambda rng: [rng.uniform(-1, 1, (6,)), rng.uniform(1.5, 2.5, (6,))]),
        ("scale", lambda a: T.tmean(T.scale(a, -1.7)), lambda rng: [rng.uniform(-1, 1, (7,))]),
        ("neg", lambda a: T.tmean(T.mul(T.neg(a), a)), lambda rng: [rng.uniform(-1, 1, (7,))]),
        ("power", lambda a: T.tmean(T.power(a, 3.0)), lambda rng: [rng.uniform(0.2, 1, (5,))]),
        ("absolute", lambda a: T.tmean(T.absolute(a)), lambda rng: [rng.uniform(0.1, 1, (5,)) * np.sign(rng.uniform(-1, 1, (5,)))]),
        ("exp", lambda a: T.tmean(T.exp(a)), lambda rng: [rng.uniform(-1, 1, (5,))]),
        ("log", lambda a: T.tmean(T.log(a)), lambda rng: [rng.uniform(0.3, 1.3, (5,))]),
        ("sigmoid", lambda a: T.tmean(T.sigmoid(a)), lambda rng: [rng.uniform(-1, 1, (8,))]),
        ("softplus", lambda a: T.tmean(T.softplus(a)), lambda rng: [rng.uniform(-1, 1, (8,))]),
        ("gelu", lambda a: T.tmean(T.gelu(a)), lambda rng: [rng.uniform(-1, 1, (8,))]),
        ("relu", lambda a: T.tmean(T.relu(a)), lambda rng: [rng.uniform(-1, 1, (8,)) + 0.05]),
        ("matmul", lambda a, b: T.tmean(T.matmul(a, b)), lambda rng: [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))]),
        ("matmul3", lambda a, b: T.tmean(T.matmul(a, b)), lambda rng: [rng.uniform(-1, 1, (2, 3, 4)), rng.uniform(-1, 1, (2, 4, 2))]),
        ("softmax", lambda a: T.tmean(T.mul(T.softmax(a, axis=-1), a)), lambda rng: [rng.uniform(-1, 1, (3, 5))]),
        ("layer_norm", lambda x, g, b: T.tmean(T.mul(T.layer_norm(x, g, b), T.layer_norm(x, g, b))), lambda rng: [rng.uniform(-1, 1, (4, 6)), rng.uniform(0.5, 1.5, (6,)), rng.uniform(-0.5, 0.5, (6,))]),
        ("reshape_transpose", lambda a: T.tmean(T.mul(T.transpose(T.reshape(a, (3, 4)), (1, 0)), T.transpose(T.reshape(a, (3, 4)), (1, 0)))), lambda rng: [rng.uniform(-1, 1, (12,))]),
        ("concat", lambda a, b: T.tmean(T.mul(T.concat([a, b], axis=0), T.concat([a, b], axis=0))), lambda rng: [rng.uniform(-1, 1, (2, 3)), rng.uniform(-1, 1, (4, 3))]),
        ("getitem", lambda a: T.tmean(T.mul(a[1:3], a[1:3])), lambda rng: [rng.uniform(-1, 1, (5, 2))]),
        ("tsum", lambda a: T.tmean(T.mul(T.tsum(a, axis=0), T.tsum(a, axis=0))), lambda rng: [rng.uniform(-1, 1, (3, 4))]),
        ("tmean_axis", lambda a: T.tsum(T.mul(T.tmean(a, axis=1), T.tmean(a, axis=1))), lambda rng: [rng.uniform(-1, 1, (3, 4))]),
        (
            "patch_embed",
            lambda i, w, b: T.tmean(T.mul(T.patch_embed(i, 2, w, b), T.patch_embed(i, 2, w, b))),
            lambda rng: [rng.uniform(-1, 1, (1, 4, 4)), rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (3,))],
        ),
        (
            "upsample_2x",
            lambda x, w, b: T.tmean(T.mul(T.upsample_2x(x, w, b), T.upsample_2x(x, w, b))),
            lambda rng: [rng.uniform(-1, 1, (2, 3, 3)), rng.uniform(-1, 1, (2, 2, 2, 2)), rng.uniform(-1, 1, (2,))],
        ),
    ]


@pytest.mark.parametrize("name,fn,make", _op_cases(), ids=[c[0] for c in _op_cases()])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_f32_all_ops(name, fn, make, seed):
    rng = np.random.default_rng(seed)
    inputs = [Tensor(np.asarray(x, dtype=np.float32), requires_grad=True) for x in make(rng)]
    report = grad_check(fn, inputs, h=1e-2, tol=1e-3)
    assert report.passed, (name, seed, [(e.input_index, e.max_rel_err) for e in report.entries])


def test_grad_check_smoke_sigmoid_sum():
    x = t(np.linspace(-1, 1, 9))
    assert grad_check(lambda x: T.tsum(T.sigmoid(x)), [x], h=1e-3, tol=1e-3).passed


def test_grad_check_negative_control():
    # op with a deliberately wrong hand-coded gradient must fail the oracle
    def bad_square(a):
        return T._make(a.data * a.data, (a,), lambda g: (g * 3.0 * a.data,))

    x = t([0.5, -0.7, 0.9])
    report = grad_check(lambda x: T.tsum(bad_square(x)), [x], h=1e-3, tol=1e-3)
    assert not report.passed


def test_no_grad_suppresses_graph():
    x = t([1.0])
    with T.no_grad():
        y = T.mul(x, x)
    assert y.node is None and not y.requires_grad


def test_tensor_invariants():
    x = Tensor(np.zeros((2, 3), dtype=np.float32), requires_grad=True)
    assert x.size == 6 and x.node is None  # leaf
    backward(T.tsum(T.mul(x, x)))
    assert x.grad.shape == x.data.shape
