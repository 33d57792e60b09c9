"""Forward-path checks of the tensor ops against brute-force loop oracles."""

import math

import numpy as np
import numpy.testing as npt
import pytest

import refiner.tensor as T
from refiner.errors import ConfigError, NumericError, ShapeMismatchError
from refiner.tensor import GradTape, Tensor


def matmul_oracle(a, b):
    m, p = a.shape
    p2, q = b.shape
    out = np.zeros((m, q))
    for i in range(m):
        for j in range(q):
            for k in range(p):
                out[i, j] += a[i, k] * b[k, j]
    return out


def conv2d_oracle(x, w):
    n, m = x.shape
    k = w.shape[0]
    h = k // 2
    out = np.zeros_like(x)
    for i in range(n):
        for j in range(m):
            for a in range(k):
                for b in range(k):
                    ii, jj = i - h + a, j - h + b
                    if 0 <= ii < n and 0 <= jj < m:
                        out[i, j] += w[a, b] * x[ii, jj]
    return out


def conv1d_rows_oracle(x, w):
    n, m = x.shape
    k = w.shape[0]
    h = k // 2
    out = np.zeros_like(x)
    for i in range(n):
        for j in range(m):
            for a in range(k):
                jj = j - h + a
                if 0 <= jj < m:
                    out[i, j] += w[a] * x[i, jj]
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        out = T.matmul(Tensor(np.eye(2)), a)
        npt.assert_array_equal(out.data, a.data)

    def test_row_selector(self):
        sel = Tensor(np.array([[1.0, 0.0], [0.0, 0.0]]))
        b = Tensor(np.array([[5.0, 6.0], [7.0, 8.0]]))
        npt.assert_array_equal(T.matmul(sel, b).data, [[5.0, 6.0], [0.0, 0.0]])

    def test_against_triple_loop(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        out = T.matmul(Tensor(a), Tensor(b))
        assert np.max(np.abs(out.data - matmul_oracle(a, b))) <= 1e-12

    def test_shape_mismatch_mentions_both_shapes(self):
        with pytest.raises(ShapeMismatchError) as err:
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)

    def test_broadcast_matches_per_slice(self, rng):
        a = rng.standard_normal((5, 3, 4))
        b = rng.standard_normal((4, 2))
        out = T.matmul(Tensor(a), Tensor(b)).data
        for i in range(5):
            npt.assert_array_equal(out[i], np.matmul(a[i], b))


class TestSoftmax:
    def test_symmetric_pair(self):
        out = T.softmax_rows(Tensor(np.array([[0.0, 0.0]])))
        npt.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-15)

    def test_analytic_ln2(self):
        out = T.softmax_rows(Tensor(np.array([math.log(2.0), 0.0])))
        npt.assert_allclose(out.data, [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)

    def test_against_formula_oracle(self, rng):
        x = rng.standard_normal((4, 7))
        out = T.softmax_rows(Tensor(x), 1.3).data
        e = np.exp(1.3 * x)
        assert np.max(np.abs(out - e / e.sum(axis=-1, keepdims=True))) <= 1e-12

    def test_rows_sum_to_one(self, rng):
        x = Tensor(100.0 * rng.standard_normal((6, 9)))
        sums = T.softmax_rows(x).data.sum(axis=-1)
        npt.assert_allclose(sums, 1.0, atol=1e-6)

    def test_non_finite_input_raises(self):
        bad = np.array([[1.0, np.inf]])
        with pytest.raises(NumericError):
            T.softmax_rows(Tensor(bad))

    def test_bad_scale(self):
        with pytest.raises(ConfigError):
            T.softmax_rows(Tensor(np.zeros((1, 2))), 0.0)


class TestConv2d:
    def test_delta_kernel_is_identity(self, rng):
        x = rng.standard_normal((5, 5))
        delta = np.zeros((3, 3))
        delta[1, 1] = 1.0
        out = T.conv2d_single_channel(Tensor(x), Tensor(delta))
        npt.assert_array_equal(out.data, x)

    def test_box_kernel_counts_neighbours(self):
        out = T.conv2d_single_channel(Tensor(np.ones((4, 4))), Tensor(np.ones((3, 3))))
        expected = np.array([
            [4.0, 6.0, 6.0, 4.0],
            [6.0, 9.0, 9.0, 6.0],
            [6.0, 9.0, 9.0, 6.0],
            [4.0, 6.0, 6.0, 4.0],
        ])
        npt.assert_array_equal(out.data, expected)

    def test_against_loop_oracle(self, rng):
        x = rng.standard_normal((5, 5))
        w = rng.standard_normal((3, 3))
        out = T.conv2d_single_channel(Tensor(x), Tensor(w))
        assert np.max(np.abs(out.data - conv2d_oracle(x, w))) <= 1e-12

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            T.conv2d_single_channel(Tensor(np.zeros((4, 4))), Tensor(np.zeros((2, 2))))

    def test_per_head_matches_per_slice(self, rng):
        maps = rng.standard_normal((2, 3, 6, 6))
        kern = rng.standard_normal((3, 3, 3))
        out = T.conv2d_per_head(Tensor(maps), Tensor(kern)).data
        for b in range(2):
            for h in range(3):
                npt.assert_allclose(out[b, h], conv2d_oracle(maps[b, h], kern[h]),
                                    atol=1e-12)


class TestConv1d:
    def test_delta_identity(self, rng):
        x = rng.standard_normal((4, 6))
        out = T.conv1d_rows(Tensor(x), Tensor(np.array([0.0, 1.0, 0.0])))
        npt.assert_array_equal(out.data, x)
        out = T.conv1d_cols(Tensor(x), Tensor(np.array([0.0, 1.0, 0.0])))
        npt.assert_array_equal(out.data, x)

    def test_neighbour_tap_shifts_content(self, rng):
        # kernel [1,0,0] reads the left neighbour: out[:, j] == x[:, j-1]
        x = rng.standard_normal((3, 5))
        out = T.conv1d_rows(Tensor(x), Tensor(np.array([1.0, 0.0, 0.0]))).data
        npt.assert_array_equal(out[:, 0], 0.0)
        npt.assert_array_equal(out[:, 1:], x[:, :-1])

    def test_rows_against_loop_oracle(self, rng):
        x = rng.standard_normal((4, 7))
        w = rng.standard_normal(5)
        out = T.conv1d_rows(Tensor(x), Tensor(w))
        assert np.max(np.abs(out.data - conv1d_rows_oracle(x, w))) <= 1e-12

    def test_cols_is_rows_of_transpose(self, rng):
        x = rng.standard_normal((4, 7))
        w = rng.standard_normal(3)
        out = T.conv1d_cols(Tensor(x), Tensor(w)).data
        npt.assert_array_equal(out, conv1d_rows_oracle(x.T, w).T)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = Tensor(np.full((2, 4), 3.7))
        out = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        npt.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_already_normalised_row(self):
        x = Tensor(np.array([[1.0, -1.0]]))
        out = T.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-6)
        npt.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-3)

    def test_against_formula_oracle(self, rng):
        x = rng.standard_normal((3, 6))
        g = rng.standard_normal(6)
        b = rng.standard_normal(6)
        out = T.layer_norm(Tensor(x), Tensor(g), Tensor(b), eps=1e-6).data
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        ref = (x - mu) / np.sqrt(var + 1e-6) * g + b
        assert np.max(np.abs(out - ref)) <= 1e-10

    def test_dim_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            T.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))

    def test_bad_eps(self):
        with pytest.raises(ConfigError):
            T.layer_norm(Tensor(np.zeros((1, 2))), Tensor(np.ones(2)),
                         Tensor(np.zeros(2)), eps=0.0)


class TestElementwiseAndLayout:
    def test_gelu_zero(self):
        assert T.gelu(Tensor(np.array([0.0]))).data[0] == 0.0

    def test_gelu_against_erf_oracle(self, rng):
        from scipy.special import erf as erf_ref

        x = rng.standard_normal(50)
        out = T.gelu(Tensor(x)).data
        ref = 0.5 * x * (1.0 + erf_ref(x / math.sqrt(2.0)))
        assert np.max(np.abs(out - ref)) <= 1e-7

    def test_reshape_round_trip(self, rng):
        x = rng.standard_normal((3, 4))
        back = T.reshape(T.reshape(Tensor(x), (12,)), (3, 4))
        npt.assert_array_equal(back.data, x)

    def test_transpose_and_permute(self, rng):
        x = rng.standard_normal((2, 3, 4))
        npt.assert_array_equal(T.transpose(Tensor(x)).data, np.swapaxes(x, -1, -2))
        npt.assert_array_equal(T.permute(Tensor(x), (2, 0, 1)).data,
                               np.transpose(x, (2, 0, 1)))

    def test_concat_slice_round_trip(self, rng):
        x = rng.standard_normal((3, 5))
        t = Tensor(x)
        joined = T.concat([T.slice_axis(t, 1, 0, 2), T.slice_axis(t, 1, 2, 5)], axis=1)
        npt.assert_array_equal(joined.data, x)

    def test_add_broadcast_and_scale(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((3, 1))
        npt.assert_array_equal(T.add(Tensor(a), Tensor(b)).data, a + b)
        npt.assert_array_equal(T.scale(Tensor(a), -2.0).data, a * -2.0)

    def test_mean_all(self, rng):
        x = rng.standard_normal((4, 4))
        assert abs(float(T.mean_all(Tensor(x)).data) - x.mean()) <= 1e-15


class TestTapeMechanics:
    def test_gradient_accumulates_for_reused_value(self, rng):
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        with GradTape() as tape:
            y = T.add(x, x)
            s = T.mean_all(y)
        tape.backward(s)
        npt.assert_allclose(x.grad, 2.0 / 4.0 * np.ones((2, 2)), atol=1e-15)

    def test_no_tape_means_no_recording(self, rng):
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        y = T.add(x, x)
        assert y.requires_grad is False

    def test_determinism_same_bits(self, rng):
        x = rng.standard_normal((4, 4))
        w = rng.standard_normal((3, 3))
        a = T.conv2d_single_channel(Tensor(x), Tensor(w)).data
        b = T.conv2d_single_channel(Tensor(x), Tensor(w)).data
        npt.assert_array_equal(a, b)

    def test_debug_check_flags_nan(self):
        with pytest.raises(NumericError):
            T.scale(Tensor(np.array([np.inf])), 0.0)  # inf * 0 -> nan
