"""Numba/numpy backend parity for the convolution kernels."""

import numpy as np
import numpy.testing as npt
import pytest

from refiner import kernels


@pytest.fixture
def both_backends():
    """Yield a runner that evaluates a callable under each backend."""
    def run(fn):
        prev = kernels.use_backend("numpy")
        try:
            np_result = fn()
            kernels.use_backend("numba" if kernels.HAVE_NUMBA else "numpy")
            nb_result = fn()
        finally:
            kernels.use_backend(prev)
        return np_result, nb_result

    return run


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_conv2d_forward_bitwise_parity(both_backends, dtype, rng):
    x = rng.standard_normal((6, 9, 9)).astype(dtype)
    w = rng.standard_normal((6, 3, 3)).astype(dtype)
    a, b = both_backends(lambda: kernels.conv2d_forward(x, w))
    npt.assert_array_equal(a, b)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_conv2d_grad_input_bitwise_parity(both_backends, dtype, rng):
    dy = rng.standard_normal((4, 7, 7)).astype(dtype)
    w = rng.standard_normal((4, 5, 5)).astype(dtype)
    a, b = both_backends(lambda: kernels.conv2d_grad_input(dy, w))
    npt.assert_array_equal(a, b)


def test_conv2d_grad_kernel_close_across_backends(both_backends, rng):
    # kernel gradients reduce with different summation orders per backend
    x = rng.standard_normal((3, 8, 8))
    dy = rng.standard_normal((3, 8, 8))
    a, b = both_backends(lambda: kernels.conv2d_grad_kernel(x, dy, 3))
    npt.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_conv1d_parity_and_delta(both_backends, rng):
    x = rng.standard_normal((5, 6, 6))
    w = rng.standard_normal((5, 3))
    a, b = both_backends(lambda: kernels.conv1d_rows_forward(x, w))
    npt.assert_array_equal(a, b)
    a, b = both_backends(lambda: kernels.conv1d_cols_forward(x, w))
    npt.assert_array_equal(a, b)

    delta = np.zeros((5, 3))
    delta[:, 1] = 1.0
    npt.assert_array_equal(kernels.conv1d_rows_forward(x, delta), x)


def test_conv2d_delta_identity_both_backends(both_backends, rng):
    x = rng.standard_normal((2, 5, 5))
    delta = np.zeros((2, 3, 3))
    delta[:, 1, 1] = 1.0
    a, b = both_backends(lambda: kernels.conv2d_forward(x, delta))
    npt.assert_array_equal(a, x)
    npt.assert_array_equal(b, x)


def test_backend_selection():
    prev = kernels.current_backend()
    try:
        assert kernels.use_backend("numpy") == prev
        assert kernels.current_backend() == "numpy"
        with pytest.raises(ValueError):
            kernels.use_backend("cuda")
    finally:
        kernels.use_backend(prev)
