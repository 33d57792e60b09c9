"""Hot convolution kernels with two interchangeable backends.

The convolutions used on attention maps are the only loops in the package
that are too slow as plain Python. They are implemented twice:

* a numba ``@njit`` version (default when numba imports), and
* a vectorised pure-numpy fallback.

Both accumulate kernel taps in the same (a, b) order, so forward results and
input gradients are bit-identical across backends. Select with the
``REFINER_BACKEND`` environment variable (``auto`` | ``numba`` | ``numpy``)
or :func:`use_backend`. ``benchmarks/bench_kernels.py`` compares the two.

All convolutions are stride-1 cross-correlations with zero padding of width
``k // 2`` (no kernel flip), so the output has the shape of the input and a
delta kernel is an exact identity.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


_VALID = ("auto", "numba", "numpy")


def _resolve(name: str) -> str:
    if name not in _VALID:
        raise ValueError(f"unknown backend {name!r}, expected one of {_VALID}")
    if name == "auto":
        return "numba" if HAVE_NUMBA else "numpy"
    if name == "numba" and not HAVE_NUMBA:
        raise ValueError("numba backend requested but numba is not importable")
    return name


_BACKEND = _resolve(os.environ.get("REFINER_BACKEND", "auto").strip().lower() or "auto")


def use_backend(name: str) -> str:
    """Switch the kernel backend; returns the previously active one."""
    global _BACKEND
    prev = _BACKEND
    _BACKEND = _resolve(name)
    return prev


def current_backend() -> str:
    return _BACKEND


# ---------------------------------------------------------------------------
# numpy fallback: shift-and-add over kernel taps, (a, b) ordered


def _conv2d_np(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    g, n, m = x.shape
    k = w.shape[-1]
    h = k // 2
    xp = np.zeros((g, n + 2 * h, m + 2 * h), dtype=x.dtype)
    xp[:, h : h + n, h : h + m] = x
    out = np.zeros_like(x)
    for a in range(k):
        for b in range(k):
            out += w[:, a, b][:, None, None] * xp[:, a : a + n, b : b + m]
    return out


def _conv2d_dw_np(x: np.ndarray, dy: np.ndarray, k: int) -> np.ndarray:
    g, n, m = x.shape
    h = k // 2
    xp = np.zeros((g, n + 2 * h, m + 2 * h), dtype=x.dtype)
    xp[:, h : h + n, h : h + m] = x
    dw = np.empty((g, k, k), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            dw[:, a, b] = np.sum(dy * xp[:, a : a + n, b : b + m], axis=(1, 2))
    return dw


def _conv1d_rows_np(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    g, n, m = x.shape
    k = w.shape[-1]
    h = k // 2
    xp = np.zeros((g, n, m + 2 * h), dtype=x.dtype)
    xp[:, :, h : h + m] = x
    out = np.zeros_like(x)
    for a in range(k):
        out += w[:, a][:, None, None] * xp[:, :, a : a + m]
    return out


def _conv1d_rows_dw_np(x: np.ndarray, dy: np.ndarray, k: int) -> np.ndarray:
    g, n, m = x.shape
    h = k // 2
    xp = np.zeros((g, n, m + 2 * h), dtype=x.dtype)
    xp[:, :, h : h + m] = x
    dw = np.empty((g, k), dtype=x.dtype)
    for a in range(k):
        dw[:, a] = np.sum(dy * xp[:, :, a : a + m], axis=(1, 2))
    return dw


# ---------------------------------------------------------------------------
# numba versions: explicit loops, same tap order as the numpy path


@njit(cache=True)
def _conv2d_nb(x, w, out):  # pragma: no cover - exercised via wrapper
    g, n, m = x.shape
    k = w.shape[1]
    h = k // 2
    for q in range(g):
        for i in range(n):
            for j in range(m):
                acc = x.dtype.type(0.0)
                for a in range(k):
                    ii = i - h + a
                    if 0 <= ii < n:
                        for b in range(k):
                            jj = j - h + b
                            if 0 <= jj < m:
                                acc += w[q, a, b] * x[q, ii, jj]
                out[q, i, j] = acc


@njit(cache=True)
def _conv2d_dw_nb(x, dy, dw):  # pragma: no cover
    g, n, m = x.shape
    k = dw.shape[1]
    h = k // 2
    for q in range(g):
        for a in range(k):
            for b in range(k):
                acc = x.dtype.type(0.0)
                for i in range(n):
                    ii = i - h + a
                    if 0 <= ii < n:
                        for j in range(m):
                            jj = j - h + b
                            if 0 <= jj < m:
                                acc += dy[q, i, j] * x[q, ii, jj]
                dw[q, a, b] = acc


@njit(cache=True)
def _conv1d_rows_nb(x, w, out):  # pragma: no cover
    g, n, m = x.shape
    k = w.shape[1]
    h = k // 2
    for q in range(g):
        for i in range(n):
            for j in range(m):
                acc = x.dtype.type(0.0)
                for a in range(k):
                    jj = j - h + a
                    if 0 <= jj < m:
                        acc += w[q, a] * x[q, i, jj]
                out[q, i, j] = acc


@njit(cache=True)
def _conv1d_rows_dw_nb(x, dy, dw):  # pragma: no cover
    g, n, m = x.shape
    k = dw.shape[1]
    h = k // 2
    for q in range(g):
        for a in range(k):
            acc = x.dtype.type(0.0)
            for i in range(n):
                for j in range(m):
                    jj = j - h + a
                    if 0 <= jj < m:
                        acc += dy[q, i, j] * x[q, i, jj]
            dw[q, a] = acc


# ---------------------------------------------------------------------------
# public wrappers; inputs are [G, n, m] stacks with one kernel per slice


def _prep(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    return x, w


def conv2d_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Cross-correlate each slice ``x[g]`` with its kernel ``w[g]`` (k odd)."""
    x, w = _prep(x, w)
    if _BACKEND == "numpy":
        return _conv2d_np(x, w)
    out = np.empty_like(x)
    _conv2d_nb(x, w, out)
    return out


def conv2d_grad_input(dy: np.ndarray, w: np.ndarray) -> np.ndarray:
    # d/dx of a padded cross-correlation is a cross-correlation with the
    # point-reflected kernel.
    dy, w = _prep(dy, w)
    return conv2d_forward(dy, np.ascontiguousarray(w[:, ::-1, ::-1]))


def conv2d_grad_kernel(x: np.ndarray, dy: np.ndarray, k: int) -> np.ndarray:
    x = np.ascontiguousarray(x)
    dy = np.ascontiguousarray(dy, dtype=x.dtype)
    if _BACKEND == "numpy":
        return _conv2d_dw_np(x, dy, k)
    dw = np.empty((x.shape[0], k, k), dtype=x.dtype)
    _conv2d_dw_nb(x, dy, dw)
    return dw


def conv1d_rows_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """1D cross-correlation along the last axis, one kernel per slice."""
    x, w = _prep(x, w)
    if _BACKEND == "numpy":
        return _conv1d_rows_np(x, w)
    out = np.empty_like(x)
    _conv1d_rows_nb(x, w, out)
    return out


def conv1d_rows_grad_input(dy: np.ndarray, w: np.ndarray) -> np.ndarray:
    dy, w = _prep(dy, w)
    return conv1d_rows_forward(dy, np.ascontiguousarray(w[:, ::-1]))


def conv1d_rows_grad_kernel(x: np.ndarray, dy: np.ndarray, k: int) -> np.ndarray:
    x = np.ascontiguousarray(x)
    dy = np.ascontiguousarray(dy, dtype=x.dtype)
    if _BACKEND == "numpy":
        return _conv1d_rows_dw_np(x, dy, k)
    dw = np.empty((x.shape[0], k), dtype=x.dtype)
    _conv1d_rows_dw_nb(x, dy, dw)
    return dw


# Column convolutions reuse the row kernels on transposed maps in both
# backends, so cross-backend parity carries over.


def conv1d_cols_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return conv1d_rows_forward(np.swapaxes(x, -1, -2), w).swapaxes(-1, -2)


def conv1d_cols_grad_input(dy: np.ndarray, w: np.ndarray) -> np.ndarray:
    return conv1d_rows_grad_input(np.swapaxes(dy, -1, -2), w).swapaxes(-1, -2)


def conv1d_cols_grad_kernel(x: np.ndarray, dy: np.ndarray, k: int) -> np.ndarray:
    return conv1d_rows_grad_kernel(
        np.swapaxes(x, -1, -2), np.swapaxes(dy, -1, -2), k
    )
