"""Dense float tensors with a reverse-mode gradient tape.

Every operation the attention pipeline needs is defined here with an
explicit hand-written backward pass. Ops executed while a :class:`GradTape`
is active append one record to the tape; ``tape.backward(loss)`` replays the
records in exact reverse execution order, accumulating gradients additively
into each participating tensor's ``.grad``.

Conventions:

* tensors are plain values wrapping a contiguous-enough numpy array of
  float32 or float64; identical inputs always give bit-identical outputs;
* leading axes broadcast in ``matmul``/``add`` so a whole batch can run
  through one tape;
* non-finite outputs raise :class:`~refiner.errors.NumericError` when debug
  checks are on (``set_debug_checks`` / ``REFINER_DEBUG_CHECKS=1``); checks
  default off to keep training throughput.
"""

from __future__ import annotations

import math
import os
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import ConfigError, NumericError, ShapeMismatchError

_FLOAT_DTYPES = (np.float32, np.float64)

DEBUG_CHECKS = os.environ.get("REFINER_DEBUG_CHECKS", "0").strip() not in ("", "0", "false")


def set_debug_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf detection after every op; returns the previous state."""
    global DEBUG_CHECKS
    prev = DEBUG_CHECKS
    DEBUG_CHECKS = bool(enabled)
    return prev


class Tensor:
    """A dense N-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"


class GradTape:
    """Ordered record of ops; backward replays it in exact reverse order."""

    def __init__(self):
        self._steps: list[Callable[[], None]] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPES.pop()
        return False

    def __len__(self) -> int:
        return len(self._steps)

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> None:
        """Seed ``output.grad`` (ones by default) and run the reverse pass."""
        if seed is None:
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(seed, dtype=output.data.dtype)
            if seed.shape != output.data.shape:
                raise ShapeMismatchError(
                    f"seed shape {seed.shape} != output shape {output.data.shape}"
                )
        output.grad = seed
        for step in reversed(self._steps):
            step()


_TAPES: list[GradTape] = []


def _check_finite(arr: np.ndarray, op: str) -> None:
    if DEBUG_CHECKS and not np.isfinite(arr).all():
        raise NumericError(f"{op} produced a non-finite value")


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def make_op(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], None],
    name: str = "op",
) -> Tensor:
    """Wrap a forward result and register its backward on the active tape.

    ``backward`` receives the upstream gradient and must accumulate into the
    inputs via :func:`accumulate_grad`. Ops defined outside this module
    (e.g. the cross-entropy loss) use this same hook.
    """
    _check_finite(out_data, name)
    out = Tensor(out_data)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True

        def step():
            g = out.grad
            if g is not None:
                backward(g)

        _TAPES[-1]._steps.append(step)
    return out


accumulate_grad = _accumulate


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul needs ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, _swap(b.data)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(_swap(a.data), g), b.shape))

    return make_op(out, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatchError(f"add cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return make_op(out, (a, b), backward, "add")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = x.data * x.dtype.type(s)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * x.dtype.type(s))

    return make_op(out, (x,), backward, "scale")


# ---------------------------------------------------------------------------
# layout


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeMismatchError(f"transpose needs ndim >= 2, got {x.shape}")
    out = _swap(x.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, _swap(g))

    return make_op(out, (x,), backward, "transpose")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatchError(f"permute axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.transpose(g, inverse))

    return make_op(out, (x,), backward, "permute")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    orig = x.shape

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(orig))

    return make_op(out, (x,), backward, "reshape")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape).copy()

    def backward(g: np.ndarray) -> None:
        _accumulate(x, _unbroadcast(g, x.shape))

    return make_op(out, (x,), backward, "broadcast_to")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeMismatchError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def backward(g: np.ndarray) -> None:
        offset = 0
        for p, s in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + s)
            _accumulate(p, g[tuple(idx)])
            offset += s

    return make_op(out, tuple(parts), backward, "concat")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx]

    def backward(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        full = np.zeros_like(x.data)
        full[idx] = g
        _accumulate(x, full)

    return make_op(out, (x,), backward, "slice_axis")


# ---------------------------------------------------------------------------
# nonlinearities and normalisation


def softmax_rows(x: Tensor, scale_factor: float = 1.0) -> Tensor:
    """Row-softmax over the last axis of ``scale_factor * x``, max-stabilised."""
    if float(scale_factor) <= 0.0:
        raise ConfigError(f"softmax scale must be > 0, got {scale_factor}")
    if x.shape[-1] < 1:
        raise ShapeMismatchError(f"softmax needs a non-empty last axis, got {x.shape}")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_rows received a non-finite input")
    s = x.dtype.type(float(scale_factor))
    z = x.data * s
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        inner = (g * out).sum(axis=-1, keepdims=True)
        _accumulate(x, s * out * (g - inner))

    return make_op(out, (x,), backward, "softmax_rows")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatchError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g: np.ndarray) -> None:
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gy = g * gamma.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (gy - m1 - xhat * m2))

    return make_op(out, (x, gamma, beta), backward, "layer_norm")


_SQRT1_2 = math.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * x.dtype.type(_SQRT1_2)))
    out = x.data * cdf

    def backward(g: np.ndarray) -> None:
        pdf = np.exp(-0.5 * x.data * x.data) * x.dtype.type(_INV_SQRT_2PI)
        _accumulate(x, g * (cdf + x.data * pdf))

    return make_op(out.astype(x.dtype, copy=False), (x,), backward, "gelu")


def mean_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    inv_n = 1.0 / x.size

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.full_like(x.data, g * x.dtype.type(inv_n)))

    return make_op(out, (x,), backward, "mean_all")


# ---------------------------------------------------------------------------
# convolutions on maps (zero padding, stride 1, no kernel flip)


def _require_odd(k: int) -> None:
    if k % 2 != 1 or k < 1:
        raise ConfigError(f"convolution kernel size must be odd and >= 1, got {k}")


def _conv_nd(
    x: Tensor,
    w: Tensor,
    fwd,
    grad_in,
    grad_w,
    kernel_ndim: int,
    name: str,
) -> Tensor:
    """Shared plumbing: flatten leading axes to a [G, n, m] stack, broadcast
    per-head kernels across any batch axes, call the kernel backend."""
    if x.ndim < 2:
        raise ShapeMismatchError(f"{name} needs a 2D map, got {x.shape}")
    n, m = x.shape[-2:]
    lead = x.shape[:-2]
    k = w.shape[-1]
    _require_odd(k)
    if w.ndim == kernel_ndim:
        w_full = np.broadcast_to(w.data, lead + w.shape)
    elif w.ndim == kernel_ndim + 1:
        if not lead or lead[-1] != w.shape[0]:
            raise ShapeMismatchError(
                f"{name}: kernel stack {w.shape} does not match maps {x.shape}"
            )
        w_full = np.broadcast_to(w.data, lead[:-1] + w.shape)
    else:
        raise ShapeMismatchError(f"{name}: kernel must have {kernel_ndim} or "
                                 f"{kernel_ndim + 1} dims, got {w.shape}")
    g_count = int(np.prod(lead)) if lead else 1
    x3 = x.data.reshape((g_count, n, m))
    w3 = w_full.reshape((g_count,) + w.shape[-kernel_ndim:])
    out = fwd(x3, w3).reshape(x.shape)

    def backward(g: np.ndarray) -> None:
        g3 = np.ascontiguousarray(g.reshape((g_count, n, m)))
        if x.requires_grad:
            _accumulate(x, grad_in(g3, w3).reshape(x.shape))
        if w.requires_grad:
            dw = grad_w(x3, g3, k).reshape(w_full.shape)
            _accumulate(w, _unbroadcast(dw, w.shape))

    return make_op(out, (x, w), backward, name)


def conv2d_single_channel(map2d: Tensor, kernel: Tensor) -> Tensor:
    """Same-shape 2D cross-correlation of one map with one odd k x k kernel."""
    if map2d.ndim != 2:
        raise ShapeMismatchError(f"expected a 2D map, got {map2d.shape}")
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeMismatchError(f"expected a square kernel, got {kernel.shape}")
    return _conv_nd(
        map2d, kernel,
        kernels.conv2d_forward, kernels.conv2d_grad_input, kernels.conv2d_grad_kernel,
        2, "conv2d",
    )


def conv2d_per_head(maps: Tensor, kernel_stack: Tensor) -> Tensor:
    """2D conv of ``maps[..., h, :, :]`` with ``kernel_stack[h]``."""
    return _conv_nd(
        maps, kernel_stack,
        kernels.conv2d_forward, kernels.conv2d_grad_input, kernels.conv2d_grad_kernel,
        2, "conv2d_per_head",
    )


def conv1d_rows(maps: Tensor, kernel: Tensor) -> Tensor:
    """1D conv along each row (last axis). Kernel ``[k]`` or per-head ``[H, k]``."""
    return _conv_nd(
        maps, kernel,
        kernels.conv1d_rows_forward, kernels.conv1d_rows_grad_input,
        kernels.conv1d_rows_grad_kernel, 1, "conv1d_rows",
    )


def conv1d_cols(maps: Tensor, kernel: Tensor) -> Tensor:
    """1D conv along each column (second-to-last axis)."""
    return _conv_nd(
        maps, kernel,
        kernels.conv1d_cols_forward, kernels.conv1d_cols_grad_input,
        kernels.conv1d_cols_grad_kernel, 1, "conv1d_cols",
    )
