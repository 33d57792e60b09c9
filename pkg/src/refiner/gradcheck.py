"""Central-difference verification of every hand-written backward pass.

``grad_check`` probes an op through a fixed random linear functional of its
output: the analytic gradient comes from replaying the tape, the numeric one
from central differences on the plain forward. The reported figure per input
is ``max |g_a - g_fd| / max(1, |g_fd|)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import GradTape, Tensor


@dataclass
class GradCheckReport:
    op: str
    rel_errors: list[float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.rel_errors) if self.rel_errors else 0.0

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    name: str | None = None,
    probe_seed: int = 71,
) -> GradCheckReport:
    """Compare tape gradients of ``fn(*inputs)`` against central differences."""
    arrays = [np.ascontiguousarray(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with GradTape() as tape:
        out = fn(*tensors)
    probe = np.random.default_rng(probe_seed).standard_normal(out.shape)
    tape.backward(out, seed=probe)

    def scalar(args: Sequence[np.ndarray]) -> float:
        value = fn(*[Tensor(a) for a in args])
        return float((probe * value.data).sum())

    rel_errors: list[float] = []
    for idx, base in enumerate(arrays):
        analytic = tensors[idx].grad
        if analytic is None:
            analytic = np.zeros_like(base)
        numeric = np.zeros_like(base)
        # index element-wise: reshape(-1) would silently copy non-contiguous
        # arrays and the perturbation would never reach the function
        for j in range(base.size):
            pos = np.unravel_index(j, base.shape)
            orig = base[pos]
            base[pos] = orig + h
            up = scalar(arrays)
            base[pos] = orig - h
            down = scalar(arrays)
            base[pos] = orig
            numeric[pos] = (up - down) / (2.0 * h)
        denom = np.maximum(1.0, np.abs(numeric))
        rel_errors.append(float(np.max(np.abs(analytic - numeric) / denom)))
    return GradCheckReport(name or getattr(fn, "__name__", "fn"), rel_errors, tol)


# ---------------------------------------------------------------------------
# registry of primitive ops with representative random shapes


@dataclass
class OpCase:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray]]]
    shapes: int = 5
    tol: float = 1e-4


def _r(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return rng.standard_normal(shape)


def _dims(rng: np.random.Generator, lo: int = 2, hi: int = 5) -> int:
    return int(rng.integers(lo, hi + 1))


def _odd(rng: np.random.Generator) -> int:
    return int(rng.choice([1, 3, 5]))


def _build_cases() -> list[OpCase]:
    cases: list[OpCase] = []

    def case(name: str, tol: float = 1e-4):
        def deco(build):
            cases.append(OpCase(name, build, tol=tol))
            return build

        return deco

    @case("matmul")
    def _(rng):
        m, p, q = _dims(rng), _dims(rng), _dims(rng)
        return T.matmul, [_r(rng, m, p), _r(rng, p, q)]

    @case("matmul_batched")
    def _(rng):
        b, m, p, q = 2, _dims(rng), _dims(rng), _dims(rng)
        return T.matmul, [_r(rng, b, m, p), _r(rng, p, q)]

    @case("add")
    def _(rng):
        m, n = _dims(rng), _dims(rng)
        return T.add, [_r(rng, m, n), _r(rng, m, 1)]

    @case("scale")
    def _(rng):
        return (lambda x: T.scale(x, 0.72)), [_r(rng, _dims(rng), _dims(rng))]

    @case("transpose")
    def _(rng):
        return T.transpose, [_r(rng, _dims(rng), _dims(rng))]

    @case("permute")
    def _(rng):
        return (lambda x: T.permute(x, (1, 2, 0))), [_r(rng, 2, _dims(rng), _dims(rng))]

    @case("reshape")
    def _(rng):
        m, n = _dims(rng), _dims(rng)
        return (lambda x: T.reshape(x, (n * m,))), [_r(rng, m, n)]

    @case("broadcast_to")
    def _(rng):
        n = _dims(rng)
        return (lambda x: T.broadcast_to(x, (3, n, n))), [_r(rng, n, n)]

    @case("concat")
    def _(rng):
        m, n = _dims(rng), _dims(rng)
        return (lambda a, b: T.concat([a, b], axis=1)), [_r(rng, m, n), _r(rng, m, 2)]

    @case("slice_axis")
    def _(rng):
        m, n = _dims(rng, 3, 6), _dims(rng, 3, 6)
        return (lambda x: T.slice_axis(x, 1, 1, n - 1)), [_r(rng, m, n)]

    @case("softmax_rows")
    def _(rng):
        return (lambda x: T.softmax_rows(x, 0.8)), [_r(rng, _dims(rng), 5)]

    @case("layer_norm")
    def _(rng):
        m, d = _dims(rng), _dims(rng, 3, 6)
        return (
            (lambda x, g, b: T.layer_norm(x, g, b, eps=1e-6)),
            [_r(rng, m, d), 1.0 + 0.1 * _r(rng, d), 0.1 * _r(rng, d)],
        )

    @case("gelu", tol=1e-4)
    def _(rng):
        return T.gelu, [_r(rng, _dims(rng), _dims(rng))]

    @case("mean_all")
    def _(rng):
        return T.mean_all, [_r(rng, _dims(rng), _dims(rng))]

    @case("conv2d_single_channel")
    def _(rng):
        n, k = _dims(rng, 4, 7), _odd(rng)
        return T.conv2d_single_channel, [_r(rng, n, n), _r(rng, k, k)]

    @case("conv2d_per_head")
    def _(rng):
        hh, n, k = 2, _dims(rng, 3, 5), _odd(rng)
        return T.conv2d_per_head, [_r(rng, 2, hh, n, n), _r(rng, hh, k, k)]

    @case("conv1d_rows")
    def _(rng):
        hh, n, k = 2, _dims(rng, 3, 5), _odd(rng)
        return T.conv1d_rows, [_r(rng, hh, n, n), _r(rng, hh, k)]

    @case("conv1d_cols")
    def _(rng):
        hh, n, k = 2, _dims(rng, 3, 5), _odd(rng)
        return T.conv1d_cols, [_r(rng, hh, n, n), _r(rng, hh, k)]

    return cases


OP_CASES: list[OpCase] = _build_cases()


def registered_op_names() -> list[str]:
    return [c.name for c in OP_CASES]


def check_registered_ops(
    seed: int = 0, shapes: int = 5, h: float = 1e-5, tol: float = 1e-4
) -> list[GradCheckReport]:
    """Run ``grad_check`` on every registered primitive over random shapes."""
    reports: list[GradCheckReport] = []
    for case_idx, case in enumerate(OP_CASES):
        errs: list[float] = []
        for s in range(shapes):
            rng = np.random.default_rng((seed, case_idx, s))
            fn, inputs = case.build(rng)
            rep = grad_check(fn, inputs, h=h, tol=tol, name=case.name)
            errs.extend(rep.rel_errors)
        reports.append(GradCheckReport(case.name, errs, max(tol, case.tol)))
    return reports
