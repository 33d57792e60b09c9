"""Refined multi-head self-attention.

The layer runs a five-stage pipeline on each input:

1. ``compute_attention_maps`` -- per-head softmax maps plus the value matrix;
2. ``expand_maps``            -- linear mixing of the H maps into H' = r * H;
3. ``dla_apply``              -- a learnable convolution over each map, which
   makes the aggregation act like kernel-weighted local feature pooling
   followed by the usual global sum;
4. ``reduce_maps``            -- linear mixing back down to H maps;
5. ``aggregate``              -- per-head value aggregation and output
   projection.

Stages 2-4 deliberately do not renormalise: mixed or convolved maps may
contain negative entries and flow through as-is. Two standalone checkers
(:func:`check_expansion_equivalence`, :func:`check_dla_1d_equivalence`)
verify the algebraic identities the design rests on, each with its own
independent computation path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeMismatchError
from .tensor import Tensor

CONV_MODES = ("direct", "spatial", "rowcol")

STAGES = ("raw", "expanded", "convolved", "reduced")


@dataclass
class RefinerConfig:
    """Hyperparameters of one refined attention layer.

    ``d`` defaults to ``d_in``. ``r`` is the map expansion ratio (H' = r*H),
    ``k`` the odd convolution kernel size, and ``share_next`` the number of
    following blocks that reuse this layer's refined maps.
    """

    d_in: int
    heads: int
    d: int = 0
    r: int = 1
    k: int = 3
    conv_mode: str = "direct"
    use_reduction: bool = True
    share_next: int = 1
    qkv_bias: bool = True
    out_bias: bool = True

    def __post_init__(self):
        if self.d == 0:
            self.d = self.d_in
        self.validate()

    def validate(self) -> None:
        if self.heads < 1:
            raise ConfigError(f"heads must be >= 1, got {self.heads}")
        if self.d % self.heads != 0:
            raise ConfigError(f"projection dim {self.d} not divisible by {self.heads} heads")
        if self.r < 1 or int(self.r) != self.r:
            raise ConfigError(f"expansion ratio must be a positive integer, got {self.r}")
        if self.k < 1 or self.k % 2 == 0:
            raise ConfigError(f"kernel size must be odd and >= 1, got {self.k}")
        if self.conv_mode not in CONV_MODES:
            raise ConfigError(f"conv_mode must be one of {CONV_MODES}, got {self.conv_mode!r}")
        if self.share_next < 0:
            raise ConfigError(f"share_next must be >= 0, got {self.share_next}")

    @property
    def heads_expanded(self) -> int:
        return self.r * self.heads

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def aggregate_heads(self) -> int:
        """Head count at the aggregation stage (H after reduction, else H')."""
        return self.heads if self.use_reduction else self.heads_expanded

    @property
    def d_out_in(self) -> int:
        """Input width of the output projection."""
        return self.aggregate_heads * self.head_dim


@dataclass
class RefinerWeights:
    """All learnable tensors of one layer; shapes follow the config."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_expand: Tensor
    kernels: Tensor
    w_out: Tensor
    w_reduce: Optional[Tensor] = None
    b_q: Optional[Tensor] = None
    b_k: Optional[Tensor] = None
    b_v: Optional[Tensor] = None
    b_out: Optional[Tensor] = None


@dataclass
class AttentionBundle:
    """A stack of attention matrices captured at one pipeline stage."""

    stage: str
    maps: Tensor

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown bundle stage {self.stage!r}")

    @property
    def heads(self) -> int:
        return self.maps.shape[-3]

    @property
    def tokens(self) -> int:
        return self.maps.shape[-1]


def _kernel_shape(cfg: RefinerConfig) -> tuple[int, ...]:
    if cfg.conv_mode == "rowcol":
        return (cfg.heads_expanded, 2, cfg.k)
    return (cfg.heads_expanded, cfg.k, cfg.k)


def cycled_identity(rows: int, cols: int, dtype=np.float64) -> np.ndarray:
    """Row h of the result is the identity row ``h % cols``."""
    out = np.zeros((rows, cols), dtype=dtype)
    out[np.arange(rows), np.arange(rows) % cols] = 1.0
    return out


def delta_kernels(cfg: RefinerConfig, dtype=np.float64) -> np.ndarray:
    """Kernels that make every convolution an exact identity."""
    shape = _kernel_shape(cfg)
    out = np.zeros(shape, dtype=dtype)
    if cfg.conv_mode == "rowcol":
        out[:, :, cfg.k // 2] = 1.0
    else:
        out[:, cfg.k // 2, cfg.k // 2] = 1.0
    return out


def init_refiner_weights(
    cfg: RefinerConfig,
    rng: np.random.Generator,
    dtype=np.float32,
    degenerate: bool = False,
    kernel_noise: float = 0.02,
) -> RefinerWeights:
    """Initialise a layer so it starts out behaving like plain attention.

    The expansion matrix cycles identity rows, the reduction averages the
    ``r`` copies back, and the kernels are deltas plus (unless
    ``degenerate``) small Gaussian noise.
    """

    def dense(*shape: int) -> Tensor:
        return Tensor(rng.normal(0.0, 0.02, shape).astype(dtype), requires_grad=True)

    def bias(n: int, on: bool) -> Optional[Tensor]:
        return Tensor(np.zeros(n, dtype=dtype), requires_grad=True) if on else None

    hp, h = cfg.heads_expanded, cfg.heads
    w_expand = Tensor(cycled_identity(hp, h, dtype), requires_grad=True)
    kern = delta_kernels(cfg, dtype)
    if not degenerate and kernel_noise > 0:
        kern = kern + rng.normal(0.0, kernel_noise, kern.shape).astype(dtype)
    w_reduce = None
    if cfg.use_reduction:
        averaging = np.ascontiguousarray(cycled_identity(hp, h, dtype).T) / cfg.r
        w_reduce = Tensor(averaging.astype(dtype), requires_grad=True)
    return RefinerWeights(
        w_q=dense(cfg.d, cfg.d_in),
        w_k=dense(cfg.d, cfg.d_in),
        w_v=dense(cfg.d, cfg.d_in),
        w_expand=w_expand,
        kernels=Tensor(kern.astype(dtype), requires_grad=True),
        w_reduce=w_reduce,
        w_out=dense(cfg.d_in, cfg.d_out_in),
        b_q=bias(cfg.d, cfg.qkv_bias),
        b_k=bias(cfg.d, cfg.qkv_bias),
        b_v=bias(cfg.d, cfg.qkv_bias),
        b_out=bias(cfg.d_in, cfg.out_bias),
    )


def _project(x: Tensor, w: Tensor, b: Optional[Tensor]) -> Tensor:
    out = T.matmul(w, x)
    if b is not None:
        out = T.add(out, T.reshape(b, (b.shape[0], 1)))
    return out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., d, n] -> [..., H, d/H, n] (contiguous row segments per head)."""
    lead = x.shape[:-2]
    d, n = x.shape[-2:]
    return T.reshape(x, lead + (heads, d // heads, n))


def compute_attention_maps(
    x: Tensor, weights: RefinerWeights, cfg: RefinerConfig
) -> tuple[AttentionBundle, Tensor]:
    """Per-head softmax attention maps plus the value projection.

    ``x`` is ``[d_in, n]`` (features x tokens) or batched ``[..., d_in, n]``.
    Returns a raw-stage bundle of ``[..., H, n, n]`` maps and ``V`` of shape
    ``[..., d, n]`` for later aggregation.
    """
    if x.shape[-2] != cfg.d_in:
        raise ShapeMismatchError(f"input rows {x.shape} do not match d_in={cfg.d_in}")
    q = _split_heads(_project(x, weights.w_q, weights.b_q), cfg.heads)
    k = _split_heads(_project(x, weights.w_k, weights.b_k), cfg.heads)
    v = _project(x, weights.w_v, weights.b_v)
    logits = T.matmul(T.transpose(q), k)
    maps = T.softmax_rows(logits, 1.0 / math.sqrt(cfg.head_dim))
    return AttentionBundle("raw", maps), v


def _mix_heads(bundle: AttentionBundle, w: Tensor, out_stage: str) -> AttentionBundle:
    heads_in = bundle.heads
    if w.ndim != 2 or w.shape[1] != heads_in:
        raise ShapeMismatchError(
            f"head mixing weights {w.shape} do not match {heads_in} input maps"
        )
    n = bundle.tokens
    lead = bundle.maps.shape[:-3]
    flat = T.reshape(bundle.maps, lead + (heads_in, n * n))
    mixed = T.matmul(w, flat)
    return AttentionBundle(out_stage, T.reshape(mixed, lead + (w.shape[0], n, n)))


def expand_maps(bundle: AttentionBundle, w_expand: Tensor) -> AttentionBundle:
    """Mix H raw maps into H' expanded ones: map h' = sum_i W[h', i] * map_i."""
    if bundle.stage != "raw":
        raise ConfigError(f"expansion expects raw maps, got stage {bundle.stage!r}")
    return _mix_heads(bundle, w_expand, "expanded")


def reduce_maps(bundle: AttentionBundle, w_reduce: Tensor) -> AttentionBundle:
    """Mix H' convolved maps back down to H before aggregation."""
    if bundle.stage != "convolved":
        raise ConfigError(f"reduction expects convolved maps, got stage {bundle.stage!r}")
    return _mix_heads(bundle, w_reduce, "reduced")


def dla_apply(
    bundle: AttentionBundle,
    kernels: Tensor,
    conv_mode: str,
    class_token: bool = False,
) -> AttentionBundle:
    """Convolve each expanded map with its head's learnable kernel.

    ``direct`` convolves the token-by-token matrix itself; ``spatial``
    reshapes each row onto the patch grid first (requires a square token
    count) and copies any class-token column through unchanged; ``rowcol``
    applies a row 1D kernel followed by a column 1D kernel.
    """
    if bundle.stage != "expanded":
        raise ConfigError(f"convolution expects expanded maps, got stage {bundle.stage!r}")
    maps = bundle.maps
    if conv_mode == "direct":
        out = T.conv2d_per_head(maps, kernels)
    elif conv_mode == "rowcol":
        row_k = T.slice_axis(kernels, 1, 0, 1)
        col_k = T.slice_axis(kernels, 1, 1, 2)
        hp, k = kernels.shape[0], kernels.shape[-1]
        out = T.conv1d_rows(maps, T.reshape(row_k, (hp, k)))
        out = T.conv1d_cols(out, T.reshape(col_k, (hp, k)))
    elif conv_mode == "spatial":
        n_total = maps.shape[-1]
        n_patches = n_total - 1 if class_token else n_total
        side = math.isqrt(n_patches)
        if side * side != n_patches:
            raise ConfigError(
                f"spatial convolution needs a square patch count, got {n_patches}"
            )
        lead = maps.shape[:-3]
        hp = maps.shape[-3]
        if class_token:
            cls_col = T.slice_axis(maps, -1, 0, 1)
            grid_part = T.slice_axis(maps, -1, 1, n_total)
        else:
            cls_col = None
            grid_part = maps
        rows = T.reshape(grid_part, lead + (hp, n_total, side, side))
        # Each row of each map becomes one small image; the per-head kernel
        # must broadcast over the row axis, so move rows ahead of heads.
        folded = T.permute(rows, _axes_rows_first(rows.ndim))
        conv = T.conv2d_per_head(folded, kernels)
        back = T.permute(conv, _axes_rows_back(conv.ndim))
        flat = T.reshape(back, lead + (hp, n_total, n_patches))
        out = flat if cls_col is None else T.concat([cls_col, flat], axis=-1)
    else:
        raise ConfigError(f"unknown conv_mode {conv_mode!r}")
    return AttentionBundle("convolved", out)


def _axes_rows_first(ndim: int) -> tuple[int, ...]:
    # [..., H, n, s, s] -> [..., n, H, s, s]
    axes = list(range(ndim))
    axes[-4], axes[-3] = axes[-3], axes[-4]
    return tuple(axes)


_axes_rows_back = _axes_rows_first  # the swap is its own inverse


def tile_value_heads(v_heads: Tensor, repeats: int) -> Tensor:
    """Repeat the H value segments cyclically to cover H' = r*H maps."""
    if repeats == 1:
        return v_heads
    return T.concat([v_heads] * repeats, axis=-3)


def aggregate(
    bundle: AttentionBundle,
    v: Tensor,
    w_out: Tensor,
    b_out: Optional[Tensor],
    cfg: RefinerConfig,
) -> Tensor:
    """Per-head feature aggregation, head concatenation, output projection."""
    if bundle.heads != cfg.aggregate_heads:
        raise ShapeMismatchError(
            f"bundle has {bundle.heads} maps but aggregation expects {cfg.aggregate_heads}"
        )
    v_heads = _split_heads(v, cfg.heads)
    if bundle.heads != cfg.heads:
        v_heads = tile_value_heads(v_heads, cfg.r)
    per_head = T.matmul(bundle.maps, T.transpose(v_heads))  # [..., Hh, n, dh]
    axes = list(range(per_head.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    tokens_first = T.permute(per_head, axes)  # [..., n, Hh, dh]
    lead = tokens_first.shape[:-2]
    merged = T.reshape(tokens_first, lead + (cfg.d_out_in,))
    result = T.matmul(w_out, T.transpose(merged))
    if b_out is not None:
        result = T.add(result, T.reshape(b_out, (b_out.shape[0], 1)))
    return result


def refiner_forward(
    x: Tensor,
    weights: RefinerWeights,
    cfg: RefinerConfig,
    reuse: Optional[AttentionBundle] = None,
    class_token: bool = False,
) -> tuple[Tensor, AttentionBundle]:
    """Full pipeline; returns the output and the bundle later blocks may reuse.

    With ``reuse`` the map computation (Q/K, expansion, convolution,
    reduction) is skipped entirely: the layer contributes only its own value
    projection and output projection.
    """
    if reuse is not None:
        if reuse.tokens != x.shape[-1]:
            raise ShapeMismatchError(
                f"reused bundle covers {reuse.tokens} tokens, input has {x.shape[-1]}"
            )
        if reuse.heads != cfg.aggregate_heads:
            raise ShapeMismatchError(
                f"reused bundle has {reuse.heads} maps, layer aggregates "
                f"{cfg.aggregate_heads}"
            )
        v = _project(x, weights.w_v, weights.b_v)
        return aggregate(reuse, v, weights.w_out, weights.b_out, cfg), reuse

    raw, v = compute_attention_maps(x, weights, cfg)
    expanded = expand_maps(raw, weights.w_expand)
    convolved = dla_apply(expanded, weights.kernels, cfg.conv_mode, class_token)
    if cfg.use_reduction:
        final = reduce_maps(convolved, weights.w_reduce)
    else:
        final = convolved
    return aggregate(final, v, weights.w_out, weights.b_out, cfg), final


# ---------------------------------------------------------------------------
# algebraic equivalence checkers (independent numpy paths, no tape)


def check_expansion_equivalence(
    x: np.ndarray,
    w_q: np.ndarray,
    w_k: np.ndarray,
    expand_row: np.ndarray,
    heads: int,
) -> float:
    """Max abs difference between the two readings of one expanded map.

    Pre-softmax, a mixed map ``sum_i w_i Q_i^T K_i`` equals the single product
    of the scalar-reweighed full Q against the full K. The left side loops
    over heads; the right side stacks the reweighed segments and multiplies
    once. Returns the largest elementwise discrepancy.
    """
    q = w_q @ x
    k = w_k @ x
    d = q.shape[0]
    dh = d // heads
    n = x.shape[1]
    lhs = np.zeros((n, n), dtype=x.dtype)
    for i in range(heads):
        qi = q[i * dh : (i + 1) * dh]
        ki = k[i * dh : (i + 1) * dh]
        lhs += expand_row[i] * (qi.T @ ki)
    q_reweighed = np.concatenate(
        [expand_row[i] * q[i * dh : (i + 1) * dh] for i in range(heads)], axis=0
    )
    rhs = q_reweighed.T @ k
    return float(np.max(np.abs(lhs - rhs)))


def check_dla_1d_equivalence(
    a_row: np.ndarray, kernel: np.ndarray, v: np.ndarray
) -> float:
    """Max abs difference between convolve-then-aggregate and its local form.

    Side one convolves the attention row first and aggregates value vectors
    globally; side two aggregates locally shifted value vectors weighted by
    the untouched attention row. Out-of-range indices contribute zero on both
    sides. Both sides are computed with independent explicit loops.
    """
    n = a_row.shape[0]
    d = v.shape[0]
    k = kernel.shape[0]
    h = k // 2

    lhs = np.zeros(d, dtype=v.dtype)
    for j in range(n):
        conv_aj = 0.0
        for a in range(k):
            jj = j - h + a
            if 0 <= jj < n:
                conv_aj += kernel[a] * a_row[jj]
        lhs += conv_aj * v[:, j]

    rhs = np.zeros(d, dtype=v.dtype)
    for j in range(n):
        for a in range(k):
            jj = j + h - a
            if 0 <= jj < n:
                rhs += a_row[j] * kernel[a] * v[:, jj]

    return float(np.max(np.abs(lhs - rhs)))


# ---------------------------------------------------------------------------
# descriptive statistics used by the analysis tooling


def head_diversity(bundle: AttentionBundle) -> dict:
    """Mean pairwise cosine similarity across heads and mean row entropy.

    Entropy is computed on rows renormalised to a distribution after
    clamping negative entries to zero; rows whose clamped mass underflows
    are skipped and counted.
    """
    maps = np.asarray(bundle.maps.data, dtype=np.float64)
    maps = maps.reshape((-1,) + maps.shape[-3:]) if maps.ndim > 3 else maps[None]
    cosines: list[float] = []
    entropies: list[float] = []
    skipped = 0
    for batch in maps:
        hh = batch.shape[0]
        flat = batch.reshape(hh, -1)
        norms = np.linalg.norm(flat, axis=1)
        for i in range(hh):
            for j in range(i + 1, hh):
                denom = norms[i] * norms[j]
                cosines.append(float(flat[i] @ flat[j] / denom) if denom > 0 else 0.0)
        clamped = np.clip(batch, 0.0, None)
        sums = clamped.sum(axis=-1)
        ok = sums > 1e-12
        skipped += int((~ok).sum())
        if ok.any():
            p = clamped[ok] / sums[ok][:, None]
            with np.errstate(divide="ignore", invalid="ignore"):
                plogp = np.where(p > 0, p * np.log(p), 0.0)
            entropies.extend((-plogp.sum(axis=-1)).tolist())
    return {
        "mean_cosine": float(np.mean(cosines)) if cosines else 1.0,
        "mean_entropy": float(np.mean(entropies)) if entropies else 0.0,
        "skipped_rows": skipped,
    }
