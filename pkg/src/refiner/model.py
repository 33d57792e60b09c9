"""Vision transformer assembly around the refined attention layer.

Covers patch embedding, pre-norm transformer blocks, the classifier head,
named presets with exact parameter / MAC counters, positional-embedding
interpolation for resolution changes, and directory checkpoints (one RVT1
file per tensor plus ``manifest.json`` / ``config.json``).

Token layout throughout is features x tokens (``[..., dim, N]``); leading
axes are treated as batch.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import attention as attn
from . import rvt
from . import tensor as T
from .attention import AttentionBundle, RefinerConfig, RefinerWeights
from .errors import ConfigError, ShapeMismatchError
from .tensor import Tensor


@dataclass
class ModelConfig:
    img_size: int
    patch_size: int
    num_classes: int
    depth: int
    dim: int
    heads: int
    refiner: RefinerConfig
    mlp_ratio: int = 4
    use_class_token: bool = True
    mlp_bias: bool = True
    patch_bias: bool = True
    head_bias: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.img_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.img_size} not divisible by patch size {self.patch_size}"
            )
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.refiner.d_in != self.dim or self.refiner.heads != self.heads:
            raise ConfigError("refiner config does not match model dim/heads")

    @property
    def grid(self) -> int:
        return self.img_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_tokens(self) -> int:
        return self.num_patches + (1 if self.use_class_token else 0)

    @property
    def mlp_hidden(self) -> int:
        return self.mlp_ratio * self.dim


def make_config(
    depth: int,
    dim: int,
    heads: int,
    img_size: int = 224,
    patch_size: int = 16,
    num_classes: int = 1000,
    mlp_ratio: int = 4,
    r: int = 1,
    k: int = 3,
    conv_mode: str = "direct",
    use_reduction: bool = True,
    share_next: int = 1,
    qkv_bias: bool = True,
    out_bias: bool = True,
    mlp_bias: bool = True,
    use_class_token: bool = True,
) -> ModelConfig:
    refiner = RefinerConfig(
        d_in=dim, heads=heads, r=r, k=k, conv_mode=conv_mode,
        use_reduction=use_reduction, share_next=share_next,
        qkv_bias=qkv_bias, out_bias=out_bias,
    )
    return ModelConfig(
        img_size=img_size, patch_size=patch_size, num_classes=num_classes,
        depth=depth, dim=dim, heads=heads, refiner=refiner, mlp_ratio=mlp_ratio,
        use_class_token=use_class_token, mlp_bias=mlp_bias,
    )


# Named architectures. Depth/width/heads follow the published table; MLP
# ratio is 3 for the deep-narrow variants and 4 for Base (the only choices
# that land on the published parameter totals), block linears carry no bias
# for the same reason, and S uses the larger map-expansion ratio its cost
# figure implies.
_PRESET_TABLE = {
    "Base": dict(depth=12, dim=768, heads=12, mlp_ratio=4, r=3),
    "S": dict(depth=16, dim=384, heads=12, mlp_ratio=3, r=6),
    "M": dict(depth=32, dim=420, heads=12, mlp_ratio=3, r=3),
    "L": dict(depth=32, dim=512, heads=16, mlp_ratio=3, r=3),
}

PRESET_NAMES = tuple(_PRESET_TABLE)


def preset(name: str, num_classes: int = 1000) -> ModelConfig:
    if name not in _PRESET_TABLE:
        raise ConfigError(f"unknown preset {name!r}, expected one of {PRESET_NAMES}")
    row = _PRESET_TABLE[name]
    return make_config(
        depth=row["depth"], dim=row["dim"], heads=row["heads"],
        mlp_ratio=row["mlp_ratio"], r=row["r"], k=3,
        num_classes=num_classes,
        qkv_bias=False, out_bias=False, mlp_bias=False,
    )


# ---------------------------------------------------------------------------
# weights


def init_weights(
    cfg: ModelConfig,
    rng: np.random.Generator,
    dtype=np.float32,
    degenerate_refiner: bool = False,
) -> dict[str, Tensor]:
    """Freshly initialised weight set, keyed by hierarchical names.

    Names ending in ``.bias`` / ``.gamma`` / ``.beta`` plus ``cls_token`` and
    ``pos_embed`` form the no-weight-decay set used by the optimizer.
    """
    weights: dict[str, Tensor] = {}

    def dense(name: str, *shape: int) -> None:
        weights[name] = Tensor(rng.normal(0.0, 0.02, shape).astype(dtype), requires_grad=True)

    def zeros(name: str, *shape: int) -> None:
        weights[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(name: str, *shape: int) -> None:
        weights[name] = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    dense("patch.w", cfg.dim, 3 * cfg.patch_size**2)
    if cfg.patch_bias:
        zeros("patch.bias", cfg.dim)
    if cfg.use_class_token:
        dense("cls_token", cfg.dim, 1)
    dense("pos_embed", cfg.dim, cfg.num_tokens)
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        ones(p + "ln1.gamma", cfg.dim)
        zeros(p + "ln1.beta", cfg.dim)
        layer = attn.init_refiner_weights(
            cfg.refiner, rng, dtype=dtype, degenerate=degenerate_refiner
        )
        weights[p + "attn.q.w"] = layer.w_q
        weights[p + "attn.k.w"] = layer.w_k
        weights[p + "attn.v.w"] = layer.w_v
        if layer.b_q is not None:
            weights[p + "attn.q.bias"] = layer.b_q
            weights[p + "attn.k.bias"] = layer.b_k
            weights[p + "attn.v.bias"] = layer.b_v
        weights[p + "attn.expand.w"] = layer.w_expand
        weights[p + "attn.conv.w"] = layer.kernels
        if layer.w_reduce is not None:
            weights[p + "attn.reduce.w"] = layer.w_reduce
        weights[p + "attn.out.w"] = layer.w_out
        if layer.b_out is not None:
            weights[p + "attn.out.bias"] = layer.b_out
        ones(p + "ln2.gamma", cfg.dim)
        zeros(p + "ln2.beta", cfg.dim)
        dense(p + "mlp.fc1.w", cfg.dim, cfg.mlp_hidden)
        if cfg.mlp_bias:
            zeros(p + "mlp.fc1.bias", cfg.mlp_hidden)
        dense(p + "mlp.fc2.w", cfg.mlp_hidden, cfg.dim)
        if cfg.mlp_bias:
            zeros(p + "mlp.fc2.bias", cfg.dim)
    ones("norm.gamma", cfg.dim)
    zeros("norm.beta", cfg.dim)
    dense("head.w", cfg.num_classes, cfg.dim)
    if cfg.head_bias:
        zeros("head.bias", cfg.num_classes)
    return weights


def block_refiner_weights(weights: dict[str, Tensor], i: int) -> RefinerWeights:
    p = f"blocks.{i}.attn."
    return RefinerWeights(
        w_q=weights[p + "q.w"], w_k=weights[p + "k.w"], w_v=weights[p + "v.w"],
        b_q=weights.get(p + "q.bias"), b_k=weights.get(p + "k.bias"),
        b_v=weights.get(p + "v.bias"),
        w_expand=weights[p + "expand.w"], kernels=weights[p + "conv.w"],
        w_reduce=weights.get(p + "reduce.w"),
        w_out=weights[p + "out.w"], b_out=weights.get(p + "out.bias"),
    )


def no_decay_names(weights: dict[str, Tensor]) -> set[str]:
    """Parameters excluded from weight decay: biases, norms, embeddings."""
    out = set()
    for name in weights:
        if name in ("cls_token", "pos_embed"):
            out.add(name)
        elif name.endswith((".bias", ".gamma", ".beta")):
            out.add(name)
    return out


# ---------------------------------------------------------------------------
# forward passes


def patch_embed(images: Tensor, weights: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Non-overlapping patch flatten + projection + class token + positions.

    ``images`` is ``[3, S, S]`` or batched ``[..., 3, S, S]``; the result is
    ``[..., dim, N]``.
    """
    s = cfg.img_size
    if images.shape[-3:] != (3, s, s):
        raise ShapeMismatchError(
            f"expected image shape (3, {s}, {s}), got {images.shape[-3:]}"
        )
    p = cfg.patch_size
    g = cfg.grid
    lead = images.shape[:-3]
    nl = len(lead)
    x = T.reshape(images, lead + (3, g, p, g, p))
    x = T.permute(x, tuple(range(nl)) + (nl + 1, nl + 3, nl, nl + 2, nl + 4))
    x = T.reshape(x, lead + (g * g, 3 * p * p))
    tokens = T.matmul(weights["patch.w"], T.transpose(x))
    if cfg.patch_bias:
        b = weights["patch.bias"]
        tokens = T.add(tokens, T.reshape(b, (cfg.dim, 1)))
    if cfg.use_class_token:
        cls = T.broadcast_to(weights["cls_token"], lead + (cfg.dim, 1))
        tokens = T.concat([cls, tokens], axis=-1)
    return T.add(tokens, weights["pos_embed"])


def _ln_tokens(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    # normalise each token's feature vector; features live on axis -2
    return T.transpose(T.layer_norm(T.transpose(x), gamma, beta))


def block_forward(
    x: Tensor,
    weights: dict[str, Tensor],
    i: int,
    cfg: ModelConfig,
    reuse: Optional[AttentionBundle] = None,
) -> tuple[Tensor, AttentionBundle]:
    """Pre-norm residual block: attention sublayer then MLP sublayer."""
    p = f"blocks.{i}."
    attn_in = _ln_tokens(x, weights[p + "ln1.gamma"], weights[p + "ln1.beta"])
    y, bundle = attn.refiner_forward(
        attn_in, block_refiner_weights(weights, i), cfg.refiner,
        reuse=reuse, class_token=cfg.use_class_token,
    )
    x1 = T.add(x, y)
    t = T.layer_norm(T.transpose(x1), weights[p + "ln2.gamma"], weights[p + "ln2.beta"])
    h = T.matmul(t, weights[p + "mlp.fc1.w"])
    if cfg.mlp_bias:
        h = T.add(h, weights[p + "mlp.fc1.bias"])
    h = T.gelu(h)
    h = T.matmul(h, weights[p + "mlp.fc2.w"])
    if cfg.mlp_bias:
        h = T.add(h, weights[p + "mlp.fc2.bias"])
    return T.add(x1, T.transpose(h)), bundle


def share_schedule(cfg: ModelConfig) -> list[int]:
    """For each block, -1 if it computes its own maps, else the source block.

    Blocks are grouped bottom-up into runs of ``1 + share_next``; the first
    block of each run computes, the rest reuse. A share span longer than the
    remaining depth is clamped (with a warning).
    """
    m = cfg.refiner.share_next
    if m >= cfg.depth:
        warnings.warn(
            f"share_next={m} clamped to {cfg.depth - 1} for depth {cfg.depth}",
            stacklevel=2,
        )
        m = cfg.depth - 1
    out = []
    for i in range(cfg.depth):
        out.append(-1 if i % (m + 1) == 0 else i - i % (m + 1))
    return out


@dataclass
class ForwardResult:
    logits: Optional[Tensor]
    tokens_in: Optional[np.ndarray] = None
    block_outputs: Optional[list[np.ndarray]] = None
    bundles: Optional[dict[tuple[int, str], np.ndarray]] = None


def forward(
    images: Tensor | np.ndarray,
    weights: dict[str, Tensor],
    cfg: ModelConfig,
    capture_features: bool = False,
    capture_attention: bool = False,
) -> ForwardResult:
    """Run the whole model; optionally capture token features and maps."""
    if not isinstance(images, Tensor):
        images = Tensor(images)
    x = patch_embed(images, weights, cfg)
    result = ForwardResult(logits=None)
    if capture_features:
        result.tokens_in = x.data.copy()
        result.block_outputs = []
    if capture_attention:
        result.bundles = {}
    schedule = share_schedule(cfg)
    cache: dict[int, AttentionBundle] = {}
    for i in range(cfg.depth):
        reuse = cache.get(schedule[i]) if schedule[i] >= 0 else None
        if capture_attention and reuse is None:
            x, bundle = _block_forward_captured(x, weights, i, cfg, result.bundles)
        else:
            x, bundle = block_forward(x, weights, i, cfg, reuse=reuse)
        cache[i] = bundle
        if capture_features:
            result.block_outputs.append(x.data.copy())
    x = _ln_tokens(x, weights["norm.gamma"], weights["norm.beta"])
    if cfg.use_class_token:
        pooled = T.slice_axis(x, -1, 0, 1)  # [..., dim, 1]
    else:
        n = cfg.num_tokens
        mean_w = Tensor(np.full((n, 1), 1.0 / n, dtype=x.dtype))
        pooled = T.matmul(x, mean_w)
    logits = T.matmul(weights["head.w"], pooled)
    if cfg.head_bias:
        logits = T.add(logits, T.reshape(weights["head.bias"], (cfg.num_classes, 1)))
    lead = logits.shape[:-2]
    result.logits = T.reshape(logits, lead + (cfg.num_classes,))
    return result


def _block_forward_captured(x, weights, i, cfg, sink):
    """block_forward variant that records each pipeline stage's maps."""
    p = f"blocks.{i}."
    attn_in = _ln_tokens(x, weights[p + "ln1.gamma"], weights[p + "ln1.beta"])
    lw = block_refiner_weights(weights, i)
    raw, v = attn.compute_attention_maps(attn_in, lw, cfg.refiner)
    sink[(i, "raw")] = raw.maps.data.copy()
    expanded = attn.expand_maps(raw, lw.w_expand)
    sink[(i, "expanded")] = expanded.maps.data.copy()
    convolved = attn.dla_apply(
        expanded, lw.kernels, cfg.refiner.conv_mode, cfg.use_class_token
    )
    sink[(i, "convolved")] = convolved.maps.data.copy()
    if cfg.refiner.use_reduction:
        final = attn.reduce_maps(convolved, lw.w_reduce)
        sink[(i, "reduced")] = final.maps.data.copy()
    else:
        final = convolved
    y = attn.aggregate(final, v, lw.w_out, lw.b_out, cfg.refiner)
    x1 = T.add(x, y)
    t = T.layer_norm(T.transpose(x1), weights[p + "ln2.gamma"], weights[p + "ln2.beta"])
    h = T.matmul(t, weights[p + "mlp.fc1.w"])
    if cfg.mlp_bias:
        h = T.add(h, weights[p + "mlp.fc1.bias"])
    h = T.gelu(h)
    h = T.matmul(h, weights[p + "mlp.fc2.w"])
    if cfg.mlp_bias:
        h = T.add(h, weights[p + "mlp.fc2.bias"])
    return T.add(x1, T.transpose(h)), final


def model_forward(
    image: Tensor | np.ndarray, weights: dict[str, Tensor], cfg: ModelConfig
) -> Tensor:
    """Logits for one image or a batch of images."""
    return forward(image, weights, cfg).logits


# ---------------------------------------------------------------------------
# counting


def count_params(cfg: ModelConfig) -> int:
    """Exact learnable-parameter count from the shapes the config implies."""
    rc = cfg.refiner
    d, d_in = rc.d, rc.d_in
    total = 3 * cfg.patch_size**2 * cfg.dim
    if cfg.patch_bias:
        total += cfg.dim
    if cfg.use_class_token:
        total += cfg.dim
    total += cfg.dim * cfg.num_tokens
    per_block = 4 * cfg.dim  # two layer norms
    per_block += 3 * d * d_in + (3 * d if rc.qkv_bias else 0)
    per_block += refiner_overhead_per_block(rc)
    per_block += d_in * rc.d_out_in + (d_in if rc.out_bias else 0)
    per_block += cfg.dim * cfg.mlp_hidden + cfg.mlp_hidden * cfg.dim
    if cfg.mlp_bias:
        per_block += cfg.mlp_hidden + cfg.dim
    total += cfg.depth * per_block
    total += 2 * cfg.dim
    total += cfg.dim * cfg.num_classes + (cfg.num_classes if cfg.head_bias else 0)
    return total


def refiner_overhead_per_block(rc: RefinerConfig) -> int:
    """Parameters added by expansion + kernels + reduction in one block."""
    hp, h = rc.heads_expanded, rc.heads
    kernel = hp * (2 * rc.k if rc.conv_mode == "rowcol" else rc.k * rc.k)
    return hp * h + kernel + (h * hp if rc.use_reduction else 0)


def count_flops(cfg: ModelConfig, resolution: int | None = None) -> int:
    """Total multiply-accumulates for one forward pass (1 MAC = 1 FLOP)."""
    return sum(flop_breakdown(cfg, resolution).values())


def flop_breakdown(cfg: ModelConfig, resolution: int | None = None) -> dict[str, int]:
    """Per-component MACs. Bias adds, norms and softmax are not counted,
    and map sharing is not discounted (the counter reports the unshared
    pipeline)."""
    res = resolution or cfg.img_size
    if res % cfg.patch_size != 0:
        raise ConfigError(f"resolution {res} not divisible by patch {cfg.patch_size}")
    rc = cfg.refiner
    n_patches = (res // cfg.patch_size) ** 2
    n = n_patches + (1 if cfg.use_class_token else 0)
    d, d_in, dh = rc.d, rc.d_in, rc.head_dim
    h, hp = rc.heads, rc.heads_expanded
    kernel_taps = 2 * rc.k if rc.conv_mode == "rowcol" else rc.k * rc.k
    depth = cfg.depth
    return {
        "patch_embed": n_patches * cfg.dim * 3 * cfg.patch_size**2,
        "qkv": depth * n * d_in * 3 * d,
        "attn_logits": depth * h * n * n * dh,
        "expand": depth * hp * h * n * n,
        "conv": depth * hp * kernel_taps * n * n,
        "reduce": depth * (h * hp * n * n if rc.use_reduction else 0),
        "aggregate": depth * rc.aggregate_heads * n * n * dh,
        "out_proj": depth * n * rc.d_out_in * d_in,
        "mlp": depth * 2 * n * cfg.dim * cfg.mlp_hidden,
        "head": cfg.dim * cfg.num_classes,
    }


ATTENTION_MAP_TERMS = ("attn_logits", "expand", "conv", "reduce", "aggregate")


# ---------------------------------------------------------------------------
# positional-embedding interpolation


def interpolate_pos_embed(pos: np.ndarray, old_n: int, new_n: int) -> np.ndarray:
    """Bilinearly resample grid positions; a class slot is copied unchanged.

    ``pos`` is ``[dim, old_n]`` or ``[dim, old_n + 1]`` with the class slot
    first. Both token counts must be perfect squares.
    """
    from .imaging import bilinear_resize  # local import to avoid a cycle

    old_side = int(round(old_n**0.5))
    new_side = int(round(new_n**0.5))
    if old_side * old_side != old_n or new_side * new_side != new_n:
        raise ConfigError(f"token counts must be perfect squares, got {old_n}, {new_n}")
    pos = np.asarray(pos)
    has_cls = pos.shape[1] == old_n + 1
    if not has_cls and pos.shape[1] != old_n:
        raise ShapeMismatchError(f"pos shape {pos.shape} does not match old_n={old_n}")
    if new_n == old_n:
        return pos.copy()
    grid = pos[:, 1:] if has_cls else pos
    grid = grid.reshape(pos.shape[0], old_side, old_side)
    resized = bilinear_resize(grid, new_side, new_side).reshape(pos.shape[0], new_n)
    if has_cls:
        return np.concatenate([pos[:, :1], resized], axis=1)
    return resized


# ---------------------------------------------------------------------------
# checkpoints


def config_to_dict(cfg: ModelConfig) -> dict:
    rc = cfg.refiner
    return {
        "img_size": cfg.img_size, "patch_size": cfg.patch_size,
        "num_classes": cfg.num_classes, "depth": cfg.depth, "dim": cfg.dim,
        "heads": cfg.heads, "mlp_ratio": cfg.mlp_ratio,
        "use_class_token": int(cfg.use_class_token),
        "mlp_bias": int(cfg.mlp_bias), "patch_bias": int(cfg.patch_bias),
        "head_bias": int(cfg.head_bias),
        "refiner_d": rc.d, "refiner_r": rc.r, "refiner_k": rc.k,
        "refiner_conv_mode": rc.conv_mode,
        "refiner_use_reduction": int(rc.use_reduction),
        "refiner_share_next": rc.share_next,
        "refiner_qkv_bias": int(rc.qkv_bias), "refiner_out_bias": int(rc.out_bias),
    }


def config_from_dict(data: dict) -> ModelConfig:
    refiner = RefinerConfig(
        d_in=int(data["dim"]), heads=int(data["heads"]), d=int(data["refiner_d"]),
        r=int(data["refiner_r"]), k=int(data["refiner_k"]),
        conv_mode=str(data["refiner_conv_mode"]),
        use_reduction=bool(data["refiner_use_reduction"]),
        share_next=int(data["refiner_share_next"]),
        qkv_bias=bool(data["refiner_qkv_bias"]),
        out_bias=bool(data["refiner_out_bias"]),
    )
    return ModelConfig(
        img_size=int(data["img_size"]), patch_size=int(data["patch_size"]),
        num_classes=int(data["num_classes"]), depth=int(data["depth"]),
        dim=int(data["dim"]), heads=int(data["heads"]), refiner=refiner,
        mlp_ratio=int(data["mlp_ratio"]),
        use_class_token=bool(data["use_class_token"]),
        mlp_bias=bool(data["mlp_bias"]), patch_bias=bool(data["patch_bias"]),
        head_bias=bool(data["head_bias"]),
    )


def save_checkpoint(path: str | Path, cfg: ModelConfig, weights: dict[str, Tensor]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, tensor in weights.items():
        fname = name + ".rvt"
        rvt.write_rvt(path / fname, tensor.data)
        manifest[name] = {
            "shape": list(tensor.shape),
            "dtype": "f64" if tensor.dtype == np.float64 else "f32",
            "file": fname,
        }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (path / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=1, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, Tensor]]:
    path = Path(path)
    cfg = config_from_dict(json.loads((path / "config.json").read_text()))
    manifest = json.loads((path / "manifest.json").read_text())
    weights: dict[str, Tensor] = {}
    for name, meta in manifest.items():
        arr = rvt.read_rvt(path / meta["file"])
        if list(arr.shape) != meta["shape"]:
            raise ConfigError(f"checkpoint tensor {name} has shape {arr.shape}, "
                              f"manifest says {meta['shape']}")
        weights[name] = Tensor(arr, requires_grad=True)
    return cfg, weights


def degenerate_twin(cfg: ModelConfig) -> ModelConfig:
    """Same architecture with the refiner collapsed to plain attention."""
    refiner = replace(cfg.refiner, r=1, k=1)
    return replace(cfg, refiner=refiner)
