"""Straight-line numpy reference paths used as oracles by the tests.

These re-derive the model math with plain numpy (no tape, no shared code
with the package's op layer) so pipeline outputs can be checked against an
independent route.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf


def softmax_last(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def vanilla_mhsa(
    x: np.ndarray,
    w_q: np.ndarray,
    w_k: np.ndarray,
    w_v: np.ndarray,
    w_out: np.ndarray,
    heads: int,
    b_q: np.ndarray | None = None,
    b_k: np.ndarray | None = None,
    b_v: np.ndarray | None = None,
    b_out: np.ndarray | None = None,
) -> np.ndarray:
    """Plain multi-head self-attention on ``x`` of shape [..., d_in, n]."""
    def proj(w, b):
        out = np.matmul(w, x)
        if b is not None:
            out = out + b[..., :, None]
        return out

    q = proj(w_q, b_q)
    k = proj(w_k, b_k)
    v = proj(w_v, b_v)
    lead = x.shape[:-2]
    d, n = q.shape[-2:]
    dh = d // heads
    qh = q.reshape(lead + (heads, dh, n))
    kh = k.reshape(lead + (heads, dh, n))
    vh = v.reshape(lead + (heads, dh, n))
    logits = np.matmul(np.swapaxes(qh, -1, -2), kh) * (1.0 / math.sqrt(dh))
    maps = softmax_last(logits)
    agg = np.matmul(maps, np.swapaxes(vh, -1, -2))  # [..., H, n, dh]
    agg = np.swapaxes(agg, -3, -2).reshape(lead + (n, heads * dh))
    out = np.matmul(w_out, np.swapaxes(agg, -1, -2))
    if b_out is not None:
        out = out + b_out[..., :, None]
    return out


def layer_norm_tokens(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      eps: float = 1e-6) -> np.ndarray:
    """Normalise each token's feature vector; features on axis -2."""
    t = np.swapaxes(x, -1, -2)
    mu = t.mean(axis=-1, keepdims=True)
    var = ((t - mu) ** 2).mean(axis=-1, keepdims=True)
    normed = (t - mu) / np.sqrt(var + eps) * gamma + beta
    return np.swapaxes(normed, -1, -2)


def gelu_exact(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def vanilla_vit_forward(images: np.ndarray, weights: dict, cfg) -> np.ndarray:
    """Full vanilla-ViT forward (plain MHSA blocks) from a package weight set.

    ``weights`` maps names to package tensors; refiner-specific tensors
    (expand/conv/reduce) are ignored, which is exactly the degenerate case.
    """
    w = {name: t.data for name, t in weights.items()}
    p = cfg.patch_size
    g = cfg.grid
    lead = images.shape[:-3]
    nl = len(lead)
    x = images.reshape(lead + (3, g, p, g, p))
    x = np.transpose(x, tuple(range(nl)) + (nl + 1, nl + 3, nl, nl + 2, nl + 4))
    x = x.reshape(lead + (g * g, 3 * p * p))
    tokens = np.matmul(w["patch.w"], np.swapaxes(x, -1, -2))
    if cfg.patch_bias:
        tokens = tokens + w["patch.bias"][:, None]
    if cfg.use_class_token:
        cls = np.broadcast_to(w["cls_token"], lead + w["cls_token"].shape)
        tokens = np.concatenate([cls, tokens], axis=-1)
    tokens = tokens + w["pos_embed"]

    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        attn_in = layer_norm_tokens(tokens, w[pre + "ln1.gamma"], w[pre + "ln1.beta"])
        y = vanilla_mhsa(
            attn_in, w[pre + "attn.q.w"], w[pre + "attn.k.w"], w[pre + "attn.v.w"],
            w[pre + "attn.out.w"], cfg.heads,
            b_q=w.get(pre + "attn.q.bias"), b_k=w.get(pre + "attn.k.bias"),
            b_v=w.get(pre + "attn.v.bias"), b_out=w.get(pre + "attn.out.bias"),
        )
        tokens = tokens + y
        t = np.swapaxes(
            layer_norm_tokens(tokens, w[pre + "ln2.gamma"], w[pre + "ln2.beta"]),
            -1, -2,
        )
        h = np.matmul(t, w[pre + "mlp.fc1.w"])
        if cfg.mlp_bias:
            h = h + w[pre + "mlp.fc1.bias"]
        h = gelu_exact(h)
        h = np.matmul(h, w[pre + "mlp.fc2.w"])
        if cfg.mlp_bias:
            h = h + w[pre + "mlp.fc2.bias"]
        tokens = tokens + np.swapaxes(h, -1, -2)

    tokens = layer_norm_tokens(tokens, w["norm.gamma"], w["norm.beta"])
    if cfg.use_class_token:
        pooled = tokens[..., :, :1]
    else:
        pooled = tokens.mean(axis=-1, keepdims=True)
    logits = np.matmul(w["head.w"], pooled)
    if cfg.head_bias:
        logits = logits + w["head.bias"][:, None]
    return logits.reshape(lead + (cfg.num_classes,))
