"""Softmax and linear attention, band-masked cross attention, self/cross blocks."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import EmptyRow, ShapeMismatch
from .features import FeatureMap, dense_mlp
from .geometry import EpipolarBand, band_masks
from .params import ParamStore


def softmax(x, axis=-1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _check(Q, K, V):
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeMismatch("attention operands must be 2-D")
    if Q.shape[1] != K.shape[1]:
        raise ShapeMismatch(f"query width {Q.shape[1]} != key width {K.shape[1]}")
    if K.shape[0] != V.shape[0]:
        raise ShapeMismatch(f"{K.shape[0]} keys but {V.shape[0]} values")
    return Q, K, V


def attention_weights(Q, K, mask=None) -> np.ndarray:
    """Row-stochastic softmax(QK^T / sqrt(d)) restricted to ``mask``."""
    s = (Q @ K.T) / np.sqrt(Q.shape[1])
    if mask is None:
        return softmax(s, axis=1)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != s.shape:
        raise ShapeMismatch(f"mask shape {mask.shape} != score shape {s.shape}")
    if not mask.any(axis=1).all():
        raise EmptyRow("attention mask has a query row with no admissible keys")
    s = np.where(mask, s, -np.inf)
    return softmax(s, axis=1)


def vanilla_attention(Q, K, V, mask=None) -> np.ndarray:
    Q, K, V = _check(Q, K, V)
    return attention_weights(Q, K, mask) @ V


def elu_feature_map(x) -> np.ndarray:
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def linear_attention(Q, K, V) -> np.ndarray:
    """Kernelized attention with phi(u) = elu(u) + 1, row-normalized."""
    Q, K, V = _check(Q, K, V)
    q, k = elu_feature_map(Q), elu_feature_map(K)
    kv = k.T @ V
    z = q @ k.sum(axis=0)
    return (q @ kv) / z[:, None]


def band_attention_mask(bands: Sequence[EpipolarBand], dims: tuple[int, int]) -> np.ndarray:
    """Dense query-by-key mask from per-query bands over a ``(H, W)`` key grid.

    Rows whose band misses every cell center fall back to full attention.
    """
    H, W = dims
    mask = band_masks(bands, W, H)
    mask[~mask.any(axis=1)] = True
    return mask


def attention_layer(x, y, params: ParamStore, prefix: str, kind: str = "vanilla",
                    mask=None, heads: int = 1) -> np.ndarray:
    """``x + MLP(Wo * attend(x Wq, y Wk, y Wv))`` on flattened features."""
    C = x.shape[1]
    if C % heads:
        raise ShapeMismatch(f"{C} channels are not divisible by {heads} heads")
    wq = params.get_shaped(f"{prefix}.wq", (C, C))
    wk = params.get_shaped(f"{prefix}.wk", (C, C))
    wv = params.get_shaped(f"{prefix}.wv", (C, C))
    wo = params.get_shaped(f"{prefix}.wo", (C, C))
    q, k, v = x @ wq, y @ wk, y @ wv
    d = C // heads
    parts = []
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        if kind == "linear":
            parts.append(linear_attention(q[:, sl], k[:, sl], v[:, sl]))
        elif kind == "vanilla":
            parts.append(vanilla_attention(q[:, sl], k[:, sl], v[:, sl], mask))
        else:
            raise ValueError(f"unknown attention kind {kind!r}")
    message = np.concatenate(parts, axis=1) @ wo
    mlp = [params[f"{prefix}.{n}"] for n in ("mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")]
    return x + dense_mlp(message, *mlp)


def self_cross_block(f_a: FeatureMap, f_b: FeatureMap, params: ParamStore, prefix: str,
                     kind: str = "vanilla", mask_ab=None, mask_ba=None,
                     heads: int = 1) -> tuple[FeatureMap, FeatureMap]:
    """Self attention on each map, then simultaneous cross attention.

    ``mask_ab`` restricts ``f_a`` queries over ``f_b`` keys (and vice versa).
    """
    if f_a.channels != f_b.channels:
        raise ShapeMismatch("maps have different channel counts")
    a, b = f_a.flat(), f_b.flat()
    a = attention_layer(a, a, params, f"{prefix}.self", kind, heads=heads)
    b = attention_layer(b, b, params, f"{prefix}.self", kind, heads=heads)
    a2 = attention_layer(a, b, params, f"{prefix}.cross", kind, mask_ab, heads)
    b2 = attention_layer(b, a, params, f"{prefix}.cross", kind, mask_ba, heads)
    return f_a.with_flat(a2), f_b.with_flat(b2)


def epipolar_cross_attention(f_q: FeatureMap, f_kv: FeatureMap, bands: Sequence[EpipolarBand],
                             params: ParamStore, tolerance: float | None = None,
                             prefix: str = "epi", heads: int = 1) -> FeatureMap:
    """Cross attention where each query only sees keys inside its epipolar band."""
    if len(bands) != f_q.height * f_q.width:
        raise ShapeMismatch(f"{len(bands)} bands for {f_q.height * f_q.width} query cells")
    if tolerance is not None:
        bands = [EpipolarBand(b.line, tolerance, b.valid) for b in bands]
    mask = band_attention_mask(bands, f_kv.dims)
    out = attention_layer(f_q.flat(), f_kv.flat(), params, prefix, "vanilla", mask, heads)
    return f_q.with_flat(out)
