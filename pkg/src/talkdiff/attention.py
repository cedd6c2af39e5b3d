"""Multi-head cross-attention between a latent feature map and audio tokens.

Queries come from the flattened spatial positions of a [C, H, W] latent,
keys and values from the audio token matrix.  No positional encoding is
applied to the tokens, so jointly permuting them leaves the output
unchanged.  Forward and backward are written out explicitly so every
gradient can be checked against finite differences.

Every attention evaluation bumps a module-level counter
(:func:`attention_call_count`); adapters are asserted against it.  The
counter is best-effort instrumentation and not synchronized across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

_CALL_COUNT = 0


def attention_call_count() -> int:
    """Total attention evaluations in this process (1 per forward call)."""
    return _CALL_COUNT


@dataclass
class AttnWeights:
    """Projection matrices for one cross-attention module.

    ``w_q``: [C, D], ``w_k``/``w_v``: [D_a, D], ``w_o``: [D, C], with D
    split across ``heads``.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    heads: int = 1

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v", "w_o"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2 or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be a finite 2-D matrix")
            setattr(self, name, arr)
        c, d = self.w_q.shape
        if self.w_k.shape[1] != d or self.w_v.shape != self.w_k.shape:
            raise ValueError("w_k/w_v column count must match w_q")
        if self.w_o.shape != (d, c):
            raise ValueError(f"w_o must be [{d}, {c}], got {self.w_o.shape}")
        if self.heads < 1 or d % self.heads != 0:
            raise ValueError(f"model dim {d} not divisible by heads {self.heads}")

    @property
    def query_channels(self) -> int:
        return self.w_q.shape[0]

    @property
    def model_dim(self) -> int:
        return self.w_q.shape[1]

    @property
    def audio_dim(self) -> int:
        return self.w_k.shape[0]

    def to_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {
            prefix + "w_q": self.w_q,
            prefix + "w_k": self.w_k,
            prefix + "w_v": self.w_v,
            prefix + "w_o": self.w_o,
        }


def init_attn_weights(rng: np.random.Generator, query_channels: int, model_dim: int,
                      audio_dim: int, heads: int = 1) -> AttnWeights:
    """Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization."""

    def u(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return AttnWeights(
        w_q=u(query_channels, (query_channels, model_dim)),
        w_k=u(audio_dim, (audio_dim, model_dim)),
        w_v=u(audio_dim, (audio_dim, model_dim)),
        w_o=u(model_dim, (model_dim, query_channels)),
        heads=heads,
    )


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax, max-shifted for overflow safety."""
    m = np.asarray(m, dtype=np.float64)
    out = m - m.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return out


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    # [B, S, D] -> [B, heads, S, D/heads]
    b, s, d = x.shape
    return x.reshape(b, s, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    # [B, heads, S, dh] -> [B, S, heads*dh]
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def _attention_forward(x: np.ndarray, a: np.ndarray, w: AttnWeights,
                       need_cache: bool = False):
    """Batched core: x [B, S, C], a [B, T, D_a] -> out [B, S, C].

    Counts as one attention evaluation regardless of batch size.
    """
    global _CALL_COUNT
    _CALL_COUNT += 1
    b, s, c = x.shape
    t = a.shape[1]
    d = w.model_dim
    # projections as single flat GEMMs, then split into heads
    q = _split_heads((x.reshape(-1, c) @ w.w_q).reshape(b, s, d), w.heads)
    k = _split_heads((a.reshape(-1, a.shape[2]) @ w.w_k).reshape(b, t, d), w.heads)
    v = _split_heads((a.reshape(-1, a.shape[2]) @ w.w_v).reshape(b, t, d), w.heads)
    scale = 1.0 / np.sqrt(d // w.heads)
    scores = (q @ k.swapaxes(-1, -2)) * scale     # [B, h, S, T]
    probs = softmax_rows(scores)
    ctx = _merge_heads(probs @ v)                 # [B, S, D]
    out = (ctx.reshape(-1, d) @ w.w_o).reshape(b, s, c)
    if not need_cache:
        return out, None
    return out, {"x": x, "a": a, "q": q, "k": k, "v": v, "probs": probs,
                 "ctx": ctx, "scale": scale, "w": w}


def _attention_backward(cache: dict, d_out: np.ndarray):
    """Reverse-mode gradients for the batched core.

    Returns (dx, da, weight grads dict).
    """
    w: AttnWeights = cache["w"]
    x, a = cache["x"], cache["a"]
    q, k, v, probs = cache["q"], cache["k"], cache["v"], cache["probs"]
    scale = cache["scale"]

    d = w.model_dim
    c = w.query_channels
    da_dim = w.audio_dim
    b, s, _ = d_out.shape
    d_out_flat = d_out.reshape(-1, c)
    d_wo = cache["ctx"].reshape(-1, d).T @ d_out_flat
    d_ctx = _split_heads((d_out_flat @ w.w_o.T).reshape(b, s, d), w.heads)

    d_probs = d_ctx @ v.swapaxes(-1, -2)                         # [B, h, S, T]
    d_v = probs.swapaxes(-1, -2) @ d_ctx                         # [B, h, T, dh]
    # softmax backward per row: dL = P * (dP - sum(dP * P));
    # d_probs is consumed in place, it is a fresh matmul output
    row_dot = np.sum(d_probs * probs, axis=-1, keepdims=True)
    d_probs -= row_dot
    d_probs *= probs
    d_scores = d_probs
    d_q = (d_scores @ k) * scale
    d_k = (d_scores.swapaxes(-1, -2) @ q) * scale

    t = a.shape[1]
    d_q = _merge_heads(d_q).reshape(-1, d)
    d_k = _merge_heads(d_k).reshape(-1, d)
    d_v = _merge_heads(d_v).reshape(-1, d)

    d_wq = x.reshape(-1, c).T @ d_q
    d_wk = a.reshape(-1, da_dim).T @ d_k
    d_wv = a.reshape(-1, da_dim).T @ d_v
    dx = (d_q @ w.w_q.T).reshape(b, s, c)
    da = (d_k @ w.w_k.T + d_v @ w.w_v.T).reshape(b, t, da_dim)
    return dx, da, {"w_q": d_wq, "w_k": d_wk, "w_v": d_wv, "w_o": d_wo}


def _check_shapes(z: np.ndarray, a: np.ndarray, w: AttnWeights) -> Tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if z.ndim != 3:
        raise ValueError(f"latent must be [C, H, W], got shape {z.shape}")
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValueError(f"audio tokens must be [T, D_a] with T >= 1, got {a.shape}")
    if z.shape[0] != w.query_channels:
        raise ValueError(f"latent has {z.shape[0]} channels, weights expect {w.query_channels}")
    if a.shape[1] != w.audio_dim:
        raise ValueError(f"tokens have dim {a.shape[1]}, weights expect {w.audio_dim}")
    if not np.all(np.isfinite(z)) or not np.all(np.isfinite(a)):
        raise ValueError("non-finite input")
    return z, a


def cross_attention(z: np.ndarray, a: np.ndarray, w: AttnWeights) -> np.ndarray:
    """Attend the flattened latent over the audio tokens.

    Output has the same [C, H, W] shape as the input latent and is a
    deterministic function of (z, a, w).
    """
    z, a = _check_shapes(z, a, w)
    c, h, wd = z.shape
    x = z.reshape(c, h * wd).T[None]       # [1, S, C]
    out, _ = _attention_forward(x, a[None], w)
    return out[0].T.reshape(c, h, wd)


def cross_attention_backward(z: np.ndarray, a: np.ndarray, w: AttnWeights,
                             upstream: np.ndarray):
    """Gradients of ``sum(upstream * cross_attention(z, a, w))``.

    Returns ``(d_z, d_a, d_weights)`` with ``d_weights`` keyed like
    :meth:`AttnWeights.to_dict`.
    """
    z, a = _check_shapes(z, a, w)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != z.shape:
        raise ValueError(f"upstream shape {upstream.shape} != latent shape {z.shape}")
    c, h, wd = z.shape
    x = z.reshape(c, h * wd).T[None]
    _, cache = _attention_forward(x, a[None], w, need_cache=True)
    d_out = upstream.reshape(c, h * wd).T[None]
    dx, da, d_w = _attention_backward(cache, d_out)
    return dx[0].T.reshape(c, h, wd), da[0], d_w
