"""Stateless numpy kernels and their backward passes.

All functions broadcast over leading batch axes; the last axis (or the last
two, for attention) carries the feature dimension.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import IndexOutOfRange, ShapeMismatch

# python floats keep float32 arrays in float32
_GELU_C = math.sqrt(2.0 / math.pi)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dy: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximated GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


def gelu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def layer_norm(x, gamma, beta, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd)


def layer_norm_backward(dy, gamma, cache):
    xhat, rstd = cache
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    dxhat = dy * gamma
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def embedding_lookup(table: np.ndarray, ids) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexOutOfRange(f"ids must lie in [0, {table.shape[0]}), got "
                              f"[{ids.min()}, {ids.max()}]")
    return table[ids]


def embedding_backward(dy: np.ndarray, ids, vocab: int) -> np.ndarray:
    """Scatter-add of ``dy`` rows into a (vocab, D) table gradient."""
    ids = np.asarray(ids).reshape(-1)
    flat = dy.reshape(ids.size, -1)
    out = np.empty((vocab, flat.shape[1]), dtype=dy.dtype)
    for c in range(flat.shape[1]):
        out[:, c] = np.bincount(ids, weights=flat[:, c], minlength=vocab)
    return out


def self_attention(Z: np.ndarray, U: np.ndarray) -> np.ndarray:
    """One attention head: ``[q|k|v] = Z U``, ``softmax(q k^T / sqrt(D_h)) v``.

    ``Z`` is (..., N, D) and ``U`` is (D, 3 D_h).
    """
    if U.ndim != 2 or U.shape[0] != Z.shape[-1] or U.shape[1] % 3:
        raise ShapeMismatch(f"U {U.shape} incompatible with Z {Z.shape}")
    dh = U.shape[1] // 3
    qkv = Z @ U
    q, k, v = qkv[..., :dh], qkv[..., dh:2 * dh], qkv[..., 2 * dh:]
    a = softmax(q @ np.swapaxes(k, -1, -2) / math.sqrt(dh))
    return a @ v


def multi_head_attention(Z: np.ndarray, U: np.ndarray, V: np.ndarray,
                         bias: np.ndarray | None = None) -> np.ndarray:
    """``[SA_1(Z) | ... | SA_h(Z)] V`` with per-head projections ``U[h]``.

    ``U`` is (h, D, 3 D_h) with ``h * D_h == D``; ``V`` is (D, D).
    """
    h, d, three_dh = U.shape
    if Z.shape[-1] != d or three_dh * h != 3 * d or V.shape != (d, d):
        raise ShapeMismatch(f"MSA shapes Z {Z.shape}, U {U.shape}, V {V.shape}")
    heads = [self_attention(Z, U[i]) for i in range(h)]
    out = np.concatenate(heads, axis=-1) @ V
    return out if bias is None else out + bias


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    """(B, H, W, C) -> (B, K, P*P*C), patches in row-major order."""
    b, hh, ww, c = x.shape
    if hh % p or ww % p:
        raise ShapeMismatch(f"patch size {p} does not divide {hh}x{ww}")
    x = x.reshape(b, hh // p, p, ww // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (hh // p) * (ww // p), p * p * c)


def unpatchify(z: np.ndarray, p: int, hh: int, ww: int) -> np.ndarray:
    b, _, ppc = z.shape
    c = ppc // (p * p)
    z = z.reshape(b, hh // p, ww // p, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return z.reshape(b, hh, ww, c)
