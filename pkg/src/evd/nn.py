"""Functional layers with hand-written reverse-mode gradients.

Every ``*_fwd`` returns ``(out, cache)``; the matching ``*_bwd`` takes the
cache and the upstream gradient and returns input and parameter gradients.
Leading axes are treated as batch axes throughout.
"""
from __future__ import annotations

import math

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def timestep_embedding(t, dim: int, max_period: float = 10000.0, scale: float = 1000.0) -> np.ndarray:
    """Sinusoidal embedding ``gamma(t)`` of width ``dim``; ``t`` scalar or shape (B,)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = scale * t[:, None] * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=-1)
    return emb


def _sum_lead(x, keep: int):
    return x.reshape(-1, *x.shape[x.ndim - keep:]).sum(axis=0)


def linear_fwd(x, W, b):
    return x @ W + b, x


def linear_bwd(x, W, dy):
    dW = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = _sum_lead(dy, 1)
    return dy @ W.T, dW, db


def layernorm_fwd(x, g, b, eps: float = 1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layernorm_bwd(cache, dy):
    xhat, rstd, g = cache
    dg = _sum_lead(dy * xhat, 1)
    db = _sum_lead(dy, 1)
    dxhat = dy * g
    n = xhat.shape[-1]
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n)
    return dx, dg, db


def gelu_fwd(x):
    # in-place arithmetic: these activations are the largest temporaries in a step
    th = x * x
    th *= 0.044715
    th += 1.0
    th *= x
    th *= _GELU_C
    np.tanh(th, out=th)
    y = th + 1.0
    y *= x
    y *= 0.5
    return y, (x, th)


def gelu_bwd(cache, dy):
    x, th = cache
    dinner = x * x
    dinner *= 3 * 0.044715 * _GELU_C
    dinner += _GELU_C
    g = th * th
    np.subtract(1.0, g, out=g)
    g *= x
    g *= dinner
    g += th
    g += 1.0
    g *= 0.5
    g *= dy
    return g


def attention_fwd(x, Wqkv, bqkv, Wo, bo, heads: int):
    """Full multi-head self-attention over the token axis of ``x`` (B, N, d)."""
    B, N, d = x.shape
    dh = d // heads
    qkv = x @ Wqkv + bqkv
    qkv = qkv.reshape(B, N, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = 1.0 / math.sqrt(dh)
    p = q @ k.transpose(0, 1, 3, 2)
    p *= scale
    p -= p.max(axis=-1, keepdims=True)
    # clamp keeps exp out of the (slow) subnormal range; e^-60 is below f64 resolution next to the row max
    np.maximum(p, -60.0, out=p)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)
    o = p @ v
    o2 = o.transpose(0, 2, 1, 3).reshape(B, N, d)
    out = o2 @ Wo + bo
    return out, (x, q, k, v, p, o, o2, scale, heads)


def attention_bwd(cache, Wqkv, Wo, dy):
    x, q, k, v, p, o, o2, scale, heads = cache
    B, N, d = x.shape
    dh = d // heads
    dWo = o2.reshape(-1, d).T @ dy.reshape(-1, d)
    dbo = dy.reshape(-1, d).sum(axis=0)
    do = (dy @ Wo.T).reshape(B, N, heads, dh).transpose(0, 2, 1, 3)
    dv = p.transpose(0, 1, 3, 2) @ do
    # softmax backward; sum_j dp_ij p_ij equals do_i . o_i, which avoids one N x N temporary
    ds = do @ v.transpose(0, 1, 3, 2)
    ds -= (do * o).sum(axis=-1, keepdims=True)
    ds *= p
    ds *= scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, N, 3 * d)
    dWqkv = x.reshape(-1, d).T @ dqkv.reshape(-1, 3 * d)
    dbqkv = dqkv.reshape(-1, 3 * d).sum(axis=0)
    dx = dqkv @ Wqkv.T
    return dx, dWqkv, dbqkv, dWo, dbo
