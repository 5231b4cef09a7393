"""Differentiable attention layers over :mod:`autodiff` Vars.

Inputs are ``(..., N, d_model)``; leading axes are batch axes.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .attention import causal_mask
from .errors import ArgumentError
from .tensor_core import chunk_bounds


def lm_chunk_bounds(n: int, h: int) -> list[tuple[int, int]]:
    """Like :func:`chunk_bounds` but tolerates ``h > n`` by leaving trailing chunks empty."""
    if h <= n:
        return chunk_bounds(n, h)
    return [(i, i + 1) if i < n else (n, n) for i in range(h)]


def mean_core_weights(cores) -> ad.Var:
    w = [ad.softmax(g) for g in cores]
    if len(w) == 1:
        return w[0]
    return ad.mean(ad.stack(w, axis=0), axis=0)


def multi_linear_attention(q, k, v, wq, wk, wv, cores, wo, mode="chunked",
                           causal=True, allow_short=False) -> ad.Var:
    """Block-term attention with shared projections (batched, differentiable)."""
    qp, kp, vp = q @ wq, k @ wk, v @ wv
    w = mean_core_weights(cores)
    R = w.shape[-1]
    d = wq.shape[-1]
    if R < d:
        qp_r, kp_r = qp[..., :R], kp[..., :R]
    else:
        qp_r, kp_r = qp, kp
    scores = (qp_r * w) @ ad.swapaxes(kp_r, -1, -2)
    N = kp.shape[-2]
    if causal:
        scores = scores * causal_mask(N).astype(scores.dtype)
    if mode == "sum":
        mixed = scores @ vp
    elif mode == "chunked":
        h = len(cores)
        if h > N and not allow_short:
            raise ArgumentError(f"chunked mode needs h <= N, got h={h}, N={N}")
        parts = []
        for s, e in lm_chunk_bounds(N, h):
            if s == e:
                parts.append(ad.mul(vp[..., :, :], 0.0))  # empty chunk contributes zeros
            else:
                parts.append(scores[..., :, s:e] @ vp[..., s:e, :])
        mixed = ad.concat(parts, axis=-1)
    else:
        raise ArgumentError(f"unknown mode {mode!r}")
    return mixed @ wo


def scaled_dot_attention(q, k, v, causal=True) -> ad.Var:
    d = q.shape[-1]
    scores = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(d))
    if causal:
        N = k.shape[-2]
        bias = np.where(causal_mask(N), 0.0, -np.inf).astype(scores.dtype)
        scores = scores + bias
    return ad.softmax(scores, axis=-1) @ v


def multi_head_attention(q, k, v, wqs, wks, wvs, wo, causal=True) -> ad.Var:
    heads = [
        scaled_dot_attention(q @ wq, k @ wk, v @ wv, causal)
        for wq, wk, wv in zip(wqs, wks, wvs)
    ]
    return ad.concat(heads, axis=-1) @ wo
