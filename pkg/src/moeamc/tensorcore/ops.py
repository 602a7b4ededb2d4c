"""Differentiable primitives used by the convolutional and attention networks."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, _unbroadcast, as_tensor, make_node

CE_CLAMP = 1e-12


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a @ b`` with numpy broadcasting of leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ValueError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return make_node(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as (in_features, out_features)."""
    y = matmul(x, w)
    return y if b is None else y + b


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form stays finite for any input and gives exactly 0.5 at 0
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), bw, "softmax")


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [B, C_in, L] with ``w`` [C_out, C_in, k]."""
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError("conv1d expects x [B, C, L] and w [C_out, C_in, k]")
    B, C, L = x.shape
    Co, Ci, k = w.shape
    if Ci != C:
        raise ValueError(f"conv1d channel mismatch: x has {C}, w expects {Ci}")
    if stride < 1 or pad < 0 or L + 2 * pad < k:
        raise ValueError(f"invalid conv1d geometry L={L} k={k} stride={stride} pad={pad}")
    Lout = (L + 2 * pad - k) // stride + 1
    span = stride * (Lout - 1) + 1
    # channel-major working layout: one GEMM of [C_out, C*k] x [C*k, B*Lout];
    # outputs are [B, C, L] views of channel-major memory
    xp = np.zeros((C, B, L + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + L] = x.data.transpose(1, 0, 2)
    cols = np.empty((C, k, B, Lout), dtype=x.dtype)
    for j in range(k):
        cols[:, j] = xp[:, :, j : j + span : stride]
    cols = cols.reshape(C * k, B * Lout)
    wmat = w.data.reshape(Co, C * k)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(Co, B, Lout).transpose(1, 0, 2)

    def bw(g):
        gf = g.transpose(1, 0, 2).reshape(Co, B * Lout)
        gw = (gf @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = gf.sum(axis=1) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gf).reshape(C, k, B, Lout)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j : j + span : stride] += dcols[:, j]
            gx = gxp[:, :, pad : pad + L].transpose(1, 0, 2)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, bw, "conv1d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of ``x`` [B, C, L] over the (B, L) axes.

    In training mode the batch statistics (biased variance) normalize the
    input and the running buffers are updated in place as
    ``r <- (1 - momentum) * r + momentum * batch_stat``; the running variance
    uses the unbiased estimate. Eval mode normalizes with the running buffers.
    """
    if x.ndim != 3:
        raise ValueError("batch_norm expects x [B, C, L]")
    B, C, L = x.shape
    shp = (1, C, 1)
    if training:
        n = B * L
        if n < 2:
            raise ValueError("batch_norm in training mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2), keepdims=True)
        var = x.data.var(axis=(0, 2), keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(C)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(C) * (n / (n - 1))
    else:
        mu = running_mean.reshape(shp).astype(x.dtype, copy=False)
        var = running_var.reshape(shp).astype(x.dtype, copy=False)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gd = gamma.data.reshape(shp)
    out = gd * xhat + beta.data.reshape(shp)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2))
        gbeta = g.sum(axis=(0, 2))
        dxhat = g * gd
        if training:
            n = B * L
            gx = (inv / n) * (
                n * dxhat
                - dxhat.sum(axis=(0, 2), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
            )
        else:
            gx = dxhat * inv
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), bw, "batch_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        dxhat = g * gamma.data
        gx = (inv / d) * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), bw, "layer_norm")


def max_pool1d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    if x.ndim != 3:
        raise ValueError("max_pool1d expects x [B, C, L]")
    L = x.shape[2]
    if k < 1 or stride < 1 or L < k:
        raise ValueError(f"invalid max_pool1d geometry L={L} k={k} stride={stride}")
    Lout = (L - k) // stride + 1
    span = stride * (Lout - 1) + 1
    # running max over the k window offsets; strict > keeps the first maximum
    out = x.data[:, :, 0:span:stride].copy()
    arg = np.zeros(out.shape, dtype=np.int32)
    for j in range(1, k):
        cand = x.data[:, :, j : j + span : stride]
        better = (cand > out).view(np.int8)
        arg += better * (j - arg)
        np.maximum(out, cand, out=out)

    def bw(g):
        gx = np.zeros_like(x.data)
        for j in range(k):
            gx[:, :, j : j + span : stride] += g * (arg == j)
        return (gx,)

    return make_node(out, (x,), bw, "max_pool1d")


def global_avg_pool(x: Tensor, axis: int = -1) -> Tensor:
    """Mean over one axis (the time axis), dropping it."""
    return x.mean(axis=axis)


def cross_entropy(probs: Tensor, labels, eps: float = CE_CLAMP) -> Tensor:
    """Mean of ``-ln(max(p[label], eps))`` over the batch.

    Consumes probabilities, not logits: every classifier here ends in softmax.
    """
    labels = np.asarray(labels, dtype=np.int64)
    B, K = probs.shape
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label out of range [0, {K})")
    rows = np.arange(B)
    picked = probs.data[rows, labels]
    clamped = np.maximum(picked, eps)
    loss = np.asarray(-np.log(clamped).mean(), dtype=probs.dtype)

    def bw(g):
        gp = np.zeros_like(probs.data)
        gp[rows, labels] = np.where(picked > eps, -1.0 / clamped, 0.0) * (g / B)
        return (gp,)

    return make_node(loss, (probs,), bw, "cross_entropy")


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(q k^T / sqrt(d_k)) v`` with softmax over the key axis."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query/key widths differ: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key/value counts differ: {k.shape[-2]} vs {v.shape[-2]}")
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = matmul(q, k.transpose(axes)) * (1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1), v)


def multi_head_attention(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    n_heads: int,
    bq: Tensor | None = None,
    bk: Tensor | None = None,
    bv: Tensor | None = None,
    bo: Tensor | None = None,
) -> Tensor:
    """Self-attention over ``x`` [B, T, d_model] split across `n_heads` heads."""
    B, T, d = x.shape
    if d % n_heads:
        raise ValueError(f"d_model={d} not divisible by n_heads={n_heads}")
    dh = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(linear(x, wq, bq))
    k = heads(linear(x, wk, bk))
    v = heads(linear(x, wv, bv))
    ctx = attention(q, k, v).transpose(0, 2, 1, 3).reshape(B, T, d)
    return linear(ctx, wo, bo)
