"""Neural-network primitives with hand-written backward passes."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, VocabError
from .tensor import Tensor, _sigmoid, as_tensor, unbroadcast

_GELU_C = np.sqrt(2.0 / np.pi)


def rmsnorm(x, gain, eps: float = 1e-6) -> Tensor:
    """Scale each vector along the last axis to unit root-mean-square, then by ``gain``."""
    x = as_tensor(x)
    gain = as_tensor(gain, dtype=x.dtype)
    d = x.shape[-1]
    if gain.shape != (d,):
        raise DimensionError(f"gain has shape {gain.shape}, expected ({d},)")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    xn = x.data * r
    out = xn * gain.data

    def backward(g):
        gx = gg = None
        if gain.requires_grad:
            gg = (g * xn).reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            h = g * gain.data
            gx = r * (h - xn * np.mean(h * xn, axis=-1, keepdims=True))
        return gx, gg

    return Tensor._make(out, (x, gain), backward)


def rope_tables(position, d: int, base: float = 10000.0, dtype=np.float32):
    """cos/sin tables for rotating pairs ``(2i, 2i+1)`` by ``position * base**(-2i/d)``."""
    inv_freq = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    angles = np.asarray(position, dtype=np.float64)[..., None] * inv_freq
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope_rotate(x, position, base: float = 10000.0) -> Tensor:
    """Rotary position embedding.

    ``position`` is a scalar, or an array broadcasting against ``x.shape[:-1]``
    (typically one position per row of the second-to-last axis).
    """
    x = as_tensor(x)
    d = x.shape[-1]
    if d % 2:
        raise DimensionError(f"rotary embedding needs an even dimension, got {d}")
    if base <= 0:
        raise ValueError("base must be positive")
    cos, sin = rope_tables(position, d, base, x.dtype)
    x0 = x.data[..., 0::2]
    x1 = x.data[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, cos.shape[:-1] + (d,)), dtype=x.dtype)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos

    def backward(g):
        g0 = g[..., 0::2]
        g1 = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g0 * cos + g1 * sin
        gx[..., 1::2] = -g0 * sin + g1 * cos
        return (unbroadcast(gx, x.shape),)

    return Tensor._make(out, (x,), backward)


def conv1d(x, weight, bias=None) -> Tensor:
    """Same-length 1D convolution over the last axis.

    x: (B, C_in, T), weight: (C_out, C_in, k) with k odd, bias: (C_out,).
    Zero padding of k//2 on both sides.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    B, cin, T = x.shape
    cout, cin_w, k = weight.shape
    if cin != cin_w:
        raise DimensionError(f"conv1d expects {cin_w} input channels, got {cin}")
    if k % 2 == 0:
        raise DimensionError("conv1d kernel size must be odd")
    p = k // 2
    wmat = weight.data.reshape(cout, cin * k)
    if k == 1:
        cols = x.data.transpose(0, 2, 1).reshape(B * T, cin)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p)))
        # (B, C_in, T, k) -> (B*T, C_in*k)
        cols = sliding_window_view(xp, k, axis=2).transpose(0, 2, 1, 3).reshape(B * T, cin * k)
    out = cols @ wmat.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = out.reshape(B, T, cout).transpose(0, 2, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gT = g.transpose(0, 2, 1).reshape(B * T, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gT.T @ cols).reshape(weight.shape)
        if x.requires_grad:
            gcols = (gT @ wmat).reshape(B, T, cin, k)
            if k == 1:
                gx = gcols[..., 0].transpose(0, 2, 1)
            else:
                gxp = np.zeros((B, cin, T + 2 * p), dtype=g.dtype)
                for j in range(k):
                    gxp[:, :, j:j + T] += gcols[:, :, :, j].transpose(0, 2, 1)
                gx = gxp[:, :, p:p + T]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._make(out, parents, backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``.

    ``mask`` (same shape as targets) excludes padded positions from the mean.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets shape {targets.shape} vs logits {logits.shape}")
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    valid = targets[mask]
    if valid.size and (valid.min() < 0 or valid.max() >= V):
        raise VocabError(f"target index out of range [0, {V})")
    safe_t = np.where(mask, targets, 0)
    logp = log_softmax_np(logits.data)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    count = max(int(mask.sum()), 1)
    loss = -(picked * mask).sum() / count

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe_t[..., None],
                          np.take_along_axis(grad, safe_t[..., None], axis=-1) - 1.0, axis=-1)
        grad *= (mask[..., None] * (g / count)).astype(grad.dtype)
        return (grad,)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return Tensor._make(out.astype(xd.dtype), (x,), backward)


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = x.data * s
    return Tensor._make(out, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


def embedding(table, idx) -> Tensor:
    """Row lookup ``table[idx]``; gradients scatter-add back into the table."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise VocabError(f"index out of range [0, {n})")

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (out,)

    return Tensor._make(table.data[idx], (table,), backward)


def stop_gradient(x) -> Tensor:
    """Same values, no gradient (the sg[.] operator)."""
    return Tensor(as_tensor(x).data)


def straight_through(v, v_hat) -> Tensor:
    """Forward value of ``v_hat``, backward routed unchanged into ``v``.

    Equivalent to ``v + sg[v_hat - v]`` but returns ``v_hat`` bit-exactly.
    """
    v = as_tensor(v)
    v_hat = as_tensor(v_hat)
    if v.shape != v_hat.shape:
        raise DimensionError(f"straight_through shape mismatch {v.shape} vs {v_hat.shape}")
    return Tensor._make(v_hat.data.astype(v.dtype, copy=True), (v,), lambda g: (g,))


def dropout(x, rate: float, rng, training: bool) -> Tensor:
    x = as_tensor(x)
    if not training or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * keep


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight (+ bias)`` with weight stored as (in, out)."""
    out = as_tensor(x) @ weight
    return out if bias is None else out + bias


def gru(x, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """Single GRU layer over (B, T, I) input, zero initial state; returns (B, T, H).

    Gate layout along the 3H axis is (reset, update, candidate).
    """
    x, w_ih, w_hh, b_ih, b_hh = (as_tensor(t) for t in (x, w_ih, w_hh, b_ih, b_hh))
    B, T, I = x.shape
    H = w_hh.shape[0]
    if w_ih.shape != (I, 3 * H) or w_hh.shape != (H, 3 * H):
        raise DimensionError("gru weight shapes do not match input/hidden sizes")
    # time-major buffers keep the per-step slices contiguous
    xi = (x.data.reshape(B * T, I) @ w_ih.data + b_ih.data).reshape(B, T, 3 * H).transpose(1, 0, 2).copy()
    Wh = w_hh.data
    bh = b_hh.data
    hs = np.zeros((T + 1, B, H), dtype=x.dtype)          # hs[t + 1] is the state after step t
    rz = np.empty((T, B, 2 * H), dtype=x.dtype)
    ns = np.empty((T, B, H), dtype=x.dtype)
    hns = np.empty((T, B, H), dtype=x.dtype)
    for t in range(T):
        hh = hs[t] @ Wh + bh
        g = _sigmoid(xi[t, :, :2 * H] + hh[:, :2 * H])
        hn = hh[:, 2 * H:]
        n = np.tanh(xi[t, :, 2 * H:] + g[:, :H] * hn)
        z = g[:, H:]
        hs[t + 1] = n + z * (hs[t] - n)
        rz[t], ns[t], hns[t] = g, n, hn

    def backward(gH):
        gH = gH.transpose(1, 0, 2)
        dhh = np.empty((T, B, 3 * H), dtype=gH.dtype)
        dn_all = np.empty((T, B, H), dtype=gH.dtype)
        dh_next = np.zeros((B, H), dtype=gH.dtype)
        WhT = Wh.T
        for t in range(T - 1, -1, -1):
            r, z = rz[t, :, :H], rz[t, :, H:]
            n = ns[t]
            dh = gH[t] + dh_next
            dn = dh * (1.0 - z) * (1.0 - n * n)
            dz = dh * (hs[t] - n) * z * (1.0 - z)
            dr = dn * hns[t] * r * (1.0 - r)
            dhh[t, :, :H] = dr
            dhh[t, :, H:2 * H] = dz
            dhh[t, :, 2 * H:] = dn * r
            dn_all[t] = dn
            dh_next = dh * z + dhh[t] @ WhT
        flat_hh = dhh.reshape(T * B, 3 * H)
        dWh = hs[:-1].reshape(T * B, H).T @ flat_hh
        dbh = flat_hh.sum(axis=0)
        dxi = dhh.copy()
        dxi[:, :, 2 * H:] = dn_all
        flat = dxi.transpose(1, 0, 2).reshape(B * T, 3 * H)
        dx = (flat @ w_ih.data.T).reshape(B, T, I) if x.requires_grad else None
        return dx, x.data.reshape(B * T, I).T @ flat, dWh, flat.sum(axis=0), dbh

    out = np.ascontiguousarray(hs[1:].transpose(1, 0, 2))
    return Tensor._make(out, (x, w_ih, w_hh, b_ih, b_hh), backward)
