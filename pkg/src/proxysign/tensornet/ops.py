"""Differentiable operators on 5-D video tensors (N, C, T, H, W).

Every op computes its forward value with numpy and registers an exact
backward rule through :func:`make_node`.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from proxysign.tensornet.tensor import Tensor, make_node

# Upper bound on the size of one lowered (im2col) block, in bytes.
COL_BLOCK_BYTES = 64 * 2**20
# Lowered blocks are kept for the backward pass only below this total.
COL_CACHE_BYTES = 512 * 2**20


def _triple(v):
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


def conv_output_shape(in_dims, kernel, stride, pad):
    out = []
    for d, k, s, p in zip(in_dims, kernel, stride, pad):
        span = d + 2 * p - k
        if span < 0:
            raise ValueError(f"kernel {kernel} larger than padded input {in_dims}")
        out.append(span // s + 1)
    return tuple(out)


_KINK_LOGS: list[list] = []


@contextmanager
def kink_recorder():
    """Collect the branch pattern (ReLU masks, max-pool argmaxes) of forward passes.

    Two evaluations with equal patterns lie on the same smooth piece of a
    piecewise-smooth function.
    """
    log: list = []
    _KINK_LOGS.append(log)
    try:
        yield log
    finally:
        _KINK_LOGS.pop()


def _note_branches(a):
    if _KINK_LOGS:
        _KINK_LOGS[-1].append(np.packbits(a).tobytes() if a.dtype == bool else a.tobytes())


# --- elementwise and reductions ---------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return make_node(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return make_node(a.data * b.data, (a, b), backward)


def total(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return make_node(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_branches(mask)
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        x._accumulate(g * mask)

    return make_node(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, T, H, W) -> (N, C)"""
    if x.data.ndim != 5:
        raise ValueError(f"global_avg_pool expects 5-D input, got {x.shape}")
    count = np.prod(x.shape[2:])

    def backward(g):
        x._accumulate(np.broadcast_to((g / count)[:, :, None, None, None], x.shape))

    return make_node(x.data.mean(axis=(2, 3, 4)), (x,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (N, D), w (K, D), b (K,) -> (N, K)"""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ValueError(f"linear: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data)
        if w.requires_grad:
            w._accumulate(g.T @ x.data)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return make_node(x.data @ w.data.T + b.data, (x, w, b), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_crossentropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy of integer labels; returns (loss, probabilities)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if np.any((labels < 0) | (labels >= k)):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    probs = np.exp(logp)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1
        logits._accumulate(d * (g / n))

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), backward), probs


# --- convolution ------------------------------------------------------------

def _lower(xp, kernel, stride, out_dims, t0, t1, n0, n1):
    """im2col for output time rows [t0, t1) and batch rows [n0, n1).

    Returns (n, C*kt*kh*kw, (t1-t0)*Ho*Wo), rows ordered (c, a, b, d) to match
    a kernel reshaped to (F, C*kt*kh*kw).
    """
    kt, kh, kw = kernel
    st, sh, sw = stride
    _, ho, wo = out_dims
    src = xp[n0:n1, :, t0 * st:(t1 - 1) * st + kt]
    win = sliding_window_view(src, kernel, axis=(2, 3, 4))
    win = win[:, :, ::st, ::sh, ::sw][:, :, : t1 - t0, :ho, :wo]
    n, c = win.shape[:2]
    return win.transpose(0, 1, 5, 6, 7, 2, 3, 4).reshape(n, c * kt * kh * kw, -1)


def _blocks(n, c, kernel, out_dims, itemsize):
    """Split (batch, output-time) into blocks whose lowered size fits the budget."""
    ck = c * int(np.prod(kernel))
    row = ck * out_dims[1] * out_dims[2] * itemsize
    t_out = out_dims[0]
    per_sample = row * t_out
    if n * per_sample <= COL_BLOCK_BYTES:
        return [(0, n, 0, t_out)]
    if per_sample <= COL_BLOCK_BYTES:
        nb = max(1, COL_BLOCK_BYTES // per_sample)
        return [(i, min(n, i + nb), 0, t_out) for i in range(0, n, nb)]
    tb = max(1, COL_BLOCK_BYTES // row)
    return [(i, i + 1, t, min(t_out, t + tb)) for i in range(n) for t in range(0, t_out, tb)]


def conv3d(x: Tensor, k: Tensor, stride=1, pad=0) -> Tensor:
    """3-D cross-correlation without bias.

    x (N, C, T, H, W), k (F, C, t, h, w).  Output sizes follow
    floor((D + 2p - k) / s) + 1 per axis.  Evaluated by lowering blocks of the
    input to a matrix and multiplying by the flattened kernel.
    """
    stride, pad = _triple(stride), _triple(pad)
    if x.data.ndim != 5 or k.data.ndim != 5:
        raise ValueError(f"conv3d expects 5-D x and k, got {x.shape} and {k.shape}")
    n, c = x.shape[:2]
    f, kc = k.shape[:2]
    if kc != c:
        raise ValueError(f"conv3d: input has {c} channels, kernel expects {kc}")
    kernel = k.shape[2:]
    out_dims = conv_output_shape(x.shape[2:], kernel, stride, pad)
    dtype = np.result_type(x.dtype, k.dtype)
    pt, ph, pw = pad
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw))) if any(pad) else x.data
    wmat = k.data.reshape(f, -1).astype(dtype, copy=False)

    blocks = _blocks(n, c, kernel, out_dims, np.dtype(dtype).itemsize)
    plane = out_dims[1] * out_dims[2]
    out = np.empty((n, f) + out_dims, dtype=dtype)
    out_flat = out.reshape(n, f, -1)
    need_grad = x.requires_grad or k.requires_grad
    total_bytes = n * wmat.shape[1] * out_dims[0] * plane * np.dtype(dtype).itemsize
    cache = [] if need_grad and total_bytes <= COL_CACHE_BYTES else None
    for n0, n1, t0, t1 in blocks:
        cols = _lower(xp, kernel, stride, out_dims, t0, t1, n0, n1)
        out_flat[n0:n1, :, t0 * plane:t1 * plane] = np.matmul(wmat, cols)
        if cache is not None:
            cache.append(cols)

    def backward(g):
        g_flat = g.reshape(n, f, -1)
        dw = np.zeros_like(wmat) if k.requires_grad else None
        dxp = np.zeros(xp.shape, dtype=dtype) if x.requires_grad else None
        kt, kh, kw = kernel
        st, sh, sw = stride
        _, ho, wo = out_dims
        for i, (n0, n1, t0, t1) in enumerate(blocks):
            gb = g_flat[n0:n1, :, t0 * plane:t1 * plane]
            if dw is not None:
                cols = cache[i] if cache is not None else _lower(xp, kernel, stride, out_dims, t0, t1, n0, n1)
                dw += np.matmul(gb, cols.transpose(0, 2, 1)).sum(axis=0)
            if dxp is not None:
                dcols = np.matmul(wmat.T, gb).reshape(n1 - n0, c, kt, kh, kw, t1 - t0, ho, wo)
                for a in range(kt):
                    ta = t0 * st + a
                    for b in range(kh):
                        for d in range(kw):
                            dxp[n0:n1, :, ta:ta + st * (t1 - t0):st,
                                b:b + sh * ho:sh, d:d + sw * wo:sw] += dcols[:, :, a, b, d]
        if dw is not None:
            k._accumulate(dw.reshape(k.shape))
        if dxp is not None:
            t_, h_, w_ = x.shape[2:]
            x._accumulate(dxp[:, :, pt:pt + t_, ph:ph + h_, pw:pw + w_])

    return make_node(out, (x, k), backward)


# --- pooling ----------------------------------------------------------------

def maxpool3d(x: Tensor, window=3, stride=2, pad=0) -> Tensor:
    """Max pooling with -inf padding; ties go to the first offset in scan order."""
    window, stride, pad = _triple(window), _triple(stride), _triple(pad)
    if x.data.ndim != 5:
        raise ValueError(f"maxpool3d expects 5-D input, got {x.shape}")
    if any(p >= w for p, w in zip(pad, window)):
        raise ValueError("padding must be smaller than the window")
    out_dims = conv_output_shape(x.shape[2:], window, stride, pad)
    pt, ph, pw = pad
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)), constant_values=-np.inf)
    st, sh, sw = stride
    to, ho, wo = out_dims
    best = None
    arg = np.zeros(x.shape[:2] + out_dims, dtype=np.int16)
    offsets = [(a, b, d) for a in range(window[0]) for b in range(window[1]) for d in range(window[2])]
    for i, (a, b, d) in enumerate(offsets):
        v = xp[:, :, a:a + st * to:st, b:b + sh * ho:sh, d:d + sw * wo:sw]
        if best is None:
            best = v.copy()
            continue
        better = v > best
        best = np.where(better, v, best)
        arg[better] = i
    _note_branches(arg)

    def backward(g):
        dxp = np.zeros(xp.shape, dtype=x.dtype)
        for i, (a, b, d) in enumerate(offsets):
            dxp[:, :, a:a + st * to:st, b:b + sh * ho:sh, d:d + sw * wo:sw] += np.where(arg == i, g, 0)
        t_, h_, w_ = x.shape[2:]
        x._accumulate(dxp[:, :, pt:pt + t_, ph:ph + h_, pw:pw + w_])

    return make_node(best, (x,), backward)


# --- normalization ----------------------------------------------------------

def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, eps=1e-5, momentum=0.1) -> Tensor:
    """Per-channel normalization over (N, T, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance); in eval mode the buffers are used.
    """
    if x.data.ndim != 5:
        raise ValueError(f"batchnorm3d expects 5-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm3d: gamma/beta must have shape ({c},)")
    axes = (0, 2, 3, 4)
    bshape = (1, c, 1, 1, 1)
    m = x.data.size // c
    if training:
        if m < 2:
            raise ValueError("batchnorm3d: training needs more than one value per channel")
        mean = x.data.mean(axis=axes)
        centered = x.data - mean.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std.reshape(bshape)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * inv_std.reshape(bshape)
    xhat = xhat.astype(x.dtype, copy=False)
    inv_std = inv_std.astype(x.dtype, copy=False)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = dxhat.mean(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).mean(axis=axes).reshape(bshape)
                x._accumulate((dxhat - s1 - xhat * s2) * inv_std.reshape(bshape))
            else:
                x._accumulate(dxhat * inv_std.reshape(bshape))

    return make_node(out, (x, gamma, beta), backward)
