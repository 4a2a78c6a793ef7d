"""Numeric kernels with a numba fast path and a pure-numpy fallback.

The package leans on BLAS (``@``) for every matrix product; the kernels
here cover the row-wise and elementwise inner loops that numpy cannot
fuse: softmax, layer norm, the silu feed-forward activation, the
optimizer update, cross-entropy from logits, and the scatter-add used
for embedding-table gradients.

The active implementation is picked once at import time from the
``RESMAE_BACKEND`` environment variable:

* ``numba``  - the jitted kernel set (raises if numba is missing)
* ``numpy``  - the pure-numpy fallbacks
* unset     - numba when importable, numpy otherwise

One deliberate exception: the exp-heavy forward kernels (softmax rows,
silu) use numpy in both sets, because numpy's SIMD exp beats numba's
scalar libm calls on builds without SVML; ``benchmarks/backend_bench.py``
quantifies this per kernel.  Both variants compute the same quantities.
Bitwise output can differ between backends because summation order
differs, so the reproducibility guarantees hold within a fixed backend
only.
"""

from __future__ import annotations

import os

import numpy as np


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------


def softmax_rows_np(x):
    """Row-wise softmax of a 2-D array, computed in place (returns x)."""
    m = x.max(axis=1, keepdims=True)
    np.subtract(x, m, out=x)
    np.exp(x, out=x)
    s = x.sum(axis=1, keepdims=True)
    x /= s
    return x


def softmax_rows_grad_np(p, dp):
    """Backward of row softmax: p are the probabilities, dp the upstream grad."""
    inner = (dp * p).sum(axis=1, keepdims=True)
    return p * (dp - inner)


def layernorm_np(x, g, b, eps):
    """Row layer norm.  Returns (y, mean, rstd); mean/rstd are per-row."""
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd[:, None] * g + b
    return y, mean, rstd


def layernorm_grad_np(dy, x, mean, rstd, g):
    """Backward of layernorm_np.  Returns (dx, dg, db)."""
    xhat = (x - mean[:, None]) * rstd[:, None]
    dyg = dy * g
    m1 = dyg.mean(axis=1, keepdims=True)
    m2 = (dyg * xhat).mean(axis=1, keepdims=True)
    dx = (dyg - m1 - xhat * m2) * rstd[:, None]
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    return dx, dg, db


def silu_np(x):
    """x * sigmoid(x).  Returns (y, sig); sig is reused by the backward."""
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, sig


def silu_grad_np(x, sig, dy):
    return dy * (sig * (1.0 + x * (1.0 - sig)))


def adamw_update_np(p, grad, m, v, step, lr, beta1, beta2, eps, wd):
    """Decoupled weight decay Adam update on flat arrays, in place."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    p -= lr * ((m / bc1) / (np.sqrt(v / bc2) + eps) + wd * p)


def add_rows_at_np(table, ids, rows):
    """table[ids[i]] += rows[i], with repeated ids accumulated."""
    np.add.at(table, ids, rows)


def softmax_xent_np(logits, targets):
    """Cross-entropy from logits.

    Returns (losses, probs) where losses[i] = -log softmax(logits[i])[targets[i]]
    and probs are the row softmax values (reused by the backward pass).
    """
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    e = np.exp(z)
    s = e.sum(axis=1)
    losses = np.log(s) - z[np.arange(logits.shape[0]), targets]
    probs = e / s[:, None]
    return losses, probs


_NUMPY_KERNELS = {
    "softmax_rows": softmax_rows_np,
    "softmax_rows_grad": softmax_rows_grad_np,
    "layernorm": layernorm_np,
    "layernorm_grad": layernorm_grad_np,
    "silu": silu_np,
    "silu_grad": silu_grad_np,
    "adamw_update": adamw_update_np,
    "add_rows_at": add_rows_at_np,
    "softmax_xent": softmax_xent_np,
}


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


def _build_numba_kernels():
    from numba import njit

    @njit(cache=True)
    def softmax_rows_nb(x):
        n, c = x.shape
        for i in range(n):
            m = x[i, 0]
            for j in range(1, c):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(c):
                v = np.exp(x[i, j] - m)
                x[i, j] = v
                s += v
            inv = 1.0 / s
            for j in range(c):
                x[i, j] = x[i, j] * inv
        return x

    @njit(cache=True)
    def softmax_rows_grad_nb(p, dp):
        n, c = p.shape
        out = np.empty_like(p)
        for i in range(n):
            inner = 0.0
            for j in range(c):
                inner += dp[i, j] * p[i, j]
            for j in range(c):
                out[i, j] = p[i, j] * (dp[i, j] - inner)
        return out

    @njit(cache=True)
    def layernorm_nb(x, g, b, eps):
        n, c = x.shape
        y = np.empty_like(x)
        mean = np.empty(n, dtype=x.dtype)
        rstd = np.empty(n, dtype=x.dtype)
        for i in range(n):
            s = 0.0
            for j in range(c):
                s += x[i, j]
            mu = s / c
            s2 = 0.0
            for j in range(c):
                d = x[i, j] - mu
                s2 += d * d
            r = 1.0 / np.sqrt(s2 / c + eps)
            mean[i] = mu
            rstd[i] = r
            for j in range(c):
                y[i, j] = (x[i, j] - mu) * r * g[j] + b[j]
        return y, mean, rstd

    @njit(cache=True)
    def layernorm_grad_nb(dy, x, mean, rstd, g):
        n, c = x.shape
        dx = np.empty_like(x)
        dg = np.zeros(c, dtype=x.dtype)
        db = np.zeros(c, dtype=x.dtype)
        for i in range(n):
            mu = mean[i]
            r = rstd[i]
            s1 = 0.0
            s2 = 0.0
            for j in range(c):
                xh = (x[i, j] - mu) * r
                dyg = dy[i, j] * g[j]
                s1 += dyg
                s2 += dyg * xh
                dg[j] += dy[i, j] * xh
                db[j] += dy[i, j]
            m1 = s1 / c
            m2 = s2 / c
            for j in range(c):
                xh = (x[i, j] - mu) * r
                dx[i, j] = (dy[i, j] * g[j] - m1 - xh * m2) * r
        return dx, dg, db

    @njit(cache=True)
    def silu_grad_nb(x, sig, dy):
        xf = x.ravel()
        sf = sig.ravel()
        df = dy.ravel()
        out = np.empty_like(xf)
        for i in range(xf.size):
            out[i] = df[i] * (sf[i] * (1.0 + xf[i] * (1.0 - sf[i])))
        return out.reshape(x.shape)

    @njit(cache=True)
    def adamw_update_nb(p, grad, m, v, step, lr, beta1, beta2, eps, wd):
        bc1 = 1.0 - beta1**step
        bc2 = 1.0 - beta2**step
        for i in range(p.size):
            gi = grad[i]
            mi = beta1 * m[i] + (1.0 - beta1) * gi
            vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] = p[i] - lr * ((mi / bc1) / (np.sqrt(vi / bc2) + eps) + wd * p[i])

    @njit(cache=True)
    def add_rows_at_nb(table, ids, rows):
        n, c = rows.shape
        for i in range(n):
            t = ids[i]
            for j in range(c):
                table[t, j] += rows[i, j]

    @njit(cache=True)
    def softmax_xent_nb(logits, targets):
        n, c = logits.shape
        losses = np.empty(n, dtype=logits.dtype)
        probs = np.empty_like(logits)
        for i in range(n):
            m = logits[i, 0]
            for j in range(1, c):
                if logits[i, j] > m:
                    m = logits[i, j]
            s = 0.0
            for j in range(c):
                v = np.exp(logits[i, j] - m)
                probs[i, j] = v
                s += v
            inv = 1.0 / s
            for j in range(c):
                probs[i, j] = probs[i, j] * inv
            losses[i] = np.log(s) - (logits[i, targets[i]] - m)
        return losses, probs

    kernels = dict(_NUMPY_KERNELS)
    kernels.update({
        # numpy's SIMD exp keeps softmax_rows/silu on the numpy path; the
        # scalar-exp jitted softmax stays available for the benchmark.
        "softmax_rows_scalar": softmax_rows_nb,
        "softmax_rows_grad": softmax_rows_grad_nb,
        "layernorm": layernorm_nb,
        "layernorm_grad": layernorm_grad_nb,
        "silu_grad": silu_grad_nb,
        "adamw_update": adamw_update_nb,
        "add_rows_at": add_rows_at_nb,
        "softmax_xent": softmax_xent_nb,
    })
    return kernels


def _select_backend():
    forced = os.environ.get("RESMAE_BACKEND", "").strip().lower()
    if forced not in ("", "numba", "numpy"):
        raise ValueError(
            f"RESMAE_BACKEND must be 'numba' or 'numpy', got {forced!r}"
        )
    if forced == "numpy":
        return "numpy", dict(_NUMPY_KERNELS)
    try:
        kernels = _build_numba_kernels()
    except ImportError:
        if forced == "numba":
            raise
        return "numpy", dict(_NUMPY_KERNELS)
    return "numba", kernels


ACTIVE_BACKEND, _KERNELS = _select_backend()

softmax_rows = _KERNELS["softmax_rows"]
softmax_rows_grad = _KERNELS["softmax_rows_grad"]
layernorm = _KERNELS["layernorm"]
layernorm_grad = _KERNELS["layernorm_grad"]
silu = _KERNELS["silu"]
silu_grad = _KERNELS["silu_grad"]
adamw_update = _KERNELS["adamw_update"]
add_rows_at = _KERNELS["add_rows_at"]
softmax_xent = _KERNELS["softmax_xent"]


def numpy_kernels():
    """The fallback kernel set, independent of the active backend."""
    return dict(_NUMPY_KERNELS)


def numba_kernels():
    """The jitted kernel set (imports numba; raises if unavailable)."""
    return _build_numba_kernels()
