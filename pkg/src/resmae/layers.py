"""Transformer building blocks with explicit forward/backward passes.

Everything operates on one sample at a time as 2-D (length, width)
arrays.  Matrix products go through BLAS; the row-wise pieces (softmax,
layer norm, gelu) go through :mod:`resmae.backends`.  Each forward
returns a cache tuple that its backward consumes; backwards accumulate
parameter gradients into a flat name->array dict.
"""

from __future__ import annotations

import math

import numpy as np

from . import backends as K

LN_EPS = 1e-5


def linear_fwd(x, w, b):
    return x @ w + b


def linear_bwd(dy, x, w):
    """Returns (dx, dw, db)."""
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def attention_fwd(x, w_qkv, b_qkv, w_out, b_out, heads):
    """Multi-head self-attention over a (L, d) sequence."""
    length, d = x.shape
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    qkv = x @ w_qkv + b_qkv
    q = np.ascontiguousarray(qkv[:, :d].reshape(length, heads, dh).transpose(1, 0, 2))
    k = np.ascontiguousarray(qkv[:, d:2 * d].reshape(length, heads, dh).transpose(1, 0, 2))
    v = np.ascontiguousarray(qkv[:, 2 * d:].reshape(length, heads, dh).transpose(1, 0, 2))
    probs = np.empty((heads, length, length), dtype=x.dtype)
    ctx = np.empty((heads, length, dh), dtype=x.dtype)
    for h in range(heads):
        scores = (q[h] @ k[h].T) * scale
        probs[h] = K.softmax_rows(scores)
        ctx[h] = probs[h] @ v[h]
    merged = np.ascontiguousarray(ctx.transpose(1, 0, 2)).reshape(length, d)
    out = merged @ w_out + b_out
    return out, (x, q, k, v, probs, merged)


def attention_bwd(dout, cache, w_qkv, w_out, heads):
    """Returns (dx, dw_qkv, db_qkv, dw_out, db_out)."""
    x, q, k, v, probs, merged = cache
    length, d = x.shape
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    dw_out = merged.T @ dout
    db_out = dout.sum(axis=0)
    dmerged = dout @ w_out.T
    dctx = np.ascontiguousarray(dmerged.reshape(length, heads, dh).transpose(1, 0, 2))
    dqkv = np.empty((length, 3 * d), dtype=x.dtype)
    dq = dqkv[:, :d].reshape(length, heads, dh)
    dk = dqkv[:, d:2 * d].reshape(length, heads, dh)
    dv = dqkv[:, 2 * d:].reshape(length, heads, dh)
    for h in range(heads):
        dp = dctx[h] @ v[h].T
        dv[:, h, :] = probs[h].T @ dctx[h]
        ds = K.softmax_rows_grad(probs[h], dp)
        dq[:, h, :] = (ds @ k[h]) * scale
        dk[:, h, :] = (ds.T @ q[h]) * scale
    dx = dqkv @ w_qkv.T
    dw_qkv = x.T @ dqkv
    db_qkv = dqkv.sum(axis=0)
    return dx, dw_qkv, db_qkv, dw_out, db_out


def block_fwd(x, params, prefix, heads):
    """Pre-norm transformer block: x + attn(ln(x)), then x + ff(ln(x))."""
    p = params
    h1, mu1, rs1 = K.layernorm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"], LN_EPS)
    attn, attn_cache = attention_fwd(h1, p[f"{prefix}.attn.w_qkv"], p[f"{prefix}.attn.b_qkv"],
                                     p[f"{prefix}.attn.w_out"], p[f"{prefix}.attn.b_out"], heads)
    x1 = x + attn
    h2, mu2, rs2 = K.layernorm(x1, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"], LN_EPS)
    f_pre = h2 @ p[f"{prefix}.ff.w1"] + p[f"{prefix}.ff.b1"]
    f_act = K.gelu(f_pre)
    ff = f_act @ p[f"{prefix}.ff.w2"] + p[f"{prefix}.ff.b2"]
    out = x1 + ff
    return out, (x, mu1, rs1, attn_cache, x1, h2, mu2, rs2, f_pre, f_act)


def block_bwd(dout, cache, params, prefix, heads, grads):
    p = params
    x, mu1, rs1, attn_cache, x1, h2, mu2, rs2, f_pre, f_act = cache
    # feed-forward branch
    dff = dout
    dw2 = f_act.T @ dff
    df_act = dff @ p[f"{prefix}.ff.w2"].T
    df_pre = K.gelu_grad(f_pre, df_act)
    dw1 = h2.T @ df_pre
    dh2 = df_pre @ p[f"{prefix}.ff.w1"].T
    dx1, dg2, db2 = K.layernorm_grad(dh2, x1, mu2, rs2, p[f"{prefix}.ln2.g"])
    dx1 = dx1 + dout
    grads[f"{prefix}.ff.w2"] += dw2
    grads[f"{prefix}.ff.b2"] += dff.sum(axis=0)
    grads[f"{prefix}.ff.w1"] += dw1
    grads[f"{prefix}.ff.b1"] += df_pre.sum(axis=0)
    grads[f"{prefix}.ln2.g"] += dg2
    grads[f"{prefix}.ln2.b"] += db2
    # attention branch
    dh1, dw_qkv, db_qkv, dw_out, db_out = attention_bwd(
        dx1, attn_cache, p[f"{prefix}.attn.w_qkv"], p[f"{prefix}.attn.w_out"], heads)
    dx, dg1, db1 = K.layernorm_grad(dh1, x, mu1, rs1, p[f"{prefix}.ln1.g"])
    dx = dx + dx1
    grads[f"{prefix}.attn.w_qkv"] += dw_qkv
    grads[f"{prefix}.attn.b_qkv"] += db_qkv
    grads[f"{prefix}.attn.w_out"] += dw_out
    grads[f"{prefix}.attn.b_out"] += db_out
    grads[f"{prefix}.ln1.g"] += dg1
    grads[f"{prefix}.ln1.b"] += db1
    return dx


def stack_fwd(x, params, stack, n_layers, heads):
    """Run ``n_layers`` blocks named f"{stack}.{i}"; identity when n_layers=0."""
    caches = []
    for i in range(n_layers):
        x, cache = block_fwd(x, params, f"{stack}.{i}", heads)
        caches.append(cache)
    return x, caches


def stack_bwd(dout, caches, params, stack, heads, grads):
    for i in reversed(range(len(caches))):
        dout = block_bwd(dout, caches[i], params, f"{stack}.{i}", heads, grads)
    return dout
