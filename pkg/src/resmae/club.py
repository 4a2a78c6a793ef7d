"""Contrastive log-ratio upper bound on mutual information.

A small two-layer network maps a pooled residual vector to the mean and
per-dimension log-variance of a diagonal Gaussian over the pooled noise
vector.  The sample estimator is the positive-pair likelihood minus the
all-pairs likelihood:

    (1/B) sum_i log q(y_i | x_i)  -  (1/B^2) sum_i sum_j log q(y_j | x_i)

The conditional model is trained by maximum likelihood on the positive
pairs, alternating one step per main-model step.  Log-variances are
clamped to [-10, 10] for numerical stability.
"""

from __future__ import annotations

import math

import numpy as np

from . import backends as K

LOG2PI = math.log(2.0 * math.pi)
LV_MIN = -10.0
LV_MAX = 10.0

CLUB_PARAM_NAMES = ("club.w1", "club.b1", "club.w_mu", "club.b_mu",
                    "club.w_lv", "club.b_lv")


def init_club_params(dim: int, hidden: int, rng: np.random.Generator,
                     dtype=np.float64, scale: float = 0.02) -> dict[str, np.ndarray]:
    """Standalone conditional-model parameters (same names as the model dict)."""
    dt = np.dtype(dtype)
    return {
        "club.w1": (rng.standard_normal((dim, hidden)) * scale).astype(dt),
        "club.b1": np.zeros(hidden, dtype=dt),
        "club.w_mu": (rng.standard_normal((hidden, dim)) * scale).astype(dt),
        "club.b_mu": np.zeros(dim, dtype=dt),
        "club.w_lv": (rng.standard_normal((hidden, dim)) * scale).astype(dt),
        "club.b_lv": np.zeros(dim, dtype=dt),
    }


def pool_tokens(tokens: np.ndarray) -> np.ndarray:
    """Mean over the token axis of an (N, d) set."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ValueError(f"expected a nonempty (N, d) token set, got shape {tokens.shape}")
    return tokens.mean(axis=0)


def cond_forward(params, x):
    """Conditional Gaussian head: x -> (mu, logvar, cache)."""
    h_pre = x @ params["club.w1"] + params["club.b1"]
    h = np.tanh(h_pre)
    mu = h @ params["club.w_mu"] + params["club.b_mu"]
    lv_raw = h @ params["club.w_lv"] + params["club.b_lv"]
    lv = np.clip(lv_raw, LV_MIN, LV_MAX)
    return mu, lv, (x, h, lv_raw)


def _cond_backward(params, cache, dmu, dlv, grads):
    """Backprop (dmu, dlv) through the conditional head; returns dx."""
    x, h, lv_raw = cache
    clamp = ((lv_raw > LV_MIN) & (lv_raw < LV_MAX)).astype(dlv.dtype)
    dlv = dlv * clamp
    grads["club.w_mu"] += h.T @ dmu
    grads["club.b_mu"] += dmu.sum(axis=0)
    grads["club.w_lv"] += h.T @ dlv
    grads["club.b_lv"] += dlv.sum(axis=0)
    dh = dmu @ params["club.w_mu"].T + dlv @ params["club.w_lv"].T
    dh_pre = dh * (1.0 - h * h)
    grads["club.w1"] += x.T @ dh_pre
    grads["club.b1"] += dh_pre.sum(axis=0)
    return dh_pre @ params["club.w1"].T


def _ll_pair_matrix(mu, lv, y):
    """ll[i, j] = log q(y_j | x_i) for diagonal Gaussians."""
    inv_var = np.exp(-lv)
    diff = y[None, :, :] - mu[:, None, :]
    quad = (diff * diff * inv_var[:, None, :]).sum(axis=2)
    return -0.5 * (quad + lv.sum(axis=1)[:, None] + lv.shape[1] * LOG2PI)


def club_estimate(params, x, y, chunk: int = 512) -> float:
    """The CLUB sample estimator on a paired batch (value only, chunked)."""
    x = np.asarray(x)
    y = np.asarray(y)
    b = x.shape[0]
    if b < 2 or y.shape[0] != b:
        raise ValueError(f"need a paired batch with B >= 2, got {x.shape} / {y.shape}")
    mu, lv, _ = cond_forward(params, x)
    pos = 0.0
    neg = 0.0
    for lo in range(0, b, chunk):
        hi = min(lo + chunk, b)
        ll = _ll_pair_matrix(mu[lo:hi], lv[lo:hi], y)
        pos += float(np.trace(ll, offset=lo))
        neg += float(ll.sum(dtype=np.float64))
    return pos / b - neg / (b * b)


def club_penalty_with_grads(params, x, y):
    """Estimate plus gradients w.r.t. x, y, and the conditional parameters.

    Intended for the small per-batch penalty (B = batch size), where the
    full pair matrix fits in memory comfortably.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    b, dim = x.shape
    if b < 2 or y.shape[0] != b:
        raise ValueError(f"need a paired batch with B >= 2, got {x.shape} / {y.shape}")
    mu, lv, cache = cond_forward(params, x)
    ll = _ll_pair_matrix(mu, lv, y)
    value = float(np.trace(ll)) / b - float(ll.sum(dtype=np.float64)) / (b * b)

    # weight of ll[i, j] in the estimate
    w = np.full((b, b), -1.0 / (b * b), dtype=x.dtype)
    w[np.diag_indices(b)] += 1.0 / b
    inv_var = np.exp(-lv)
    diff = y[None, :, :] - mu[:, None, :]          # (i, j, d)
    # d value / d mu_i = sum_j w_ij * diff_ij * inv_var_i
    dmu = (w[:, :, None] * diff).sum(axis=1) * inv_var
    # d value / d lv_i = sum_j w_ij * 0.5 * (diff_ij^2 * inv_var_i - 1)
    dlv = 0.5 * ((w[:, :, None] * diff * diff).sum(axis=1) * inv_var
                 - w.sum(axis=1)[:, None])
    # d value / d y_j = sum_i w_ij * (-(diff_ij) * inv_var_i)
    dy = -(w[:, :, None] * diff * inv_var[:, None, :]).sum(axis=0)
    grads = {name: np.zeros_like(params[name]) for name in CLUB_PARAM_NAMES}
    dx = _cond_backward(params, cache, dmu, dlv, grads)
    return value, dx, dy, grads


def conditional_nll(params, x, y) -> float:
    """Mean negative log-likelihood of the positive pairs."""
    mu, lv, _ = cond_forward(params, x)
    inv_var = np.exp(-lv)
    diff = y - mu
    ll = -0.5 * ((diff * diff * inv_var).sum(axis=1) + lv.sum(axis=1) + lv.shape[1] * LOG2PI)
    return -float(ll.mean(dtype=np.float64))


def conditional_nll_grads(params, x, y):
    """NLL and its gradients w.r.t. the conditional parameters only."""
    x = np.asarray(x)
    y = np.asarray(y)
    b = x.shape[0]
    mu, lv, cache = cond_forward(params, x)
    inv_var = np.exp(-lv)
    diff = y - mu
    ll = -0.5 * ((diff * diff * inv_var).sum(axis=1) + lv.sum(axis=1) + lv.shape[1] * LOG2PI)
    nll = -float(ll.mean(dtype=np.float64))
    dmu = -diff * inv_var / b
    dlv = 0.5 * (1.0 - diff * diff * inv_var) / b
    grads = {name: np.zeros_like(params[name]) for name in CLUB_PARAM_NAMES}
    _cond_backward(params, cache, dmu.astype(mu.dtype), dlv.astype(lv.dtype), grads)
    return nll, grads


def fit_conditional_step(params, x, y, opt) -> float:
    """One maximum-likelihood step on the conditional model.

    Returns the NLL evaluated before the step.
    """
    nll, grads = conditional_nll_grads(params, x, y)
    opt.step(params, grads)
    return nll


def fit_conditional(params, x, y, steps: int, batch_size: int, lr: float,
                    rng: np.random.Generator):
    """Minibatch maximum-likelihood fitting loop; returns the NLL trace."""
    from .train import AdamW

    opt = AdamW(params, lr=lr, weight_decay=0.0, names=CLUB_PARAM_NAMES)
    n = x.shape[0]
    trace = []
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        trace.append(fit_conditional_step(params, x[idx], y[idx], opt))
    return trace
