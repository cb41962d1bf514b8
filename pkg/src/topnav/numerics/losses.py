"""Losses used across the package. All return scalar Tensors."""

from __future__ import annotations

import numpy as np

from .tensor import (
    Tensor, ShapeError, _make, _accum, as_tensor, index, log, log_softmax,
    logsumexp, mul, softplus, sub, tsum,
)


def cross_entropy(logits: Tensor, target_class: int) -> Tensor:
    """-log softmax(logits)[target]."""
    logits = as_tensor(logits)
    if logits.ndim != 1:
        raise ShapeError("cross_entropy (logits must be 1-D)", logits.shape)
    if not 0 <= target_class < logits.shape[0]:
        raise IndexError(f"target class {target_class} out of range for {logits.shape[0]} logits")
    return -index(log_softmax(logits), int(target_class))


def focal_loss(probs: Tensor, target_class: int, gamma: float) -> Tensor:
    """-(1 - p_t)^gamma * log p_t over a probability vector."""
    probs = as_tensor(probs)
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if probs.ndim != 1:
        raise ShapeError("focal_loss (probs must be 1-D)", probs.shape)
    if not 0 <= target_class < probs.shape[0]:
        raise IndexError(f"target class {target_class} out of range for {probs.shape[0]} classes")
    if abs(probs.data.sum() - 1.0) > 1e-6 or np.any(probs.data < 0):
        raise ValueError("focal_loss expects a normalized distribution")
    p = float(probs.data[target_class])
    q = 1.0 - p
    logp = np.log(p)
    out = np.asarray(-(q ** gamma) * logp if q > 0 else 0.0)

    def bw(g):
        # d/dp [-(1-p)^γ log p] = γ(1-p)^(γ-1) log p - (1-p)^γ / p ; first term -> 0 as p -> 1
        d = -(q ** gamma) / p
        if q > 0 and gamma > 0:
            d += gamma * q ** (gamma - 1.0) * logp
        full = np.zeros_like(probs.data)
        full[target_class] = d
        _accum(probs, g * full)

    return _make(out, (probs,), bw, "focal_loss")


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Summed binary cross-entropy of sigmoid(logits) against 0/1 labels."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError("bce_with_logits", logits.shape, y.shape)
    # -[y log σ(x) + (1-y) log σ(-x)] = y softplus(-x) + (1-y) softplus(x)
    return tsum(mul(softplus(-logits), y) + mul(softplus(logits), 1.0 - y))


def _check_simplex(alpha: np.ndarray) -> None:
    if alpha.ndim != 1 or np.any(alpha < -1e-12) or abs(alpha.sum() - 1.0) > 1e-6:
        raise ValueError("alpha must lie on the probability simplex")


def mixture_bernoulli_nll(alpha: Tensor, theta: Tensor, labels) -> Tensor:
    """-log sum_k alpha_k prod_e Bernoulli(labels_e; theta_ke), in log space."""
    alpha, theta = as_tensor(alpha), as_tensor(theta)
    _check_simplex(alpha.data)
    y = np.asarray(labels, dtype=np.float64)
    if theta.ndim != 2 or theta.shape[0] != alpha.shape[0] or theta.shape[1] != y.shape[-1]:
        raise ShapeError("mixture_bernoulli_nll", alpha.shape, theta.shape)
    ll = tsum(mul(log(theta), y) + mul(log(sub(1.0, theta)), 1.0 - y), axis=1)
    return -logsumexp(log(alpha) + ll)


def mixture_bernoulli_nll_logits(log_alpha: Tensor, theta_logits: Tensor, labels) -> Tensor:
    """Same likelihood, parameterized by log-mixture weights and edge logits."""
    theta_logits = as_tensor(theta_logits)
    y = np.asarray(labels, dtype=np.float64)
    if theta_logits.ndim != 2 or theta_logits.shape[1] != y.shape[-1]:
        raise ShapeError("mixture_bernoulli_nll_logits", theta_logits.shape, y.shape)
    ll = -tsum(mul(softplus(-theta_logits), y) + mul(softplus(theta_logits), 1.0 - y), axis=1)
    return -logsumexp(log_alpha + ll)
