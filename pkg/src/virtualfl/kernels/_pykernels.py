"""NumPy reference implementation of the fused kernels.

Every function here has a twin in ``_ckernels.pyx`` with an identical
signature. Inputs are float64 arrays; the dispatcher in ``__init__`` takes
care of dtype and contiguity.
"""

from __future__ import annotations

import numpy as np


def softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) without overflow for large |x|
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def reparam_forward(mu: np.ndarray, rho: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Return ``mu + softplus(rho) * eps`` for ``eps`` of shape (S, n)."""
    return mu + softplus(rho) * eps


def reparam_backward(
    rho: np.ndarray, eps: np.ndarray, grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    gmu = grad.sum(axis=0)
    grho = (grad * eps).sum(axis=0) * sigmoid(rho)
    return gmu, grho


def gauss_kl(
    mu: np.ndarray, rho: np.ndarray, target_mean: np.ndarray, target_var: np.ndarray
) -> float:
    """KL(N(mu, softplus(rho)^2) || N(target_mean, target_var)), summed."""
    sigma = softplus(rho)
    var = sigma * sigma
    diff = mu - target_mean
    terms = 0.5 * np.log(target_var) - np.log(sigma) + (var + diff * diff) / (2.0 * target_var) - 0.5
    return float(terms.sum())


def gauss_kl_grad(
    mu: np.ndarray, rho: np.ndarray, target_mean: np.ndarray, target_var: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    sigma = softplus(rho)
    gmu = (mu - target_mean) / target_var
    gsigma = sigma / target_var - 1.0 / sigma
    return gmu, gsigma * sigmoid(rho)


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross entropy and softmax probabilities for 2-D logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    total = expz.sum(axis=1, keepdims=True)
    probs = expz / total
    rows = np.arange(logits.shape[0])
    loss = np.log(total[:, 0]) - shifted[rows, labels]
    return loss, probs
