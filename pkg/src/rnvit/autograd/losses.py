"""Scalar training losses built on the tensor ops."""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _make, as_tensor, l2_normalize, matmul, mean, mul, sub, transpose


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    d = sub(pred, target)
    return mean(mul(d, d))


def cross_entropy(logits, target) -> Tensor:
    """Mean softmax cross-entropy of ``(B, K)`` logits against integer classes.

    The fused backward is ``(softmax - onehot) / B``.
    """
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != target.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {target.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    rows = np.arange(len(target))
    loss = -logp[rows, target].mean()
    probs = e / s

    def bw(g):
        d = probs.copy()
        d[rows, target] -= 1.0
        return (g * d / len(target),)

    return _make(loss, (logits,), "cross_entropy", bw)


def bce_with_logits(logits, target) -> Tensor:
    """Mean binary cross-entropy on raw logits (stable log-sum-exp form)."""
    logits = as_tensor(logits)
    y = np.asarray(target, dtype=np.float64).reshape(logits.shape)
    x = logits.data
    loss = (np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))).mean()
    p = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(loss, (logits,), "bce", lambda g: (g * (p - y) / x.size,))


_SELF = -1e300


def nt_xent(embeddings, temperature: float = 0.5) -> Tensor:
    """NT-Xent over ``2B`` rows where rows ``2k`` and ``2k+1`` are positives.

    Cosine similarities, self-pairs excluded, averaged over all ``2B`` anchors.
    """
    z = as_tensor(embeddings)
    if z.ndim != 2 or z.shape[0] % 2 or z.shape[0] < 2:
        raise ShapeError(f"nt_xent: expected (2B, D) embeddings, got {z.shape}")
    zn = l2_normalize(z, axis=1)
    sim = mul(matmul(zn, transpose(zn)), 1.0 / temperature)
    n = z.shape[0]
    self_mask = np.where(np.eye(n, dtype=bool), _SELF, 0.0)
    return cross_entropy(sim + Tensor(self_mask), np.arange(n) ^ 1)
