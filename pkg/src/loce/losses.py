"""Softmax cross-entropy and the score-guided equilibrium loss, with analytic gradients.

The equilibrium loss adds a pairwise margin ``log(s[y'] / s[y])`` to every
negative logit. Because the margin splits into a per-class offset, the loss is
cross-entropy evaluated on logits shifted by ``log s``; both the value and the
gradient are computed through that identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scores import MeanScoreVector


@dataclass
class LossResult:
    loss: float
    gradient: np.ndarray


def _as_logits(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    return z


def _check_labels(y: np.ndarray, num_outputs: int) -> None:
    if y.size and (y.min() < 0 or y.max() >= num_outputs):
        raise ValueError(f"labels must lie in [0, {num_outputs - 1}]")


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _ce_rows(z: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row loss ``log(1 + sum_{j != y} exp(z_j - z_y))`` and gradient."""
    rows = np.arange(z.shape[0])
    diff = z - z[rows, y][:, None]
    diff[rows, y] = -np.inf
    top = diff.max(axis=1)
    # log1p keeps precision when the loss is tiny; the top-shift handles overflow
    top_pos = np.maximum(top, 0.0)
    rest = np.exp(diff - top_pos[:, None]).sum(axis=1)
    loss = np.where(top > 0, top_pos + np.log(np.exp(-top_pos) + rest), np.log1p(rest))
    grad = softmax(z)
    grad[rows, y] -= 1.0
    return loss, grad


def _reduce(loss: np.ndarray, grad: np.ndarray, reduction: str) -> tuple[float, np.ndarray]:
    if reduction == "mean":
        n = max(loss.shape[0], 1)
        return float(loss.sum() / n), grad / n
    if reduction == "sum":
        return float(loss.sum()), grad
    raise ValueError(f"unknown reduction {reduction!r}")


def softmax_ce(z, y: int) -> LossResult:
    """Cross-entropy of a single logit vector against class ``y``."""
    z = _as_logits(z)
    _check_labels(np.array([y]), z.shape[-1])
    loss, grad = _ce_rows(z.reshape(1, -1).copy(), np.array([int(y)]))
    return LossResult(float(loss[0]), grad[0])


def softmax_ce_batch(z, y, reduction: str = "mean") -> LossResult:
    z = _as_logits(z)
    y = np.asarray(y, dtype=np.int64)
    _check_labels(y, z.shape[1])
    loss, grad = _ce_rows(z.copy(), y)
    total, grad = _reduce(loss, grad, reduction)
    return LossResult(total, grad)


def _log_offsets(s) -> np.ndarray:
    """Log-scores shifted so their maximum is exactly zero.

    Margins depend only on score ratios; anchoring at the max makes a uniform
    score vector contribute an exact zero offset.
    """
    logs = s.log_values() if isinstance(s, MeanScoreVector) else np.log(np.asarray(s, dtype=np.float64))
    if not np.all(np.isfinite(logs)):
        raise ValueError("scores must be strictly positive")
    return logs - logs.max()


def margin(s: MeanScoreVector, y: int, y_prime: int) -> float:
    """Additive margin applied to negative class ``y_prime`` when the target is ``y``."""
    return float(np.log(s[y_prime]) - np.log(s[y]))


def margin_matrix(s: MeanScoreVector) -> np.ndarray:
    """``M[y, y'] = margin(s, y, y')`` for every class pair."""
    logs = s.log_values()
    return logs[None, :] - logs[:, None]


def equilibrium_loss(z, y: int, s: MeanScoreVector) -> LossResult:
    z = _as_logits(z)
    offsets = _log_offsets(s)
    if offsets.shape[0] != z.shape[-1]:
        raise ValueError(f"logit length {z.shape[-1]} does not match tracker length {offsets.shape[0]}")
    _check_labels(np.array([y]), z.shape[-1])
    loss, grad = _ce_rows((z + offsets).reshape(1, -1), np.array([int(y)]))
    return LossResult(float(loss[0]), grad[0])


def equilibrium_loss_batch(z, y, s, reduction: str = "mean") -> LossResult:
    """Batched equilibrium loss. ``s`` is a tracker or a raw length-(C+1) score vector."""
    z = _as_logits(z)
    y = np.asarray(y, dtype=np.int64)
    offsets = _log_offsets(s)
    if offsets.shape[0] != z.shape[1]:
        raise ValueError(f"logit length {z.shape[1]} does not match tracker length {offsets.shape[0]}")
    _check_labels(y, z.shape[1])
    loss, grad = _ce_rows(z + offsets[None, :], y)
    total, grad = _reduce(loss, grad, reduction)
    return LossResult(total, grad)


def smooth_l1(pred, target, beta: float = 1.0, reduction: str = "mean") -> LossResult:
    """Smooth-L1 box regression loss summed over the 4 coordinates of each row."""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    a = np.abs(diff)
    quad = a < beta
    per = np.where(quad, 0.5 * diff**2 / beta, a - 0.5 * beta).sum(axis=1)
    grad = np.where(quad, diff / beta, np.sign(diff))
    total, grad = _reduce(per, grad, reduction)
    return LossResult(total, grad)
