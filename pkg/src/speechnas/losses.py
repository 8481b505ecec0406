"""Training losses: plain softmax cross entropy and AAM softmax + MHE."""

from __future__ import annotations

import numpy as np

from . import tensorcore as tc

S_SCALE = 30.0
MARGIN = 0.2
MHE_LAMBDA = 0.01
NORM_EPS = 1e-8
DIST_FLOOR = 1e-12


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return labels


def cross_entropy(logits: tc.Tensor, labels) -> tc.Tensor:
    """Mean negative log-softmax of the true class (log-sum-exp stabilised)."""
    labels = _check_labels(labels, logits.shape[-1])
    return -tc.mean(tc.pick(tc.log_softmax(logits, axis=-1), labels))


def cosine_logits(g: tc.Tensor, W: tc.Tensor) -> tc.Tensor:
    """Cosines between rows of ``g`` (N x D) and columns of ``W`` (D x C)."""
    return tc.l2_normalize(g, axis=1, eps=NORM_EPS) @ tc.l2_normalize(W, axis=0, eps=NORM_EPS)


def mhe_energy(W: tc.Tensor, labels, lam: float = MHE_LAMBDA) -> tc.Tensor:
    """``lam / (N (C-1)) * sum_i sum_{j != y_i} 1 / ||w~_{y_i} - w~_j||^2``.

    The double sum runs over samples, so a speaker that appears k times in
    the batch contributes its pair terms k times.
    """
    C = W.shape[1]
    labels = _check_labels(labels, C)
    N = labels.size
    Wn = tc.l2_normalize(W, axis=0, eps=NORM_EPS)
    sq = tc.sum(Wn * Wn, axis=0, keepdims=True)          # (1, C)
    gram = tc.transpose(Wn) @ Wn                          # (C, C)
    d2 = tc.transpose(sq) + sq - 2.0 * gram
    counts = np.bincount(labels, minlength=C).astype(W.data.dtype)
    weight = counts[:, None] * (1.0 - np.eye(C, dtype=W.data.dtype))
    inv = 1.0 / tc.clamp_min(d2, DIST_FLOOR)
    return tc.sum(inv * weight) * (lam / (N * (C - 1)))


def aam_mhe(g: tc.Tensor, W: tc.Tensor, labels, s_scale: float = S_SCALE, m: float = MARGIN,
            lam: float = MHE_LAMBDA) -> tc.Tensor:
    """Additive angular margin softmax on cosines plus the MHE regulariser.

    The target logit is ``s * cos(theta + m)`` expanded as
    ``cos(theta) cos(m) - sin(theta) sin(m)`` with cosines clamped to [-1, 1].
    """
    if s_scale <= 0:
        raise ValueError("s_scale must be positive")
    if not 0 <= m < np.pi / 2:
        raise ValueError("margin must lie in [0, pi/2)")
    C = W.shape[1]
    if C < 2:
        raise ValueError("need at least two classes")
    labels = _check_labels(labels, C)
    cos = tc.clip(cosine_logits(g, W), -1.0, 1.0)
    cos_y = tc.pick(cos, labels)
    sin_y = tc.sqrt(tc.relu(1.0 - cos_y * cos_y))
    target = cos_y * float(np.cos(m)) - sin_y * float(np.sin(m))
    onehot = np.zeros(cos.shape, dtype=cos.data.dtype)
    onehot[np.arange(labels.size), labels] = 1.0
    delta = tc.reshape(target - cos_y, (labels.size, 1))
    logits = (cos + delta * onehot) * s_scale
    loss = cross_entropy(logits, labels)
    if lam:
        loss = loss + mhe_energy(W, labels, lam)
    if not np.isfinite(loss.data):
        raise tc.NonFiniteError("aam_mhe produced a non-finite loss")
    return loss


def cross_entropy_array(logits: np.ndarray, labels) -> float:
    g = tc.Graph(np.float64)
    return float(cross_entropy(g.const(logits), labels).data)


def aam_mhe_array(g: np.ndarray, W: np.ndarray, labels, **kwargs) -> float:
    graph = tc.Graph(np.float64)
    return float(aam_mhe(graph.const(g), graph.const(W), labels, **kwargs).data)
