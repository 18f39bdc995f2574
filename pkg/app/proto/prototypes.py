# app/proto/prototypes.py
"""
Prototype extraction and cosine-similarity classification.

Prototype sets are (N+1) x C float arrays with row 0 the background. Soft masks are
H x W x (N+1) probability maps, label masks H x W int arrays.
"""
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from app.numerics.kernels import softmax_cross_entropy_grad, softmax_rows

MIN_NORM = 1e-9


@dataclass(frozen=True)
class PoolResult:
    """Output of masked average pooling. Empty classes have zero rows and count 0."""
    protos: np.ndarray
    counts: np.ndarray

    @property
    def empty_classes(self) -> List[int]:
        return [int(c) for c in np.flatnonzero(self.counts == 0)]


def check_prototypes(protos: np.ndarray, name: str = "prototype set") -> np.ndarray:
    protos = np.asarray(protos, dtype=np.float64)
    if protos.ndim != 2 or protos.shape[0] < 2:
        raise ValueError(f"{name} must be (N+1) x C with N >= 1, got shape {protos.shape}")
    norms = np.linalg.norm(protos, axis=1)
    bad = np.flatnonzero(norms <= MIN_NORM)
    if bad.size:
        raise ValueError(f"{name} rows {bad.tolist()} have norm <= {MIN_NORM}; cosine is undefined")
    return protos


def masked_average_pool(feats: Sequence[np.ndarray], masks: Sequence[np.ndarray], n_classes: int) -> PoolResult:
    """
    Per-class mean of feature vectors, pooled jointly over every shot.

    Row c = (sum of feature vectors labelled c in any shot) / (number of such pixels).
    Classes with no pixels get a zero row and count 0; the caller picks a fallback.
    """
    if len(feats) != len(masks):
        raise ValueError(f"got {len(feats)} feature maps but {len(masks)} masks")
    if not feats:
        raise ValueError("masked_average_pool needs at least one shot")
    channels = feats[0].shape[-1]
    sums = np.zeros((n_classes, channels))
    counts = np.zeros(n_classes, dtype=np.int64)
    for feat, mask in zip(feats, masks):
        mask = np.asarray(mask)
        if feat.shape[:2] != mask.shape:
            raise ValueError(f"mask {mask.shape} not at feature resolution {feat.shape[:2]}")
        if feat.shape[-1] != channels:
            raise ValueError("all feature maps must share the channel count")
        labels = mask.reshape(-1).astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ValueError(f"mask labels must lie in [0, {n_classes - 1}]")
        # per-shot sums first: K identical shots then give exactly K times one shot
        shot_sums = np.zeros_like(sums)
        np.add.at(shot_sums, labels, feat.reshape(-1, channels))
        sums += shot_sums
        counts += np.bincount(labels, minlength=n_classes)
    protos = np.zeros_like(sums)
    nonempty = counts > 0
    protos[nonempty] = sums[nonempty] / counts[nonempty, None]
    return PoolResult(protos, counts)


def masked_average_pool_backward(
    masks: Sequence[np.ndarray],
    counts: np.ndarray,
    grad_protos: np.ndarray,
) -> List[np.ndarray]:
    """Gradient of <grad_protos, MAP(feats, masks)> with respect to each feature map."""
    safe = np.where(counts > 0, counts, 1).astype(np.float64)
    per_pixel = np.where((counts > 0)[:, None], grad_protos / safe[:, None], 0.0)
    return [per_pixel[np.asarray(mask, dtype=np.int64)] for mask in masks]


def _normalize_pixels(q: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit pixel vectors; pixels below MIN_NORM become zero vectors (cosine 0 to every class)."""
    norms = np.linalg.norm(q, axis=1)
    valid = norms >= MIN_NORM
    safe = np.where(valid, norms, 1.0)
    qn = np.where(valid[:, None], q / safe[:, None], 0.0)
    return qn, safe, valid


def cosine_score_map(Q: np.ndarray, P: np.ndarray, alpha: float) -> np.ndarray:
    """score[x, y, c] = alpha * cos(Q[x, y], P[c])."""
    Q = np.asarray(Q, dtype=np.float64)
    P = check_prototypes(P)
    if Q.ndim != 3 or Q.shape[-1] != P.shape[1]:
        raise ValueError(f"feature map {Q.shape} and prototypes {P.shape} disagree on channels")
    h, w, c = Q.shape
    qn, _, _ = _normalize_pixels(Q.reshape(-1, c))
    pn = P / np.linalg.norm(P, axis=1, keepdims=True)
    return (alpha * (qn @ pn.T)).reshape(h, w, P.shape[0])


def cosine_score_backward(
    Q: np.ndarray,
    P: np.ndarray,
    alpha: float,
    grad_scores: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of <grad_scores, cosine_score_map(Q, P, alpha)> with respect to Q and P."""
    Q = np.asarray(Q, dtype=np.float64)
    P = check_prototypes(P)
    h, w, c = Q.shape
    k = P.shape[0]
    if grad_scores.shape != (h, w, k):
        raise ValueError(f"grad_scores shape {grad_scores.shape} does not match score map {(h, w, k)}")
    qn, q_norm, valid = _normalize_pixels(Q.reshape(-1, c))
    p_norm = np.linalg.norm(P, axis=1)
    pn = P / p_norm[:, None]
    cos = qn @ pn.T
    g = alpha * grad_scores.reshape(-1, k)
    # d cos / dp = (qn - cos * pn) / |p|, d cos / dq = (pn - cos * qn) / |q|
    grad_P = (g.T @ qn - (g * cos).sum(axis=0)[:, None] * pn) / p_norm[:, None]
    grad_q = (g @ pn - (g * cos).sum(axis=1)[:, None] * qn) / q_norm[:, None]
    grad_q[~valid] = 0.0
    return grad_q.reshape(h, w, c), grad_P


def soft_predict(Q: np.ndarray, P: np.ndarray, alpha: float) -> np.ndarray:
    return softmax_rows(cosine_score_map(Q, P, alpha))


def hard_mask(soft: np.ndarray) -> np.ndarray:
    """Per-pixel argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(soft), axis=-1).astype(np.int64)


def soft_predict_backward(
    Q: np.ndarray,
    P: np.ndarray,
    alpha: float,
    target: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of cross_entropy(soft_predict(Q, P, alpha), target) with respect to Q and P."""
    soft = soft_predict(Q, P, alpha)
    return cosine_score_backward(Q, P, alpha, softmax_cross_entropy_grad(soft, target))

