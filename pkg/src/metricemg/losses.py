"""Training objectives: semi-hard triplet loss, cross-entropy, center loss, evidential loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class Triplets:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    semihard: np.ndarray  # False marks a fallback triple

    def __len__(self) -> int:
        return len(self.anchor)

    def as_set(self, semihard_only: bool = False) -> set[tuple[int, int, int]]:
        keep = self.semihard if semihard_only else np.ones(len(self), dtype=bool)
        return set(zip(self.anchor[keep].tolist(), self.positive[keep].tolist(), self.negative[keep].tolist()))


_EMPTY = np.zeros(0, dtype=np.int64)


def mine_semihard(dists, labels, alpha: float) -> Triplets:
    """Online semi-hard triplet mining on a B x B squared-distance matrix.

    Every (anchor, positive, negative) with ``d_ap < d_an < d_ap + alpha`` is
    returned. An anchor-positive pair with no such negative instead gets one
    fallback triple: the closest negative with ``d_an > d_ap``, or failing
    that the farthest negative. Ties go to the lowest index. Triples are
    sorted by (anchor, positive, negative).
    """
    d = np.asarray(dists.data if isinstance(dists, Tensor) else dists, dtype=np.float64)
    y = np.asarray(labels)
    same = y[:, None] == y[None, :]
    a_idx, p_idx = np.nonzero(same & ~np.eye(len(y), dtype=bool))
    negatives = ~same
    if a_idx.size == 0 or not negatives.any():
        return Triplets(_EMPTY, _EMPTY, _EMPTY, np.zeros(0, dtype=bool))

    dap = d[a_idx, p_idx][:, None]
    dan = d[a_idx]
    neg = negatives[a_idx]
    semi = neg & (dan > dap) & (dan < dap + alpha)
    rows, n_semi = np.nonzero(semi)
    anchors = [a_idx[rows]]
    positives = [p_idx[rows]]
    negs = [n_semi]
    flags = [np.ones(rows.size, dtype=bool)]

    lacking = np.nonzero(~semi.any(axis=1) & neg.any(axis=1))[0]
    if lacking.size:
        far = neg[lacking] & (dan[lacking] > dap[lacking])
        harder = np.where(far, dan[lacking], np.inf).argmin(axis=1)
        easiest = np.where(neg[lacking], dan[lacking], -np.inf).argmax(axis=1)
        choice = np.where(far.any(axis=1), harder, easiest)
        anchors.append(a_idx[lacking])
        positives.append(p_idx[lacking])
        negs.append(choice)
        flags.append(np.zeros(lacking.size, dtype=bool))

    a, p, n, f = (np.concatenate(x) for x in (anchors, positives, negs, flags))
    order = np.lexsort((n, p, a))
    return Triplets(a[order], p[order], n[order], f[order])


def triplet_loss(dists: Tensor, triples: Triplets, alpha: float) -> Tensor | None:
    """Mean hinge ``max(d_ap - d_an + alpha, 0)``; ``None`` when nothing was mined."""
    if len(triples) == 0:
        return None
    dap = dists[triples.anchor, triples.positive]
    dan = dists[triples.anchor, triples.negative]
    return T.relu(dap - dan + alpha).mean()


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels)
    logp = T.log_softmax(logits)
    return -(logp[np.arange(len(labels)), labels].mean())


def center_loss(features: Tensor, labels, centers: np.ndarray) -> Tensor:
    """``(1 / 2B) * sum_i ||f_i - c_{y_i}||^2``; centers are treated as constants."""
    labels = np.asarray(labels)
    diff = features - centers[labels]
    return (diff * diff).sum() * (0.5 / len(labels))


def update_centers(centers: np.ndarray, features: np.ndarray, labels, center_lr: float) -> np.ndarray:
    """Move each batch-present class center toward the mean of its features."""
    labels = np.asarray(labels)
    out = centers.copy()
    for j in np.unique(labels):
        out[j] += center_lr * (features[labels == j] - centers[j]).mean(axis=0)
    return out


def joint_center_loss(logits: Tensor, features: Tensor, labels, centers: np.ndarray, tau: float) -> Tensor:
    ce = cross_entropy_loss(logits, labels)
    if tau == 0.0:
        return ce
    return ce + tau * center_loss(features, labels, centers)


def _dirichlet_kl_to_uniform(alpha: Tensor) -> Tensor:
    """Row-wise KL(Dir(alpha) || Dir(1, ..., 1))."""
    k = alpha.shape[1]
    s = alpha.sum(axis=1)
    lg = T.lgamma(s) - math.lgamma(k) - T.tsum(T.lgamma(alpha), axis=1)
    dig = T.digamma(alpha) - T.reshape(T.digamma(s), (-1, 1))
    return lg + T.tsum((alpha - 1.0) * dig, axis=1)


def ecnn_loss(evidence: Tensor, labels, lambda_kl: float = 0.1) -> Tensor:
    """Sum-of-squares Bayes risk under Dir(evidence + 1) plus a KL regularizer.

    The KL term pulls the Dirichlet of misleading evidence (true-class
    evidence removed) toward the uniform Dirichlet.
    """
    if np.any(evidence.data < 0):
        raise ValueError("evidence must be nonnegative")
    labels = np.asarray(labels)
    b, k = evidence.shape
    y = np.zeros((b, k))
    y[np.arange(b), labels] = 1.0
    alpha = evidence + 1.0
    s = T.reshape(alpha.sum(axis=1), (-1, 1))
    p = alpha / s
    err = ((y - p) * (y - p)).sum(axis=1)
    var = (p * (1.0 - p) / (s + 1.0)).sum(axis=1)
    loss = err + var
    if lambda_kl:
        alpha_tilde = y + (1.0 - y) * alpha
        loss = loss + lambda_kl * _dirichlet_kl_to_uniform(alpha_tilde)
    return loss.mean()


def ecnn_uncertainty(evidence) -> dict[str, float]:
    """Vacuity, dissonance, entropy, negative max probability and confidence for one row."""
    e = np.asarray(evidence, dtype=np.float64)
    if np.any(e < 0):
        raise ValueError("evidence must be nonnegative")
    k = e.size
    alpha = e + 1.0
    s = alpha.sum()
    p = alpha / s
    belief = e / s
    dissonance = 0.0
    for i in range(k):
        others = np.delete(belief, i)
        total = others.sum()
        if total <= 0 or belief[i] <= 0:
            continue
        pair_sum = others + belief[i]
        bal = np.where(pair_sum > 0, 1.0 - np.abs(others - belief[i]) / np.where(pair_sum > 0, pair_sum, 1.0), 0.0)
        dissonance += belief[i] * float((others * bal).sum() / total)
    return {
        "vacuity": float(k / s),
        "dissonance": dissonance,
        "entropy": float(-(p * np.log(p)).sum()),
        "neg_max_prob": float(-p.max()),
        "confidence": float(p.max()),
    }
