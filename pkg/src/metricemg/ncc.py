"""Nearest-centroid classification with distance-based confidence scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, softmax


@dataclass
class CentroidSet:
    class_ids: np.ndarray
    centroids: np.ndarray  # (C, D)
    counts: np.ndarray

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def add_class(self, class_id: int, embeddings: np.ndarray) -> CentroidSet:
        """New set with one more prototype; existing centroids are untouched."""
        if class_id in self.class_ids:
            raise ValueError(f"class {class_id} already has a centroid")
        emb = np.atleast_2d(embeddings)
        return CentroidSet(
            np.append(self.class_ids, class_id),
            np.vstack([self.centroids, emb.mean(axis=0)]),
            np.append(self.counts, len(emb)),
        )

    def subset(self, class_ids) -> CentroidSet:
        idx = [int(np.nonzero(self.class_ids == c)[0][0]) for c in class_ids]
        return CentroidSet(self.class_ids[idx], self.centroids[idx], self.counts[idx])


@dataclass
class Confidence:
    scores: np.ndarray
    predicted: int
    degenerate: bool = False


def compute_centroids(embeddings: np.ndarray, labels, class_ids=None) -> CentroidSet:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    class_ids = np.unique(labels) if class_ids is None else np.asarray(class_ids)
    counts = np.array([(labels == c).sum() for c in class_ids])
    missing = class_ids[counts == 0]
    if missing.size:
        raise ValueError(f"no training samples for classes {missing.tolist()}")
    cents = np.stack([embeddings[labels == c].mean(axis=0) for c in class_ids])
    return CentroidSet(class_ids, cents, counts)


def distances(sample: np.ndarray, cents: CentroidSet) -> np.ndarray:
    """Euclidean (not squared) distance from each row of ``sample`` to each centroid."""
    x = np.asarray(sample, dtype=np.float64)
    if x.shape[-1] != cents.dim:
        raise ShapeError(f"embedding dimension {x.shape[-1]} != centroid dimension {cents.dim}")
    diff = x[..., None, :] - cents.centroids
    return np.sqrt(np.einsum("...cd,...cd->...c", diff, diff))


def proximity_scores(d: np.ndarray) -> np.ndarray:
    """``D_c = 1 - d_c / sum_i d_i`` row-wise; rows summing to zero map to all ones."""
    d = np.asarray(d, dtype=np.float64)
    total = d.sum(axis=-1, keepdims=True)
    safe = np.where(total > 0, total, 1.0)
    return np.where(total > 0, 1.0 - d / safe, 1.0)


def confidence(d) -> Confidence:
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 1 or d.size < 2:
        raise ValueError("need a distance vector over at least 2 classes")
    degenerate = not d.sum() > 0
    scores = softmax(proximity_scores(d))
    return Confidence(scores, int(np.argmin(d)), degenerate)


@dataclass
class BatchPrediction:
    predicted: np.ndarray  # class ids
    scores: np.ndarray  # (B, C)
    distances: np.ndarray  # (B, C)
    degenerate: np.ndarray

    @property
    def confidence(self) -> np.ndarray:
        return self.scores.max(axis=1)


def predict_batch(embeddings: np.ndarray, cents: CentroidSet) -> BatchPrediction:
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if emb.shape[0] == 0:
        raise ValueError("empty batch")
    d = distances(emb, cents)
    scores = softmax(proximity_scores(d))
    # argmin picks the lowest column on ties
    return BatchPrediction(cents.class_ids[np.argmin(d, axis=1)], scores, d, ~(d.sum(axis=1) > 0))
