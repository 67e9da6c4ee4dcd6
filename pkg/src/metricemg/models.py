"""SDCNN embedding model and the DCNN / CNNSC / ECNN classifier baselines.

All four share the convolutional feature extractor. SDCNN trains the
extractor alone with semi-hard triplet loss and classifies by nearest
centroid; the baselines append a dense head and read confidence from its
output probabilities.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .layers import FEATURE_EXTRACTOR, AdamState, Network, adam_step, classifier_head
from .losses import (
    cross_entropy_loss,
    ecnn_loss,
    joint_center_loss,
    mine_semihard,
    triplet_loss,
    update_centers,
)
from .ncc import CentroidSet, compute_centroids, predict_batch
from .synth import rng_for
from .tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)

MODEL_KINDS = ("sdcnn", "dcnn", "cnnsc", "ecnn")
DEFAULT_LR = {"sdcnn": 1e-3, "dcnn": 1e-3, "cnnsc": 1e-4, "ecnn": 1e-4}


@dataclass(frozen=True)
class TripletConfig:
    margin_alpha: float = 20.0

    def __post_init__(self):
        if self.margin_alpha <= 0:
            raise ValueError("margin_alpha must be positive")


@dataclass(frozen=True)
class CenterLossConfig:
    tau: float = 5e-5
    center_lr: float = 0.5

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be >= 0")


@dataclass(frozen=True)
class EcnnConfig:
    lambda_kl: float = 0.1
    evidence_activation: str = "relu"

    def __post_init__(self):
        if self.lambda_kl < 0:
            raise ValueError("lambda_kl must be >= 0")
        if self.evidence_activation not in ("relu", "softplus"):
            raise ValueError("evidence_activation must be relu or softplus")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float | None = None  # None: per-model default
    batch_size: int = 128
    patience: int = 5
    min_delta: float = 1e-4
    max_epochs: int = 100
    restore_best: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.min_delta < 0:
            raise ValueError("min_delta must be >= 0")
        if self.batch_size < 2 or self.max_epochs < 1:
            raise ValueError("batch_size must be >= 2 and max_epochs >= 1")


@dataclass
class Predictions:
    predicted: np.ndarray
    scores: np.ndarray  # (N, C) class membership scores
    confidence: np.ndarray  # top score per row


def _as_input(frames: np.ndarray, input_shape) -> Tensor:
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    if x.shape[1:] != tuple(input_shape):
        raise ShapeError(f"frames of shape {x.shape[1:]} do not match network input {input_shape}")
    return Tensor(x)


class MetricModel:
    """One of the four model variants with its parameters and training state."""

    def __init__(
        self,
        kind: str,
        num_classes: int,
        grid: tuple[int, int] = (4, 16),
        seed: int = 0,
        triplet: TripletConfig = TripletConfig(),
        center: CenterLossConfig = CenterLossConfig(),
        ecnn: EcnnConfig = EcnnConfig(),
        class_ids=None,
    ):
        if kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.num_classes = num_classes
        self.class_ids = np.arange(num_classes) if class_ids is None else np.asarray(class_ids)
        if len(self.class_ids) != num_classes:
            raise ValueError("class_ids must list num_classes ids")
        self.grid = tuple(grid)
        self.seed = seed
        self.triplet = triplet
        self.center = center
        self.ecnn = ecnn
        init_rng = rng_for(seed, 11)
        self.features = Network(FEATURE_EXTRACTOR, (1,) + self.grid, init_rng, prefix="features")
        self.head: Network | None = None
        if kind != "sdcnn":
            self.head = Network(classifier_head(num_classes), self.features.output_shape, init_rng, prefix="head")
        self.centers = np.zeros((num_classes, 128)) if kind == "cnnsc" else None
        self.centroids: CentroidSet | None = None

    @property
    def embedding_dim(self) -> int:
        return self.features.output_shape[0]

    @property
    def params(self) -> list[Tensor]:
        return self.features.params + (self.head.params if self.head else [])

    @property
    def networks(self) -> list[Network]:
        return [self.features] + ([self.head] if self.head else [])

    # ------------------------------------------------------------ forward

    def _label_index(self, labels) -> np.ndarray:
        labels = np.asarray(labels)
        lookup = {int(c): i for i, c in enumerate(self.class_ids)}
        try:
            return np.array([lookup[int(y)] for y in labels], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]} is not a training class of this model") from None

    def embed(self, frames, train: bool = False, rng=None) -> Tensor:
        return self.features(_as_input(frames, self.features.input_shape), train=train, rng=rng)

    def _head_outputs(self, frames, train: bool, rng) -> tuple[Tensor, Tensor]:
        """(hidden 128-d features after activation, output layer)."""
        h = self.embed(frames, train, rng)
        layers = self.head.layers
        hidden = layers[1](layers[0](h, train, rng), train, rng)
        out = layers[3](layers[2](hidden, train, rng), train, rng)
        return hidden, out

    def _evidence(self, out: Tensor) -> Tensor:
        if self.ecnn.evidence_activation == "relu":
            return T.relu(out)
        # softplus
        return T.log(T.exp(out) + 1.0)

    def loss(self, frames, labels, train: bool, rng=None) -> tuple[Tensor | None, dict]:
        """Training objective on one batch; ``None`` when the batch yields no triplets."""
        y = self._label_index(labels)
        if self.kind == "sdcnn":
            emb = self.embed(frames, train, rng)
            dists = T.pairwise_sq_dist(emb)
            triples = mine_semihard(dists, y, self.triplet.margin_alpha)
            return triplet_loss(dists, triples, self.triplet.margin_alpha), {"triplets": len(triples)}
        hidden, out = self._head_outputs(frames, train, rng)
        if self.kind == "dcnn":
            return cross_entropy_loss(out, y), {}
        if self.kind == "cnnsc":
            return joint_center_loss(out, hidden, y, self.centers, self.center.tau), {"hidden": hidden.data, "y": y}
        return ecnn_loss(self._evidence(out), y, self.ecnn.lambda_kl), {}

    def after_step(self, aux: dict) -> None:
        if self.kind == "cnnsc" and "hidden" in aux:
            self.centers = update_centers(self.centers, aux["hidden"], aux["y"], self.center.center_lr)

    # ------------------------------------------------------------ inference

    def embed_numpy(self, frames, batch_size: int = 512) -> np.ndarray:
        frames = np.asarray(frames)
        out = [self.embed(frames[i : i + batch_size]).data for i in range(0, len(frames), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.embedding_dim))

    def fit_centroids(self, frames, labels) -> CentroidSet:
        self.centroids = compute_centroids(self.embed_numpy(frames), labels, self.class_ids)
        return self.centroids

    def class_scores(self, frames, batch_size: int = 512) -> np.ndarray:
        """(N, C) membership scores: NC confidence, softmax, or Dirichlet mean."""
        frames = np.asarray(frames)
        chunks = []
        for i in range(0, len(frames), batch_size):
            part = frames[i : i + batch_size]
            if self.kind == "sdcnn":
                if self.centroids is None:
                    raise RuntimeError("fit_centroids must be called before predicting with an SDCNN")
                chunks.append(predict_batch(self.embed(part).data, self.centroids).scores)
                continue
            _, out = self._head_outputs(part, False, None)
            if self.kind == "ecnn":
                alpha = self._evidence(out).data + 1.0
                chunks.append(alpha / alpha.sum(axis=1, keepdims=True))
            else:
                chunks.append(T.softmax(out.data))
        return np.concatenate(chunks) if chunks else np.zeros((0, self.num_classes))

    def predict(self, frames) -> Predictions:
        if self.kind == "sdcnn":
            if self.centroids is None:
                raise RuntimeError("fit_centroids must be called before predicting with an SDCNN")
            d = predict_batch(self.embed_numpy(frames), self.centroids)
            return Predictions(d.predicted, d.scores, d.scores.max(axis=1))
        scores = self.class_scores(frames)
        predicted = self.class_ids[np.argmax(scores, axis=1)]
        return Predictions(predicted, scores, scores.max(axis=1))

    # ------------------------------------------------------------ state

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for p in self.params:
            out[f"param/{p.name}"] = p.data.copy()
        for net in self.networks:
            for i, layer in enumerate(net.layers):
                if layer.bn_state is not None:
                    prefix = f"bn/{net.prefix}.{i}"
                    out[f"{prefix}/mean"] = layer.bn_state.running_mean.copy()
                    out[f"{prefix}/var"] = layer.bn_state.running_var.copy()
                    out[f"{prefix}/initialized"] = np.array(layer.bn_state.initialized)
        if self.centers is not None:
            out["centers"] = self.centers.copy()
        if self.centroids is not None:
            out["centroids/class_ids"] = self.centroids.class_ids.copy()
            out["centroids/values"] = self.centroids.centroids.copy()
            out["centroids/counts"] = self.centroids.counts.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params:
            p.data = np.array(state[f"param/{p.name}"], dtype=np.float64)
        for net in self.networks:
            for i, layer in enumerate(net.layers):
                if layer.bn_state is not None:
                    prefix = f"bn/{net.prefix}.{i}"
                    layer.bn_state.running_mean = np.array(state[f"{prefix}/mean"], dtype=np.float64)
                    layer.bn_state.running_var = np.array(state[f"{prefix}/var"], dtype=np.float64)
                    layer.bn_state.initialized = bool(state[f"{prefix}/initialized"])
        if "centers" in state:
            self.centers = np.array(state["centers"], dtype=np.float64)
        if "centroids/values" in state:
            self.centroids = CentroidSet(
                np.array(state["centroids/class_ids"]),
                np.array(state["centroids/values"], dtype=np.float64),
                np.array(state["centroids/counts"]),
            )

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "num_classes": self.num_classes,
            "class_ids": [int(c) for c in self.class_ids],
            "grid": list(self.grid),
            "seed": self.seed,
            "triplet": asdict(self.triplet),
            "center": asdict(self.center),
            "ecnn": asdict(self.ecnn),
        }


@dataclass
class TrainingLog:
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    skipped_batches: list[int] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def evaluate_loss(model: MetricModel, frames, labels, batch_size: int = 128) -> float:
    """Sample-weighted mean loss in eval mode; NaN when no batch yields a loss."""
    total, weight = 0.0, 0
    for idx in _batches(len(frames), batch_size, None):
        loss, _ = model.loss(frames[idx], labels[idx], train=False)
        if loss is not None:
            total += loss.item() * len(idx)
            weight += len(idx)
    return total / weight if weight else float("nan")


def train(
    model: MetricModel,
    train_frames: np.ndarray,
    train_labels: np.ndarray,
    valid_frames: np.ndarray,
    valid_labels: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
) -> TrainingLog:
    """Mini-batch Adam with early stopping on validation loss and best-epoch recall."""
    train_labels = np.asarray(train_labels)
    if len(train_frames) == 0:
        raise ValueError("empty training set")
    if len(np.unique(train_labels)) < 2:
        raise ValueError("training data must contain at least 2 classes")
    lr = cfg.learning_rate if cfg.learning_rate is not None else DEFAULT_LR[model.kind]
    opt = AdamState(learning_rate=lr)
    rng = rng_for(cfg.seed, 23)
    log = TrainingLog()
    best, best_state, wait = np.inf, None, 0
    params = model.params

    for epoch in range(cfg.max_epochs):
        losses, weights, skipped = [], [], 0
        for idx in _batches(len(train_frames), cfg.batch_size, rng):
            loss, aux = model.loss(train_frames[idx], train_labels[idx], train=True, rng=rng)
            if loss is None:
                skipped += 1
                continue
            grads = T.grad_of(loss, params)
            adam_step(params, grads, opt)
            model.after_step(aux)
            losses.append(loss.item())
            weights.append(len(idx))
        log.train_loss.append(float(np.average(losses, weights=weights)) if losses else float("nan"))
        log.skipped_batches.append(skipped)
        val = evaluate_loss(model, valid_frames, np.asarray(valid_labels), cfg.batch_size)
        log.valid_loss.append(val)
        logger.debug("%s epoch %d: train %.6g valid %.6g", model.kind, epoch, log.train_loss[-1], val)

        if np.isfinite(val) and val < best - cfg.min_delta:
            best, best_state, wait = val, model.state(), 0
            log.best_epoch = epoch
        else:
            wait += 1
            if wait >= cfg.patience:
                log.stopped_early = True
                break

    if cfg.restore_best and best_state is not None:
        model.load_state(best_state)
    return log
