"""Confidence-based rejection metrics.

Predictions are relabeled as correct/incorrect (or in/out of the training
domain), then their confidence scores are compared through a histogram KL
divergence and ROC, precision-recall, accuracy-rejection and calibration
curves. A record is rejected when its score is strictly below the
threshold; ties are accepted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IN_DOMAIN = "in_domain"
DOMAIN_DIVERGENT = "domain_divergent"
OUT_OF_DOMAIN = "out_of_domain"
OOD_LABEL = -1


@dataclass
class PredictionRecord:
    predicted: int
    true_label: int  # OOD_LABEL for unseen-class samples
    full_scores: np.ndarray
    domain_tag: str = IN_DOMAIN
    timestamp_ms: float | None = None

    @property
    def confidence(self) -> float:
        return float(np.max(self.full_scores))


@dataclass
class CurvePoints:
    kind: str
    x: np.ndarray
    y: np.ndarray
    auc: float = float("nan")
    thresholds: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "auc": self.auc, "x": self.x.tolist(), "y": self.y.tolist()}


@dataclass
class HistogramPair:
    edges: np.ndarray
    counts_correct: np.ndarray
    counts_incorrect: np.ndarray
    eps: float


def relabel(records: list[PredictionRecord], mode: str = "accuracy") -> np.ndarray:
    """Binary correctness labels.

    ``mode="accuracy"``: true iff predicted == true_label.
    ``mode="domain"``: true iff the record comes from the training domain.
    """
    if not records:
        raise ValueError("no records to relabel")
    if mode == "accuracy":
        if any(r.domain_tag == OUT_OF_DOMAIN for r in records):
            raise ValueError("out-of-domain records need mode='domain'")
        return np.array([r.predicted == r.true_label for r in records])
    if mode == "domain":
        return np.array([r.domain_tag == IN_DOMAIN for r in records])
    raise ValueError(f"unknown relabel mode {mode!r}")


def _check_binary(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValueError("labels and scores must be 1-D arrays of equal length")
    if labels.size == 0:
        raise ValueError("empty input")
    return labels, scores


def confidence_histograms(correct_scores, incorrect_scores, bins: int = 35, eps: float = 1e-10) -> HistogramPair:
    correct = np.asarray(correct_scores, dtype=np.float64)
    incorrect = np.asarray(incorrect_scores, dtype=np.float64)
    if correct.size == 0 or incorrect.size == 0:
        raise ValueError("both score lists must be nonempty")
    both = np.concatenate([correct, incorrect])
    lo, hi = both.min(), both.max()
    if not hi > lo:
        raise ValueError("scores span a degenerate range; need at least 2 distinct values")
    edges = np.linspace(lo, hi, bins + 1)
    return HistogramPair(
        edges,
        np.histogram(correct, edges)[0].astype(np.float64),
        np.histogram(incorrect, edges)[0].astype(np.float64),
        eps,
    )


def kl_divergence(correct_scores, incorrect_scores, bins: int = 35, eps: float = 1e-10, direction: str = "incorrect||correct") -> float:
    """Histogram estimate of D_KL between incorrect and correct score distributions (nats)."""
    h = confidence_histograms(correct_scores, incorrect_scores, bins, eps)
    p_inc = (h.counts_incorrect + eps) / (h.counts_incorrect + eps).sum()
    p_cor = (h.counts_correct + eps) / (h.counts_correct + eps).sum()
    if direction == "correct||incorrect":
        p_inc, p_cor = p_cor, p_inc
    elif direction != "incorrect||correct":
        raise ValueError(f"unknown direction {direction!r}")
    return float(max(np.sum(p_inc * np.log(p_inc / p_cor)), 0.0))


def kl_from_distributions(p, q) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    return float(np.sum(p * np.log(p / q)))


def _threshold_counts(labels: np.ndarray, scores: np.ndarray):
    """Cumulative (tp, fp) when accepting score >= t, for descending unique thresholds."""
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(~y)[last_of_group]
    return s[last_of_group], tp.astype(np.float64), fp.astype(np.float64)


def roc_curve(labels, scores) -> CurvePoints:
    labels, scores = _check_binary(labels, scores)
    pos, neg = labels.sum(), (~labels).sum()
    if pos == 0 or neg == 0:
        raise ValueError("ROC needs both correct and incorrect records")
    thr, tp, fp = _threshold_counts(labels, scores)
    fpr = np.r_[0.0, fp / neg]
    tpr = np.r_[0.0, tp / pos]
    return CurvePoints("roc", fpr, tpr, float(np.trapezoid(tpr, fpr)), np.r_[np.inf, thr])


def mann_whitney_auc(labels, scores) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), by exhaustive pairing."""
    labels, scores = _check_binary(labels, scores)
    pos, neg = scores[labels], scores[~labels]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def pr_curve(labels, scores) -> CurvePoints:
    labels, scores = _check_binary(labels, scores)
    pos = labels.sum()
    if pos == 0:
        raise ValueError("precision-recall needs at least one positive record")
    thr, tp, fp = _threshold_counts(labels, scores)
    precision = tp / (tp + fp)
    recall = tp / pos
    auc = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return CurvePoints("prc", recall, precision, auc, thr)


def arc_curve(labels, scores) -> CurvePoints:
    """Active accuracy versus rejection rate, thresholding at each unique score.

    The area integrates over rejection in [0, 1], holding the last defined
    accuracy constant beyond the largest reachable rejection rate.
    """
    labels, scores = _check_binary(labels, scores)
    n = labels.size
    order = np.argsort(scores, kind="mergesort")
    s, y = scores[order], labels[order]
    first_of_group = np.r_[0, np.nonzero(np.diff(s))[0] + 1]
    # thresholds ascending: reject everything before the group start
    correct_after = np.cumsum(y[::-1])[::-1]
    rejection = first_of_group / n
    accuracy = correct_after[first_of_group] / (n - first_of_group)
    auc = float(np.trapezoid(accuracy, rejection) + accuracy[-1] * (1.0 - rejection[-1]))
    return CurvePoints("arc", rejection.astype(np.float64), accuracy, auc, s[first_of_group])


def calibration_curve(labels, scores, bins: int = 10) -> CurvePoints:
    if bins < 2:
        raise ValueError("need at least 2 bins")
    labels, scores = _check_binary(labels, scores)
    idx = np.clip(np.floor(scores * bins).astype(int), 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    hits = np.bincount(idx, weights=labels.astype(np.float64), minlength=bins)
    keep = counts > 0
    centers = (np.arange(bins) + 0.5) / bins
    return CurvePoints("calibration", centers[keep], hits[keep] / counts[keep])


@dataclass
class ZeroFprResult:
    rejection_rate: float | None  # None: unreachable below 100 % rejection
    threshold: float | None
    fpr: float
    trivial: bool = False
    fpr_by_rate: list[float] = field(default_factory=list)


def threshold_at_rate(scores, rate: float) -> float:
    """Score at rank floor(rate * n) of the ascending scores: rejects about ``rate`` of them."""
    s = np.sort(np.asarray(scores, dtype=np.float64))
    k = min(int(np.floor(rate * len(s) + 1e-9)), len(s) - 1)
    return float(s[k])


def false_positive_rate(correct, scores, threshold: float, denominator: str = "incorrect") -> float:
    correct, scores = _check_binary(correct, scores)
    accepted = scores >= threshold
    bad = (~correct & accepted).sum()
    if denominator == "incorrect":
        total = (~correct).sum()
    elif denominator == "accepted":
        total = accepted.sum()
    else:
        raise ValueError(f"unknown FPR denominator {denominator!r}")
    return float(bad / total) if total else 0.0


def zero_fpr_threshold(correct, scores, step: float = 0.01, denominator: str = "incorrect") -> ZeroFprResult:
    """Smallest rejection rate on a ``step`` grid below 100 % whose threshold admits no errors."""
    correct, scores = _check_binary(correct, scores)
    if correct.all():
        return ZeroFprResult(0.0, threshold_at_rate(scores, 0.0), 0.0, trivial=True, fpr_by_rate=[0.0])
    rates = np.arange(0, int(round(1.0 / step))) * step
    history = []
    for r in rates:
        t = threshold_at_rate(scores, r)
        fpr = false_positive_rate(correct, scores, t, denominator)
        history.append(fpr)
        if fpr == 0.0:
            return ZeroFprResult(float(round(r, 10)), t, 0.0, fpr_by_rate=history)
    return ZeroFprResult(None, None, history[-1], fpr_by_rate=history)


def common_rejection_rate(models: dict[str, tuple[np.ndarray, np.ndarray]], step: float = 0.01, denominator: str = "incorrect") -> dict:
    """Scan rejection rates upward until the first model reaches zero FPR.

    ``models`` maps a name to (correct, scores). Returns the shared rate and
    every model's threshold and FPR at that rate.
    """
    steps = int(round(1.0 / step))
    for i in range(steps):
        r = i * step
        per_model = {}
        hit = []
        for name, (correct, scores) in models.items():
            t = threshold_at_rate(scores, r)
            fpr = false_positive_rate(correct, scores, t, denominator)
            per_model[name] = {"threshold": t, "fpr": fpr}
            if fpr == 0.0:
                hit.append(name)
        if hit:
            return {"rejection_rate": float(round(r, 10)), "reached_by": hit, "models": per_model}
    return {"rejection_rate": None, "reached_by": [], "models": {}}


@dataclass
class PcaResult:
    mean: np.ndarray
    components: np.ndarray  # (k, D), orthonormal rows
    explained_variance: np.ndarray
    explained_ratio: np.ndarray
    projections: list[np.ndarray]


def pca_project(train_vectors, test_sets=(), k: int = 2, tol: float = 1e-10, max_iter: int = 10_000) -> PcaResult:
    """Top-k principal axes of the training set by power iteration with deflation."""
    x = np.asarray(train_vectors, dtype=np.float64)
    n, d = x.shape
    if n < k + 1 or k > d:
        raise ValueError(f"need at least {k + 1} training vectors of dimension >= {k}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    total = np.trace(cov)
    comps, variances = [], []
    rng = np.random.default_rng(0)
    work = cov.copy()
    for i in range(k):
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = work @ v
            norm = np.linalg.norm(w)
            if norm <= 1e-300:
                break
            w /= norm
            done = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
            v = w
            if done:
                break
        # the deflated operator is only rounding noise once the rank is exhausted
        if float(v @ work @ v) <= 1e-12 * max(total, 1e-300):
            raise ValueError(f"training data has rank {i} < {k}")
        # re-orthogonalize against earlier components to limit drift
        for c in comps:
            v -= (v @ c) * c
        v /= np.linalg.norm(v)
        lam = float(v @ cov @ v)
        comps.append(v)
        variances.append(lam)
        work = work - lam * np.outer(v, v)
    components = np.array(comps)
    variances = np.array(variances)
    projections = [xc @ components.T] + [(np.asarray(s, dtype=np.float64) - mean) @ components.T for s in test_sets]
    return PcaResult(mean, components, variances, variances / total, projections)
