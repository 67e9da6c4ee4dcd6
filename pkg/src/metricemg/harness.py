"""Experiment orchestration: datasets, LOOCV protocols and online replay."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rejection as R
from .dsp import ConfigError, FilterConfig, FrameSequence, recording_to_frames
from .io import load_recording, save_recording
from .models import (
    MODEL_KINDS,
    CenterLossConfig,
    EcnnConfig,
    MetricModel,
    TrainConfig,
    TripletConfig,
    train,
)
from .synth import (
    SynthConfig,
    default_order,
    make_gesture_templates,
    ramp_mask,
    rng_for,
    synth_dynamic_sequence,
    synth_static_trial,
)

logger = logging.getLogger(__name__)

EXPERIMENTS = ("in_domain", "domain_divergent", "out_of_domain", "online_replay")


@dataclass(frozen=True)
class EvalConfig:
    bins: int = 35
    eps: float = 1e-10
    kl_direction: str = "incorrect||correct"
    calibration_bins: int = 10
    rejection_step: float = 0.01
    fpr_denominator: str = "incorrect"


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    model: str
    seeds: tuple[int, ...]
    synth: SynthConfig = SynthConfig()
    train: TrainConfig = TrainConfig()
    triplet: TripletConfig = TripletConfig()
    center: CenterLossConfig = CenterLossConfig()
    ecnn: EcnnConfig = EcnnConfig()
    filters: FilterConfig = FilterConfig()
    eval: EvalConfig = EvalConfig()
    static_increment_ms: float = 100.0
    dynamic_increment_ms: float = 1.0
    compare_models: tuple[str, ...] = ()
    workers: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"unknown model {self.model!r}; choose from {MODEL_KINDS}")
        for m in self.compare_models:
            if m not in MODEL_KINDS:
                raise ConfigError(f"unknown comparison model {m!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synth"] = self.synth.to_dict()
        d["seeds"] = list(self.seeds)
        d["compare_models"] = list(self.compare_models)
        d.pop("workers")
        return d


# ---------------------------------------------------------------- datasets


@dataclass
class DatasetBundle:
    static: dict[tuple[int, int], FrameSequence]
    dynamic: FrameSequence | None
    dynamic_in_ramp: np.ndarray | None
    num_classes: int
    trials_per_class: int
    provenance: dict = field(default_factory=dict)

    def stack(self, classes, trials) -> tuple[np.ndarray, np.ndarray]:
        seqs = [self.static[c, t] for c in classes for t in trials]
        if not seqs:
            return np.zeros((0,) + self.grid), np.zeros(0, dtype=np.int64)
        return np.concatenate([s.frames for s in seqs]), np.concatenate([s.labels for s in seqs])

    @property
    def grid(self) -> tuple[int, int]:
        return next(iter(self.static.values())).frames.shape[1:]


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def synth_recordings(synth: SynthConfig):
    """Yield ((class, trial) or "dynamic", EmgRecording) for one synthetic subject."""
    templates = make_gesture_templates(synth, rng_for(synth.seed, 0))
    for c in range(synth.num_classes):
        for t in range(synth.trials_per_class):
            yield (c, t), synth_static_trial(templates[c], synth, rng_for(synth.seed, 1, c, t))
    order = default_order(synth)
    yield "dynamic", synth_dynamic_sequence(templates, order, synth, rng_for(synth.seed, 2))


def _frames_in_ramp(seq: FrameSequence, mask: np.ndarray, fs: float) -> np.ndarray:
    ends = np.round(seq.timestamps_ms * fs / 1000.0).astype(int) - 1
    return mask[ends]


def build_dataset(
    synth: SynthConfig,
    filters: FilterConfig = FilterConfig(),
    static_increment_ms: float = 100.0,
    dynamic_increment_ms: float = 1.0,
) -> DatasetBundle:
    static, dynamic, in_ramp = {}, None, None
    for key, rec in synth_recordings(synth):
        if key == "dynamic":
            dynamic = recording_to_frames(rec, filters, dynamic_increment_ms, synth.grid_h, synth.grid_w)
            in_ramp = _frames_in_ramp(dynamic, ramp_mask(default_order(synth), synth), synth.sample_rate_hz)
        else:
            static[key] = recording_to_frames(rec, filters, static_increment_ms, synth.grid_h, synth.grid_w)
    prov = {"source": "synthetic", "seed": synth.seed, "config_hash": config_hash(synth.to_dict())}
    return DatasetBundle(static, dynamic, in_ramp, synth.num_classes, synth.trials_per_class, prov)


def write_synthetic(synth: SynthConfig, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for key, rec in synth_recordings(synth):
        name = "dynamic.emgrec" if key == "dynamic" else f"static_c{key[0]}_t{key[1]}.emgrec"
        save_recording(rec, out / name)
        paths.append(out / name)
    return paths


def load_dataset(
    data_dir,
    filters: FilterConfig = FilterConfig(),
    static_increment_ms: float = 100.0,
    dynamic_increment_ms: float = 1.0,
    grid: tuple[int, int] = (4, 16),
) -> DatasetBundle:
    """Read ``static_c{class}_t{trial}.emgrec`` files and an optional ``dynamic.emgrec``."""
    data_dir = Path(data_dir)
    static = {}
    for path in sorted(data_dir.glob("static_c*_t*.emgrec")):
        c, t = path.stem[len("static_c") :].split("_t")
        static[int(c), int(t)] = recording_to_frames(load_recording(path), filters, static_increment_ms, *grid)
    if not static:
        raise FileNotFoundError(f"no static_c*_t*.emgrec files in {data_dir}")
    classes = sorted({c for c, _ in static})
    trials = sorted({t for _, t in static})
    if classes != list(range(len(classes))) or len(static) != len(classes) * len(trials):
        raise ValueError(f"{data_dir}: static trials must cover every class x trial combination")
    dynamic = None
    dyn_path = data_dir / "dynamic.emgrec"
    if dyn_path.exists():
        dynamic = recording_to_frames(load_recording(dyn_path), filters, dynamic_increment_ms, *grid)
    digest = hashlib.sha256()
    for path in sorted(data_dir.glob("*.emgrec")):
        digest.update(path.read_bytes())
    prov = {"source": str(data_dir), "content_hash": digest.hexdigest()[:16]}
    return DatasetBundle(static, dynamic, None, len(classes), len(trials), prov)


# ---------------------------------------------------------------- folds


def per_trial_folds(trials_per_class: int) -> list[dict]:
    """Trial 0 validates every fold; each remaining trial is the test trial once."""
    if trials_per_class < 3:
        raise ConfigError("per-trial LOOCV needs at least 3 trials per class")
    rest = list(range(1, trials_per_class))
    return [{"valid": [0], "test": [t], "train": [u for u in rest if u != t]} for t in rest]


def per_class_folds(num_classes: int, trials_per_class: int) -> list[dict]:
    """One fold per left-out class: trial 0 validates, the last two are in-domain references."""
    if trials_per_class < 4:
        raise ConfigError("class-wise LOOCV needs at least 4 trials per class")
    if num_classes < 3:
        raise ConfigError("class-wise LOOCV needs at least 3 classes")
    n = trials_per_class
    return [
        {
            "left_out": c,
            "known": [k for k in range(num_classes) if k != c],
            "valid": [0],
            "train": list(range(1, n - 2)),
            "test": [n - 2, n - 1],
            "ood": list(range(n)),
        }
        for c in range(num_classes)
    ]


def _new_model(cfg: ExperimentConfig, kind: str, class_ids, seed: int, grid) -> MetricModel:
    return MetricModel(
        kind,
        len(class_ids),
        grid=tuple(grid),
        seed=seed,
        triplet=cfg.triplet,
        center=cfg.center,
        ecnn=cfg.ecnn,
        class_ids=class_ids,
    )


def fit_model(cfg: ExperimentConfig, kind: str, bundle: DatasetBundle, classes, train_trials, valid_trials, seed: int):
    xtr, ytr = bundle.stack(classes, train_trials)
    xv, yv = bundle.stack(classes, valid_trials)
    if len(xtr) == 0:
        raise ValueError("empty training set")
    model = _new_model(cfg, kind, list(classes), seed, bundle.grid)
    log = train(model, xtr, ytr, xv, yv, replace(cfg.train, seed=seed))
    if kind == "sdcnn":
        model.fit_centroids(xtr, ytr)
    return model, log


def _records(model: MetricModel, frames, labels, tag: str, timestamps=None) -> list[R.PredictionRecord]:
    pred = model.predict(frames)
    ts = [None] * len(frames) if timestamps is None else timestamps
    return [
        R.PredictionRecord(int(p), int(y), s, tag, None if t is None else float(t))
        for p, y, s, t in zip(pred.predicted, labels, pred.scores, ts)
    ]


def _fold_seed(seed: int, *key: int) -> int:
    return int(rng_for(seed, 31, *key).integers(2**31))


def run_loocv_per_trial(cfg: ExperimentConfig, bundle: DatasetBundle, seed: int, kind: str | None = None) -> dict:
    kind = kind or cfg.model
    classes = list(range(bundle.num_classes))
    with_dynamic = cfg.experiment == "domain_divergent"
    if with_dynamic and bundle.dynamic is None:
        raise ValueError("domain-divergent evaluation needs a dynamic sequence")
    folds = []
    in_domain, divergent = [], []
    for i, fold in enumerate(per_trial_folds(bundle.trials_per_class)):
        model, log = fit_model(cfg, kind, bundle, classes, fold["train"], fold["valid"], _fold_seed(seed, i))
        x, y = bundle.stack(classes, fold["test"])
        recs = _records(model, x, y, R.IN_DOMAIN)
        in_domain += recs
        entry = {
            "fold": i,
            "test_trials": fold["test"],
            "train_trials": fold["train"],
            "valid_trials": fold["valid"],
            "n_test": len(recs),
            "accuracy": float(np.mean([r.predicted == r.true_label for r in recs])),
            "epochs": len(log.valid_loss),
            "best_epoch": log.best_epoch,
        }
        if with_dynamic:
            dyn = bundle.dynamic
            drecs = _records(model, dyn.frames, dyn.labels, R.DOMAIN_DIVERGENT, dyn.timestamps_ms)
            divergent += drecs
            entry["dynamic_accuracy"] = float(np.mean([r.predicted == r.true_label for r in drecs]))
        folds.append(entry)
    sections = {"in_domain": section_metrics(in_domain, "accuracy", cfg.eval)}
    if with_dynamic:
        sec = section_metrics(divergent, "accuracy", cfg.eval)
        sec["acc_ref"] = sections["in_domain"]["accuracy"]
        sections["domain_divergent"] = sec
    return {"folds": folds, "sections": sections, "records": {"in_domain": in_domain, "domain_divergent": divergent}}


def run_loocv_per_class(cfg: ExperimentConfig, bundle: DatasetBundle, seed: int, kind: str | None = None) -> dict:
    kind = kind or cfg.model
    folds, records, refs = [], [], []
    for i, fold in enumerate(per_class_folds(bundle.num_classes, bundle.trials_per_class)):
        model, log = fit_model(cfg, kind, bundle, fold["known"], fold["train"], fold["valid"], _fold_seed(seed, i))
        x, y = bundle.stack(fold["known"], fold["test"])
        ref = _records(model, x, y, R.IN_DOMAIN)
        xo, _ = bundle.stack([fold["left_out"]], fold["ood"])
        ood = _records(model, xo, np.full(len(xo), R.OOD_LABEL), R.OUT_OF_DOMAIN)
        refs += ref
        records += ref + ood
        folds.append(
            {
                "fold": i,
                "left_out_class": fold["left_out"],
                "in_domain_trials": len(fold["known"]) * len(fold["test"]),
                "ood_trials": len(fold["ood"]),
                "n_in_domain": len(ref),
                "n_ood": len(ood),
                "acc_ref": float(np.mean([r.predicted == r.true_label for r in ref])),
                "mean_conf_in": float(np.mean([r.confidence for r in ref])),
                "mean_conf_ood": float(np.mean([r.confidence for r in ood])),
                "epochs": len(log.valid_loss),
            }
        )
    sec = section_metrics(records, "domain", cfg.eval)
    sec["acc_ref"] = float(np.mean([r.predicted == r.true_label for r in refs]))
    sec["accuracy"] = None
    return {"folds": folds, "sections": {"out_of_domain": sec}, "records": {"out_of_domain": records}}


def _safe(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ValueError:
        return None


def section_metrics(records: list[R.PredictionRecord], mode: str, ev: EvalConfig) -> dict:
    correct = R.relabel(records, mode)
    conf = np.array([r.confidence for r in records])
    acc = float(np.mean([r.predicted == r.true_label for r in records]))
    kl = _safe(R.kl_divergence, conf[correct], conf[~correct], ev.bins, ev.eps, ev.kl_direction)
    roc = _safe(R.roc_curve, correct, conf)
    prc = _safe(R.pr_curve, correct, conf)
    arc = R.arc_curve(correct, conf)
    cal = R.calibration_curve(correct, conf, ev.calibration_bins)
    return {
        "n_records": len(records),
        "n_correct": int(correct.sum()),
        "accuracy": acc,
        "d_kl": kl,
        "auroc": None if roc is None else roc.auc,
        "auprc": None if prc is None else prc.auc,
        "auarc": arc.auc,
        "mean_conf_correct": float(conf[correct].mean()) if correct.any() else None,
        "mean_conf_incorrect": float(conf[~correct].mean()) if (~correct).any() else None,
        "curves": {c.kind: c.to_dict() for c in (roc, prc, arc, cal) if c is not None},
    }


# ---------------------------------------------------------------- online replay


def run_online_replay(cfg: ExperimentConfig, bundle: DatasetBundle, seed: int, models: dict[str, MetricModel] | None = None) -> dict:
    """Frame-by-frame predictions on the dynamic sequence and a common zero-FPR rejection rate."""
    if bundle.dynamic is None:
        raise ValueError("online replay needs a dynamic sequence")
    classes = list(range(bundle.num_classes))
    kinds = [cfg.model] + [m for m in cfg.compare_models if m != cfg.model]
    if models is None:
        models = {}
        for j, kind in enumerate(kinds):
            trials = list(range(1, bundle.trials_per_class))
            models[kind], _ = fit_model(cfg, kind, bundle, classes, trials, [0], _fold_seed(seed, 100 + j))
    dyn = bundle.dynamic
    unknown = set(np.unique(dyn.labels).tolist()) - set(classes)
    if unknown:
        raise ValueError(f"sequence labels {sorted(unknown)} are not model classes")
    preds, correct = {}, {}
    for kind, model in models.items():
        if list(model.class_ids) != classes:
            raise ValueError(f"model {kind} was not trained on the sequence classes")
        p = model.predict(dyn.frames)
        preds[kind] = p
        correct[kind] = p.predicted == dyn.labels
    shared = R.common_rejection_rate(
        {k: (correct[k], preds[k].confidence) for k in models}, cfg.eval.rejection_step, cfg.eval.fpr_denominator
    )
    rate = shared["rejection_rate"]
    per_model = {}
    timelines = {}
    for kind, p in preds.items():
        zero = R.zero_fpr_threshold(correct[kind], p.confidence, cfg.eval.rejection_step, cfg.eval.fpr_denominator)
        thr = R.threshold_at_rate(p.confidence, rate) if rate is not None else -np.inf
        accepted = p.confidence >= thr
        rejected = ~accepted
        info = {
            "accuracy": float(correct[kind].mean()),
            "threshold": float(thr),
            "rejection_rate": float(rejected.mean()),
            "fpr": R.false_positive_rate(correct[kind], p.confidence, thr, cfg.eval.fpr_denominator),
            "active_accuracy": float(correct[kind][accepted].mean()) if accepted.any() else None,
            "own_zero_fpr_rate": zero.rejection_rate,
        }
        if bundle.dynamic_in_ramp is not None:
            ramp = bundle.dynamic_in_ramp
            info["rejections_in_ramps"] = float(ramp[rejected].mean()) if rejected.any() else None
            info["errors_in_ramps"] = float(ramp[~correct[kind]].mean()) if (~correct[kind]).any() else None
        per_model[kind] = info
        timelines[kind] = timeline_rows(dyn, p, accepted)
    return {"common": shared, "models": per_model, "timelines": timelines}


def timeline_rows(dyn: FrameSequence, pred, accepted: np.ndarray) -> dict:
    scores = pred.scores
    lo, hi = scores.min(), scores.max()
    scaled = (scores - lo) / (hi - lo) if hi > lo else np.zeros_like(scores)
    return {
        "t_ms": dyn.timestamps_ms,
        "true_label": dyn.labels,
        "predicted": pred.predicted,
        "accepted": accepted.astype(int),
        "scores": scaled,
        "raw_conf": pred.confidence,
    }


# ---------------------------------------------------------------- top level


def run_subject(cfg: ExperimentConfig, seed: int, bundle: DatasetBundle | None = None) -> dict:
    """Run the configured experiment for one synthetic subject."""
    if bundle is None:
        bundle = build_dataset(
            replace(cfg.synth, seed=seed), cfg.filters, cfg.static_increment_ms, cfg.dynamic_increment_ms
        )
    if cfg.experiment in ("in_domain", "domain_divergent"):
        out = run_loocv_per_trial(cfg, bundle, seed)
    elif cfg.experiment == "out_of_domain":
        out = run_loocv_per_class(cfg, bundle, seed)
    else:
        out = run_online_replay(cfg, bundle, seed)
    out["seed"] = seed
    out["provenance"] = bundle.provenance
    return out


def run_experiment(cfg: ExperimentConfig, bundles: dict[int, DatasetBundle] | None = None) -> list[dict]:
    if cfg.workers > 1 and bundles is None:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(run_subject, [cfg] * len(cfg.seeds), cfg.seeds))
    return [run_subject(cfg, s, None if bundles is None else bundles.get(s)) for s in cfg.seeds]
