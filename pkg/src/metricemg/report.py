"""Report emission: ``report.json``, curve CSVs, replay timelines and a summary table.

``report.json`` layout (``schema_version`` 1)::

    schema_version   int
    experiment       in_domain | domain_divergent | out_of_domain | online_replay
    model            sdcnn | dcnn | cnnsc | ecnn
    config           echo of the full experiment configuration
    subjects         one entry per seed: seed, provenance, folds and per-section
                     metrics (LOOCV) or per-model replay results
    summary          seed-averaged metrics of the headline section

Metric units: accuracies and AUCs are fractions in [0, 1], D_KL is in nats,
timestamps are milliseconds. Undefined metrics (for example AUROC when every
prediction is correct) are ``null``. Floats use the shortest round-trip
decimal form of the underlying 64-bit value, keys are sorted, and no
timestamps or host details are written, so identical runs give identical
bytes.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
SUMMARY_COLUMNS = ("acc_test", "acc_ref", "d_kl", "auroc", "auprc", "auarc")
CURVE_HEADERS = {
    "roc": ("fpr", "tpr"),
    "prc": ("recall", "precision"),
    "arc": ("rejection_rate", "active_accuracy"),
    "calibration": ("confidence", "fraction_correct"),
}
HEADLINE_SECTION = {
    "in_domain": "in_domain",
    "domain_divergent": "domain_divergent",
    "out_of_domain": "out_of_domain",
}

_NUM = {"type": ["number", "null"]}
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "experiment", "model", "config", "subjects", "summary"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "experiment": {"enum": ["in_domain", "domain_divergent", "out_of_domain", "online_replay"]},
        "model": {"enum": ["sdcnn", "dcnn", "cnnsc", "ecnn"]},
        "config": {"type": "object"},
        "subjects": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["seed", "provenance"],
                "properties": {
                    "seed": {"type": "integer"},
                    "provenance": {"type": "object"},
                    "folds": {"type": "array", "items": {"type": "object"}},
                    "sections": {
                        "type": "object",
                        "additionalProperties": {
                            "type": "object",
                            "required": ["n_records", "accuracy", "d_kl", "auroc", "auprc", "auarc", "curves"],
                            "properties": {
                                "n_records": {"type": "integer", "minimum": 1},
                                "accuracy": _NUM,
                                "acc_ref": _NUM,
                                "d_kl": _NUM,
                                "auroc": _NUM,
                                "auprc": _NUM,
                                "auarc": _NUM,
                                "curves": {
                                    "type": "object",
                                    "additionalProperties": {
                                        "type": "object",
                                        "required": ["kind", "x", "y"],
                                        "properties": {
                                            "x": {"type": "array", "items": {"type": "number"}},
                                            "y": {"type": "array", "items": {"type": "number"}},
                                        },
                                    },
                                },
                            },
                        },
                    },
                    "replay": {"type": "object", "required": ["common", "models"]},
                },
            },
        },
        "summary": {"type": "object"},
    },
}


def _clean(obj):
    """Recursively convert numpy values to JSON types; non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(experiment: str, model: str, subjects: list[dict]) -> dict:
    """Seed-averaged headline metrics; each seed is one synthetic subject."""
    if experiment == "online_replay":
        models = sorted({k for s in subjects for k in s["replay"]["models"]})
        return {
            "n_seeds": len(subjects),
            "rejection_rate": _mean([s["replay"]["common"]["rejection_rate"] for s in subjects]),
            "models": {
                m: {
                    key: _mean([s["replay"]["models"][m][key] for s in subjects])
                    for key in ("accuracy", "rejection_rate", "fpr", "active_accuracy", "rejections_in_ramps")
                    if all(key in s["replay"]["models"][m] for s in subjects)
                }
                for m in models
            },
        }
    section = HEADLINE_SECTION[experiment]
    secs = [s["sections"][section] for s in subjects]
    row = {
        "acc_test": _mean([x["accuracy"] for x in secs]),
        "acc_ref": _mean([x.get("acc_ref") for x in secs]),
        "d_kl": _mean([x["d_kl"] for x in secs]),
        "auroc": _mean([x["auroc"] for x in secs]),
        "auprc": _mean([x["auprc"] for x in secs]),
        "auarc": _mean([x["auarc"] for x in secs]),
    }
    return {"n_seeds": len(subjects), "section": section, **row}


def build_report(cfg, results: list[dict]) -> dict:
    subjects = []
    for res in results:
        entry = {"seed": res["seed"], "provenance": res["provenance"]}
        if "sections" in res:
            entry["folds"] = res["folds"]
            entry["sections"] = res["sections"]
        else:
            entry["replay"] = {"common": res["common"], "models": res["models"]}
        subjects.append(entry)
    subjects = _clean(subjects)
    return {
        "schema_version": SCHEMA_VERSION,
        "experiment": cfg.experiment,
        "model": cfg.model,
        "config": _clean(cfg.to_dict()),
        "subjects": subjects,
        "summary": _clean(summarize(cfg.experiment, cfg.model, subjects)),
    }


def dumps(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1, allow_nan=False) + "\n"


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def write_curves(report: dict, out_dir: Path) -> list[Path]:
    curve_dir = out_dir / "curves"
    paths = []
    for subj in report["subjects"]:
        for section, sec in sorted(subj.get("sections", {}).items()):
            for kind, curve in sorted(sec["curves"].items()):
                curve_dir.mkdir(parents=True, exist_ok=True)
                path = curve_dir / f"{section}_{kind}_seed{subj['seed']}.csv"
                _write_csv(path, CURVE_HEADERS[kind], zip(curve["x"], curve["y"]))
                paths.append(path)
    return paths


def write_timeline(timeline: dict, path: Path) -> None:
    scores = np.asarray(timeline["scores"])
    header = ["t_ms", "true_label", "predicted", "accepted"] + [f"score_{c}" for c in range(scores.shape[1])] + ["raw_conf"]
    rows = (
        [float(t), int(y), int(p), int(a), *map(float, s), float(rc)]
        for t, y, p, a, s, rc in zip(
            timeline["t_ms"], timeline["true_label"], timeline["predicted"], timeline["accepted"], scores, timeline["raw_conf"]
        )
    )
    _write_csv(path, header, rows)


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def summary_rows(reports: list[dict]) -> list[dict]:
    """One row per (model, experiment) report; replay reports contribute one row per model."""
    rows = []
    for rep in reports:
        s = rep["summary"]
        if rep["experiment"] == "online_replay":
            for m, info in sorted(s["models"].items()):
                rows.append(
                    {"model": m, "experiment": "online_replay", "acc_test": info.get("accuracy"),
                     "acc_ref": None, "d_kl": None, "auroc": None, "auprc": None, "auarc": info.get("active_accuracy")}
                )
        else:
            rows.append({"model": rep["model"], "experiment": rep["experiment"], **{k: s[k] for k in SUMMARY_COLUMNS}})
    return rows


def summary_table(reports: list[dict]) -> str:
    header = ("model", "experiment", "Acc_test", "Acc_ref", "D_KL", "AUROC", "AUPRC", "AUARC")
    lines = [header]
    for row in summary_rows(reports):
        lines.append((row["model"], row["experiment"], *(_fmt(row[k]) for k in SUMMARY_COLUMNS)))
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    out = ["  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in lines]
    out.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def emit_report(cfg, results: list[dict], out_dir) -> dict:
    """Write every artifact of one experiment run and return the report dict."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        report = build_report(cfg, results)
        (out_dir / "report.json").write_text(dumps(report))
        (out_dir / "config.json").write_text(json.dumps(report["config"], sort_keys=True, indent=1) + "\n")
        write_curves(report, out_dir)
        for res in results:
            for kind, timeline in res.get("timelines", {}).items():
                suffix = "" if len(cfg.seeds) == 1 else f"_seed{res['seed']}"
                name = "timeline" if kind == cfg.model else f"timeline_{kind}"
                write_timeline(timeline, out_dir / f"{name}{suffix}.csv")
        (out_dir / "summary.txt").write_text(summary_table([report]))
    except OSError as exc:
        raise OSError(f"cannot write report to {out_dir}: {exc}") from exc
    return report
