"""Command-line interface: ``metricemg {synth,train,eval,replay,project,report}``.

Configuration comes from an optional TOML file whose tables mirror the config
dataclasses (``[experiment]``, ``[synth]``, ``[train]``, ``[triplet]``,
``[center]``, ``[ecnn]``, ``[filters]``, ``[eval]``), then from flags.
``--set section.key=value`` overrides any single field. A seed is always
required.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import tomli

from .dsp import ConfigError, FilterConfig
from .harness import (
    EvalConfig,
    ExperimentConfig,
    build_dataset,
    fit_model,
    load_dataset,
    run_experiment,
    run_online_replay,
    run_subject,
    write_synthetic,
)
from .io import RecordingFormatError, load_checkpoint, save_checkpoint
from .models import CenterLossConfig, EcnnConfig, TrainConfig, TripletConfig
from .rejection import pca_project
from .report import emit_report, summary_table
from .synth import SynthConfig

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

SECTIONS = {
    "synth": SynthConfig,
    "train": TrainConfig,
    "triplet": TripletConfig,
    "center": CenterLossConfig,
    "ecnn": EcnnConfig,
    "filters": FilterConfig,
    "eval": EvalConfig,
}
EXPERIMENT_KEYS = ("experiment", "model", "compare_models", "static_increment_ms", "dynamic_increment_ms", "workers")


def _coerce(value, current):
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def _build_section(cls, table: dict, name: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(table) - set(known)
    if unknown:
        raise ConfigError(f"[{name}]: unknown keys {sorted(unknown)}")
    defaults = cls()
    kwargs = {k: _coerce(v, getattr(defaults, k)) for k, v in table.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def _parse_scalar(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def load_config(path, overrides: list[str] | None = None) -> dict:
    """Read the TOML file (if any) and apply ``section.key=value`` overrides."""
    data: dict = {}
    if path is not None:
        try:
            data = tomli.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for item in overrides or []:
        key, sep, value = item.partition("=")
        section, dot, field_name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        data.setdefault(section, {})[field_name] = _parse_scalar(value)
    unknown = set(data) - set(SECTIONS) - {"experiment"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    return data


def make_config(data: dict, args, experiment: str | None = None) -> ExperimentConfig:
    exp = dict(data.get("experiment", {}))
    unknown = set(exp) - set(EXPERIMENT_KEYS)
    if unknown:
        raise ConfigError(f"[experiment]: unknown keys {sorted(unknown)}")
    if experiment is not None:
        exp["experiment"] = experiment
    if getattr(args, "experiment", None):
        exp["experiment"] = args.experiment
    if getattr(args, "model", None):
        exp["model"] = args.model
    if getattr(args, "compare", None):
        exp["compare_models"] = args.compare
    if getattr(args, "workers", None):
        exp["workers"] = args.workers
    exp.setdefault("experiment", "in_domain")
    exp.setdefault("model", "sdcnn")
    exp["compare_models"] = tuple(exp.get("compare_models", ()))
    sections = {name: _build_section(cls, data.get(name, {}), name) for name, cls in SECTIONS.items()}
    if getattr(args, "max_epochs", None):
        sections["train"] = replace(sections["train"], max_epochs=args.max_epochs)
    try:
        return ExperimentConfig(seeds=tuple(args.seed), **exp, **sections)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _bundle(cfg: ExperimentConfig, seed: int, data_dir):
    if data_dir is not None:
        return load_dataset(
            data_dir, cfg.filters, cfg.static_increment_ms, cfg.dynamic_increment_ms, (cfg.synth.grid_h, cfg.synth.grid_w)
        )
    return build_dataset(replace(cfg.synth, seed=seed), cfg.filters, cfg.static_increment_ms, cfg.dynamic_increment_ms)


def _seed_dir(out: Path, seed: int, many: bool) -> Path:
    return out / f"seed{seed}" if many else out


def cmd_synth(cfg: ExperimentConfig, args) -> None:
    out = Path(args.out)
    for seed in cfg.seeds:
        paths = write_synthetic(replace(cfg.synth, seed=seed), _seed_dir(out, seed, len(cfg.seeds) > 1))
        print(f"seed {seed}: wrote {len(paths)} recordings")


def cmd_train(cfg: ExperimentConfig, args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        bundle = _bundle(cfg, seed, args.data)
        classes = list(range(bundle.num_classes))
        model, log = fit_model(cfg, cfg.model, bundle, classes, list(range(1, bundle.trials_per_class)), [0], seed)
        path = out / f"{cfg.model}_seed{seed}.npz"
        save_checkpoint(
            model,
            path,
            dataclasses.asdict(replace(cfg.train, seed=seed)),
            {"provenance": bundle.provenance, "log": log.to_dict()},
        )
        print(f"seed {seed}: best epoch {log.best_epoch}, checkpoint {path}")


def cmd_eval(cfg: ExperimentConfig, args) -> None:
    if args.data is not None:
        if len(cfg.seeds) != 1:
            raise ConfigError("--data runs take exactly one seed")
        results = [run_subject(cfg, cfg.seeds[0], _bundle(cfg, cfg.seeds[0], args.data))]
    else:
        results = run_experiment(cfg)
    report = emit_report(cfg, results, args.out)
    print(summary_table([report]), end="")


def cmd_replay(cfg: ExperimentConfig, args) -> None:
    results = []
    for seed in cfg.seeds:
        bundle = _bundle(cfg, seed, args.data)
        models = None
        if args.checkpoint:
            models = {}
            for path in args.checkpoint:
                model, _ = load_checkpoint(path)
                models[model.kind] = model
            if cfg.model not in models:
                raise ConfigError(f"no checkpoint for the primary model {cfg.model!r}")
        res = run_online_replay(cfg, bundle, seed, models)
        res["seed"], res["provenance"] = seed, bundle.provenance
        results.append(res)
    report = emit_report(cfg, results, args.out)
    print(summary_table([report]), end="")


def cmd_project(cfg: ExperimentConfig, args) -> None:
    model, meta = load_checkpoint(args.checkpoint)
    seed = cfg.seeds[0]
    bundle = _bundle(cfg, seed, args.data)
    xtr, ytr = bundle.stack(list(model.class_ids), list(range(1, bundle.trials_per_class)))
    sets = [("train", xtr, ytr)]
    if bundle.dynamic is not None:
        sets.append(("dynamic", bundle.dynamic.frames, bundle.dynamic.labels))
    emb = [model.embed_numpy(x) for _, x, _ in sets]
    pca = pca_project(emb[0], emb[1:], k=2)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "projection.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["set", "label", "pc1", "pc2"])
        for (name, _, labels), proj in zip(sets, pca.projections):
            for y, p in zip(labels, proj):
                w.writerow([name, int(y), repr(float(p[0])), repr(float(p[1]))])
    info = {"explained_variance": pca.explained_variance.tolist(), "explained_ratio": pca.explained_ratio.tolist()}
    (out / "projection.json").write_text(json.dumps(info, sort_keys=True, indent=1) + "\n")
    print(f"explained variance ratio: {', '.join(f'{r:.4f}' for r in pca.explained_ratio)}")


def cmd_report(args) -> None:
    reports = []
    for path in args.reports:
        try:
            reports.append(json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise FileNotFoundError(f"report not found: {path}") from None
    table = summary_table(reports)
    if args.out:
        Path(args.out).write_text(table)
    print(table, end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metricemg", description="Metric-learning HD-EMG gesture recognition experiments with confidence-based rejection.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_model=True):
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--seed", type=int, nargs="+", required=True, help="one or more subject seeds")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config field")
        p.add_argument("--out", required=True, help="output directory")
        if needs_model:
            p.add_argument("--model", choices=("sdcnn", "dcnn", "cnnsc", "ecnn"))
            p.add_argument("--max-epochs", type=int)
            p.add_argument("--data", help="directory of .emgrec recordings instead of synthetic data")

    common(sub.add_parser("synth", help="write synthetic recordings"), needs_model=False)
    common(sub.add_parser("train", help="train a model and save a checkpoint"))
    p = sub.add_parser("eval", help="run an LOOCV experiment and write a report")
    common(p)
    p.add_argument("--experiment", choices=("in_domain", "domain_divergent", "out_of_domain"))
    p.add_argument("--workers", type=int, help="parallel seed workers")
    p = sub.add_parser("replay", help="online replay of the dynamic sequence with rejection")
    common(p)
    p.add_argument("--compare", nargs="+", choices=("sdcnn", "dcnn", "cnnsc", "ecnn"), help="models sharing the rejection rate")
    p.add_argument("--checkpoint", nargs="+", help="use trained checkpoints instead of training")
    p = sub.add_parser("project", help="2-D PCA of embeddings from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("report", help="summary table over report.json files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", help="write the table to this file")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            cmd_report(args)
            return EXIT_OK
        fixed = {"synth": None, "train": None, "eval": None, "replay": "online_replay", "project": None}[args.command]
        cfg = make_config(load_config(args.config, args.set), args, fixed)
        if args.command == "eval" and cfg.experiment == "online_replay":
            raise ConfigError("use the replay subcommand for online replay")
        {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "replay": cmd_replay, "project": cmd_project}[
            args.command
        ](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RecordingFormatError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
