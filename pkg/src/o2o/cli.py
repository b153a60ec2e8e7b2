"""Command-line entry point: ``generate-dataset``, ``run`` and ``report``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Outputs default to ``$O2O_OUT_DIR`` (or ``./o2o_out``) when no path is given.
"""
from __future__ import annotations

import argparse
import csv
import glob
import json
import os
import sys
from typing import List, Optional

import numpy as np

from . import datasets, envs, harness
from .agents import AgentHyper

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
RUN_ONLY_KEYS = ("out_dir", "dataset_recipe", "dataset_seed", "dataset_size")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def default_out_root() -> str:
    return os.environ.get("O2O_OUT_DIR") or "o2o_out"


def _write_atomic(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


# -- generate-dataset ----------------------------------------------------------------------------

def cmd_generate_dataset(args) -> int:
    if args.env not in envs.ENVS:
        raise UsageError(f"unknown env {args.env!r}; choose from {sorted(envs.ENVS)}")
    if args.recipe not in datasets.RECIPES:
        raise UsageError(f"unknown recipe {args.recipe!r}; choose from {list(datasets.RECIPES)}")
    if args.size < 1 or args.seed < 0:
        raise UsageError("--size must be positive and --seed non-negative")
    out = args.out or os.path.join(default_out_root(), f"{args.env}_{args.recipe}_{args.seed}.bin")
    kwargs = {}
    if args.recipe == "medium_replay" and args.hidden:
        kwargs["hyper"] = AgentHyper(hidden=args.hidden)
    ds = datasets.generate(envs.get_env(args.env), args.recipe, args.seed, args.size, **kwargs)
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    datasets.save(ds, out)
    print(f"wrote {ds.count} transitions to {out} (behavior score {ds.behavior_score_mean:.2f})")
    return EXIT_OK


# -- run -----------------------------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: List[str]) -> dict:
    """Apply ``key=value`` overrides (``hyper.key`` reaches into the hyperparameters)."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        target = doc
        *parents, leaf = key.split(".")
        for p in parents:
            target = target.setdefault(p, {})
            if not isinstance(target, dict):
                raise UsageError(f"cannot set {key!r}")
        target[leaf] = _parse_value(value)
    return doc


def load_run_config(doc: dict):
    """Split a CLI config document into (ExperimentConfig, run-only options); raises UsageError."""
    extra = {k: doc[k] for k in RUN_ONLY_KEYS if k in doc}
    core = {k: v for k, v in doc.items() if k not in RUN_ONLY_KEYS}
    try:
        config = harness.ExperimentConfig.from_dict(core)
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    if "dataset_recipe" in extra and extra["dataset_recipe"] not in datasets.RECIPES:
        raise UsageError(f"invalid config: unknown dataset_recipe {extra['dataset_recipe']!r}")
    return config, extra


def cmd_run(args) -> int:
    try:
        with open(args.config) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    overrides = list(args.set or [])
    if args.dataset:
        overrides.append(f"dataset={json.dumps(args.dataset)}")
    if args.seeds:
        overrides.append(f"seeds={json.dumps(args.seeds)}")
    doc = apply_overrides(doc, overrides)
    config, extra = load_run_config(doc)
    if args.parallel < 1:
        raise UsageError("--parallel must be at least 1")
    stem = os.path.splitext(os.path.basename(args.config))[0]
    out_dir = args.out or extra.get("out_dir") or os.path.join(default_out_root(), stem)

    dataset = None
    if config.needs_dataset:
        if not os.path.exists(config.dataset):
            if "dataset_recipe" not in extra:
                raise UsageError(f"dataset {config.dataset} does not exist")
            ds = datasets.generate(envs.get_env(config.env), extra["dataset_recipe"],
                                   int(extra.get("dataset_seed", 0)),
                                   int(extra.get("dataset_size", datasets.DEFAULT_SIZE)))
            os.makedirs(os.path.dirname(os.path.abspath(config.dataset)), exist_ok=True)
            datasets.save(ds, config.dataset)
        try:
            dataset = datasets.load(config.dataset)
        except (OSError, datasets.DatasetFormatError) as exc:
            raise UsageError(f"cannot load dataset: {exc}") from exc
        if dataset.env_id != config.env:
            raise UsageError(f"dataset is for {dataset.env_id}, config is for {config.env}")

    os.makedirs(out_dir, exist_ok=True)
    results, summary = harness.run_experiment(config, dataset, out_dir=None, parallel=args.parallel)
    for r in results:
        _write_atomic(os.path.join(out_dir, f"seed_{r.seed}.csv"), harness.metrics_csv(r.records).encode())
    effective = {**config.to_dict(), **extra, "out_dir": out_dir}
    harness.dump_json(summary, os.path.join(out_dir, "summary.json"))
    harness.dump_json(effective, os.path.join(out_dir, "config.json"))
    for seed, msg in summary["failures"].items():
        print(f"seed {seed} failed: {msg}", file=sys.stderr)
    if results:
        row = summary["row"]
        print(f"{row['task']} {row['agent']}: offline {row['offline']} online {row['online']} "
              f"delta {row['delta']} collapse {row['collapse_depth']} -> {out_dir}")
    return EXIT_RUNTIME if summary["failures"] else EXIT_OK


# -- report --------------------------------------------------------------------------------------

REPORT_COLUMNS = ("Task", "Agent", "Regime", "Offline", "Online", "δ", "collapse_depth")


def find_summaries(paths: List[str]) -> List[str]:
    found = []
    for p in paths:
        if os.path.isfile(p):
            found.append(p)
        else:
            found.extend(sorted(glob.glob(os.path.join(p, "**", "summary.json"), recursive=True)))
    return found


def mean_curve(run_dir: str) -> List[tuple]:
    """(phase, learner_step, mean score, std score, n seeds) averaged over ``seed_*.csv``."""
    acc = {}
    for path in sorted(glob.glob(os.path.join(run_dir, "seed_*.csv"))):
        with open(path) as f:
            for r in harness.read_metrics_csv(f.read()):
                acc.setdefault((r.phase, r.learner_step), []).append(r.normalized_score)
    order = {"pretrain": 0, "finetune": 1}
    rows = []
    for (phase, step), vals in sorted(acc.items(), key=lambda kv: (order.get(kv[0][0], 2), kv[0][1])):
        rows.append((phase, step, float(np.mean(vals)), float(np.std(vals)), len(vals)))
    return rows


def render_table(rows: List[dict]) -> str:
    cells = [REPORT_COLUMNS] + [tuple(str(r[k]) for k in ("task", "agent", "regime", "offline", "online",
                                                           "delta", "collapse_depth")) for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(REPORT_COLUMNS))]
    lines = [" | ".join(c[i].ljust(widths[i]) for i in range(len(widths))).rstrip() for c in cells]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    paths = find_summaries(args.inputs)
    if not paths:
        raise UsageError(f"no summary.json found under {', '.join(args.inputs)}; run `o2o run` first")
    rows, labels = [], []
    for path in paths:
        try:
            with open(path) as f:
                summary = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read {path}: {exc}") from exc
        if "row" not in summary:
            print(f"skipping {path}: no completed seeds", file=sys.stderr)
            continue
        rows.append(harness.table_row(summary))
        labels.append(os.path.dirname(os.path.abspath(path)))
    if not rows:
        raise UsageError("no summary contains results")
    out = args.out or os.path.join(default_out_root(), "report")
    os.makedirs(os.path.join(out, "curves"), exist_ok=True)
    table = render_table(rows)
    with open(os.path.join(out, "report.txt"), "w") as f:
        f.write(table)
    with open(os.path.join(out, "report.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS + ("source",))
        for r, label in zip(rows, labels):
            w.writerow([r["task"], r["agent"], r["regime"], r["offline"], r["online"], r["delta"],
                        r["collapse_depth"], label])
    used = set()
    for label in labels:
        name = os.path.basename(label) or "run"
        while name in used:
            name += "_"
        used.add(name)
        with open(os.path.join(out, "curves", f"{name}.csv"), "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("phase", "learner_step", "mean_score", "std_score", "n_seeds"))
            for phase, step, m, s, n in mean_curve(label):
                w.writerow((phase, step, repr(m), repr(s), n))
    sys.stdout.write(table)
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="o2o", description="Offline-to-online RL finetuning testbed")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate-dataset", help="generate an offline dataset file")
    g.add_argument("--env", required=True)
    g.add_argument("--recipe", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=datasets.DEFAULT_SIZE)
    g.add_argument("--out")
    g.add_argument("--hidden", type=int, help="network width of the medium-replay TD3 run")
    g.set_defaults(func=cmd_generate_dataset)

    r = sub.add_parser("run", help="pretrain and finetune for every seed of a config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="output directory (default $O2O_OUT_DIR/<config name>)")
    r.add_argument("--dataset", help="override the dataset path")
    r.add_argument("--seeds", type=int, nargs="+", help="override the seed list")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (JSON value)")
    r.add_argument("--parallel", type=int, default=1, help="seeds run concurrently")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="merge summaries into one table and curve CSVs")
    rep.add_argument("inputs", nargs="+", help="run directories or summary.json files")
    rep.add_argument("--out", help="report directory (default $O2O_OUT_DIR/report)")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
