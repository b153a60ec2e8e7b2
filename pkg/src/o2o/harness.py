"""Pretrain -> finetune experiments, evaluation curves, collapse and improvement metrics.

Random streams for one seed all derive from ``Rng(seed)``:

* ``init``: network initialization
* ``pretrain/learner``, ``pretrain/eval``: offline phase
* ``env``, ``explore``, ``learner``, ``eval``: online phase

The online names match ``agents.run_online_td3`` so a run with no pretraining and
an online-only buffer reproduces that driver exactly.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import binomtest

from . import envs
from .agents import AgentHyper, AgentKind, ParamSet, evaluate_returns, init_for_env, learner_step, select_action
from .datasets import OfflineDataset
from .numerics import Rng
from .replay import Regime, ReplayBuffer, Transition

CSV_HEADER = ("learner_step", "phase", "mean_return", "normalized_score", "stddev")
FINAL_WINDOW = 3


@dataclass
class ExperimentConfig:
    env: str = "pointmass2d"
    dataset: Optional[str] = None
    pretrain_agent: AgentKind = AgentKind.TD3BC
    finetune_agent: AgentKind = AgentKind.TD3
    regime: Regime = Regime.PRELOAD_UNIFORM
    ratio: float = 0.5
    pretrain_steps: int = 50_000
    finetune_steps: int = 20_000
    eval_interval: int = 500
    eval_episodes: int = 10
    seeds: List[int] = field(default_factory=lambda: list(range(10)))
    replay_capacity: int = 1_000_000
    min_replay_size: int = 1000
    collapse_window: float = 0.1
    hyper: AgentHyper = field(default_factory=AgentHyper)

    def __post_init__(self):
        self.pretrain_agent = AgentKind(self.pretrain_agent)
        self.finetune_agent = AgentKind(self.finetune_agent)
        self.regime = Regime(self.regime)
        if isinstance(self.hyper, dict):
            self.hyper = AgentHyper.from_dict(self.hyper)
        self.seeds = [int(s) for s in self.seeds]
        self.validate()

    def validate(self) -> None:
        envs.get_env(self.env)
        if self.pretrain_steps < 0 or self.finetune_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.eval_interval < 1 or self.eval_episodes < 1:
            raise ValueError("eval_interval and eval_episodes must be positive")
        for n in (self.pretrain_steps, self.finetune_steps):
            if n % self.eval_interval:
                raise ValueError(f"eval_interval {self.eval_interval} must divide step count {n}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds) or min(self.seeds) < 0:
            raise ValueError("seeds must be distinct non-negative integers")
        if not 0.0 < self.collapse_window <= 1.0:
            raise ValueError("collapse_window must lie in (0, 1]")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("ratio must lie in [0, 1]")
        if not 0 < self.min_replay_size <= self.replay_capacity:
            raise ValueError("need 0 < min_replay_size <= replay_capacity")
        needs_data = self.pretrain_steps > 0 or self.regime is not Regime.ONLINE_ONLY
        if needs_data and not self.dataset:
            raise ValueError("this configuration needs a dataset path")
        self.hyper.validate()

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["pretrain_agent"] = self.pretrain_agent.value
        d["finetune_agent"] = self.finetune_agent.value
        d["regime"] = self.regime.value
        d["seeds"] = list(self.seeds)
        d["hyper"] = self.hyper.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**d)

    @property
    def needs_dataset(self) -> bool:
        return self.pretrain_steps > 0 or self.regime is not Regime.ONLINE_ONLY


@dataclass
class EvalRecord:
    """One evaluation point. ``learner_step`` counts steps within its phase; in the
    finetune phase that is environment steps, each followed by at most one learner step."""
    learner_step: int
    phase: str
    mean_return: float
    normalized_score: float
    stddev: float


@dataclass
class RunResult:
    seed: int
    records: List[EvalRecord]
    offline_final: float
    online_final: float
    delta: float
    collapse_depth: float
    recovery_steps: float

    def phase(self, name: str) -> List[EvalRecord]:
        return [r for r in self.records if r.phase == name]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "offline_final": self.offline_final, "online_final": self.online_final,
                "delta": self.delta, "collapse_depth": self.collapse_depth,
                "recovery_steps": None if math.isinf(self.recovery_steps) else self.recovery_steps}


def evaluate(params: ParamSet, spec: envs.EnvSpec, ref: envs.ScoreReference, rng: Rng, episodes: int,
             step: int, phase: str) -> EvalRecord:
    returns = evaluate_returns(params, spec, rng, episodes)
    mean = float(returns.mean())
    return EvalRecord(step, phase, mean, envs.normalized_score(ref, mean), float(returns.std()))


def final_score(records: Sequence[EvalRecord]) -> float:
    """Mean normalized score over the last few evaluations of a phase."""
    if not records:
        raise ValueError("no evaluation records")
    return float(np.mean([r.normalized_score for r in records[-FINAL_WINDOW:]]))


def _check_dataset(config: ExperimentConfig, dataset: OfflineDataset) -> None:
    if dataset.env_id != config.env:
        raise ValueError(f"dataset is for {dataset.env_id}, config is for {config.env}")
    if dataset.count == 0:
        raise ValueError("dataset is empty")


def pretrain(config: ExperimentConfig, dataset: Optional[OfflineDataset], rng: Rng,
             params: Optional[ParamSet] = None) -> Tuple[ParamSet, List[EvalRecord]]:
    """Offline learner steps on uniform draws from ``dataset``; evaluates at step 0 and every interval."""
    spec, ref, hyper = envs.get_env(config.env), envs.score_reference(config.env), config.hyper
    if params is None:
        params = init_for_env(spec, hyper, rng.substream("init"))
    prng = rng.substream("pretrain")
    learn_rng, eval_rng = prng.substream("learner"), prng.substream("eval")
    records = [evaluate(params, spec, ref, eval_rng.substream("0"), config.eval_episodes, 0, "pretrain")]
    if config.pretrain_steps == 0:
        return params, records
    _check_dataset(config, dataset)
    buffer = ReplayBuffer(spec.state_dim, spec.action_dim, capacity=dataset.count, min_size=1).preload(dataset)
    for step in range(1, config.pretrain_steps + 1):
        learner_step(config.pretrain_agent, params, buffer, learn_rng, hyper)
        if step % config.eval_interval == 0:
            records.append(evaluate(params, spec, ref, eval_rng.substream(str(len(records))),
                                    config.eval_episodes, step, "pretrain"))
    return params, records


def collapse_metrics(records: Sequence[EvalRecord], offline_final: float,
                     window_fraction: float = 0.1) -> Tuple[float, float]:
    """(collapse_depth, recovery_steps) over finetune-phase records.

    Depth is how far the worst score in the first ``window_fraction`` of evaluations
    falls below ``offline_final``; recovery is the first step scoring at least
    ``offline_final`` again, or ``inf``.
    """
    if not records:
        raise ValueError("no finetune records")
    window = max(1, math.ceil(window_fraction * len(records)))
    worst = min(r.normalized_score for r in records[:window])
    depth = max(0.0, offline_final - worst)
    recovery = next((float(r.learner_step) for r in records if r.normalized_score >= offline_final), math.inf)
    return depth, recovery


def finetune(config: ExperimentConfig, params: ParamSet, dataset: Optional[OfflineDataset], rng: Rng,
             seed: int = 0, pretrain_records: Sequence[EvalRecord] = ()) -> RunResult:
    """Online phase: one exploratory env step, one push, then one learner step once the buffer is ready.

    Without pretraining the first ``min_replay_size`` actions are uniformly random.
    """
    spec, ref, hyper = envs.get_env(config.env), envs.score_reference(config.env), config.hyper
    kind = config.finetune_agent
    if hyper.reset_dual:
        params.dual = hyper.dual_init
    buffer = ReplayBuffer(spec.state_dim, spec.action_dim, capacity=config.replay_capacity,
                          min_size=config.min_replay_size, regime=config.regime, ratio=config.ratio)
    if config.regime is not Regime.ONLINE_ONLY:
        _check_dataset(config, dataset)
        buffer.preload(dataset)
    env_rng, explore_rng = rng.substream("env"), rng.substream("explore")
    learn_rng, eval_rng = rng.substream("learner"), rng.substream("eval")
    random_warmup = config.min_replay_size if config.pretrain_steps == 0 else 0

    records: List[EvalRecord] = []
    state = envs.reset(spec, env_rng)
    for step in range(1, config.finetune_steps + 1):
        if step <= random_warmup:
            action = envs.random_action(spec, explore_rng, 1)[0]
        else:
            action = select_action(params, state.obs, "explore", explore_rng, hyper)
        nxt, reward = envs.step(spec, state, action)
        buffer.push(Transition(state.obs, action, reward, nxt.obs, nxt.failed))
        state = envs.reset(spec, env_rng) if nxt.terminal else nxt
        if buffer.ready(hyper.batch_size):
            learner_step(kind, params, buffer, learn_rng, hyper)
        if step % config.eval_interval == 0:
            records.append(evaluate(params, spec, ref, eval_rng.substream(str(len(records))),
                                    config.eval_episodes, step, "finetune"))

    pre = list(pretrain_records)
    offline_final = final_score(pre) if pre else final_score(records[:1]) if records else 0.0
    online_final = final_score(records) if records else offline_final
    depth, recovery = collapse_metrics(records, offline_final, config.collapse_window) if records else (0.0, math.inf)
    return RunResult(seed, pre + records, offline_final, online_final, online_final - offline_final, depth, recovery)


def run_seed(config: ExperimentConfig, dataset: Optional[OfflineDataset], seed: int) -> RunResult:
    rng = Rng(seed)
    params, pre = pretrain(config, dataset, rng)
    return finetune(config, params, dataset, rng, seed=seed, pretrain_records=pre)


# -- aggregation and files -----------------------------------------------------------------------

def _stats(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "median": float(np.median(arr))}


def aggregate(results: Sequence[RunResult], config: Optional[ExperimentConfig] = None,
              task: Optional[str] = None) -> dict:
    """Mean/std/median of the per-seed metrics plus one table row."""
    if not results:
        raise ValueError("no results to aggregate")
    finite_rec = [r.recovery_steps for r in results if not math.isinf(r.recovery_steps)]
    summary = {
        "task": task,
        "agent": config.finetune_agent.value if config else None,
        "pretrain_agent": (config.pretrain_agent.value if config.pretrain_steps else None) if config else None,
        "regime": config.regime.value if config else None,
        "n_seeds": len(results),
        "offline": _stats([r.offline_final for r in results]),
        "online": _stats([r.online_final for r in results]),
        "delta": _stats([r.delta for r in results]),
        "collapse_depth": _stats([r.collapse_depth for r in results]),
        "recovery_steps": {"recovered": len(finite_rec),
                           "median": float(np.median(finite_rec)) if finite_rec else None},
        "final_smoothing": f"mean of last {FINAL_WINDOW} evaluations",
        "seeds": [r.to_dict() for r in results],
    }
    summary["row"] = table_row(summary)
    return summary


def table_row(summary: dict) -> dict:
    """Offline / Online / delta columns as printed, with delta recomputed from the rounded columns."""
    off = round(summary["offline"]["mean"], 2)
    on = round(summary["online"]["mean"], 2)
    return {"task": summary.get("task"), "agent": summary.get("agent"), "regime": summary.get("regime"),
            "offline": f"{off:.2f}", "online": f"{on:.2f}", "delta": f"{on - off:.2f}",
            "collapse_depth": f"{summary['collapse_depth']['mean']:.2f}"}


def metrics_csv(records: Sequence[EvalRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow([r.learner_step, r.phase, repr(r.mean_return), repr(r.normalized_score), repr(r.stddev)])
    return buf.getvalue()


def read_metrics_csv(text: str) -> List[EvalRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError("not a metrics file")
    return [EvalRecord(int(r[0]), r[1], float(r[2]), float(r[3]), float(r[4])) for r in rows[1:]]


def result_from_records(seed: int, records: Sequence[EvalRecord], window_fraction: float = 0.1) -> RunResult:
    """Rebuild a RunResult (finals, delta, collapse) from stored records alone."""
    pre = [r for r in records if r.phase == "pretrain"]
    fin = [r for r in records if r.phase == "finetune"]
    offline = final_score(pre) if pre else final_score(fin[:1])
    online = final_score(fin) if fin else offline
    depth, rec = collapse_metrics(fin, offline, window_fraction) if fin else (0.0, math.inf)
    return RunResult(seed, list(records), offline, online, online - offline, depth, rec)


def dump_json(obj, path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _seed_worker(args):
    config_dict, dataset_path, seed = args
    from .datasets import load
    config = ExperimentConfig.from_dict(config_dict)
    dataset = load(dataset_path) if dataset_path else None
    return run_seed(config, dataset, seed)


def run_experiment(config: ExperimentConfig, dataset: Optional[OfflineDataset] = None,
                   out_dir=None, parallel: int = 1, task: Optional[str] = None) -> Tuple[List[RunResult], Dict]:
    """Run every seed, write ``seed_<k>.csv`` files and ``summary.json`` when ``out_dir`` is given.

    A failing seed is recorded under ``failures`` and the remaining seeds still run.
    """
    if dataset is None and config.needs_dataset:
        from .datasets import load
        dataset = load(config.dataset)
    if task is None:
        task = config.env if dataset is None else f"{config.env}-{dataset.recipe}"
    results: List[RunResult] = []
    failures: Dict[int, str] = {}
    if parallel > 1 and len(config.seeds) > 1:
        path = config.dataset if config.needs_dataset else None
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = {s: pool.submit(_seed_worker, (config.to_dict(), path, s)) for s in config.seeds}
            for s, fut in futures.items():
                try:
                    results.append(fut.result())
                except Exception as exc:
                    failures[s] = f"{type(exc).__name__}: {exc}"
    else:
        for s in config.seeds:
            try:
                results.append(run_seed(config, dataset, s))
            except Exception as exc:
                failures[s] = f"{type(exc).__name__}: {exc}"
                traceback.print_exc()
    summary = aggregate(results, config, task) if results else {"task": task, "seeds": []}
    summary["failures"] = {str(k): v for k, v in sorted(failures.items())}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for r in results:
            with open(os.path.join(out_dir, f"seed_{r.seed}.csv"), "w", newline="") as f:
                f.write(metrics_csv(r.records))
        dump_json(summary, os.path.join(out_dir, "summary.json"))
        dump_json(config.to_dict(), os.path.join(out_dir, "config.json"))
    return results, summary


def sign_test(greater: Sequence[float], lesser: Sequence[float]) -> Tuple[int, int, float]:
    """One-sided paired sign test that ``greater`` exceeds ``lesser``; ties are dropped.

    Returns (wins, non-tied pairs, p-value).
    """
    diff = np.asarray(greater, dtype=np.float64) - np.asarray(lesser, dtype=np.float64)
    wins, n = int((diff > 0).sum()), int((diff != 0).sum())
    if n == 0:
        return 0, 0, 1.0
    return wins, n, float(binomtest(wins, n, 0.5, alternative="greater").pvalue)
