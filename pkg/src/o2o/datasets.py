"""Offline datasets: generation recipes and the ``O2OD`` binary file format.

File layout (little-endian, no padding)::

    header  "O2OD" | version u32 | id_len u32 | env id (utf-8) | recipe u8
            | state_dim u32 | action_dim u32 | count u64 | seed u64
    record  state f32[state_dim] | action f32[action_dim] | reward f32
            | next_state f32[state_dim] | terminal u8

Values are stored as float32. Generated datasets are rounded to float32 at
creation time so that saving and loading is exact. Metadata that does not fit
the header (behavior-score statistics, episode returns) goes into a JSON
sidecar next to the binary file.

``terminal`` marks real environment termination only; the 200-step time limit
is not a terminal state for bootstrapping.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, List, Optional

import numpy as np
from scipy.spatial import cKDTree

from . import envs
from .envs import EnvSpec
from .numerics import Rng
from .replay import OFFLINE, Transition

MAGIC = b"O2OD"
VERSION = 1
RECIPES = ("medium", "medium_replay")
DEFAULT_SIZE = 50_000
EARLY_STOP_SCORE = 45.0
EARLY_STOP_CHECK = 1_000

_HEAD = struct.Struct("<4sII")
_TAIL = struct.Struct("<BIIQQ")


class DatasetFormatError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


def record_dtype(state_dim: int, action_dim: int) -> np.dtype:
    return np.dtype([
        ("state", "<f4", (state_dim,)), ("action", "<f4", (action_dim,)), ("reward", "<f4"),
        ("next_state", "<f4", (state_dim,)), ("terminal", "u1"),
    ])


def header_size(env_id: str) -> int:
    return _HEAD.size + len(env_id.encode("utf-8")) + _TAIL.size


@dataclass
class OfflineDataset:
    env_id: str
    recipe: str
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    seed: int = 0
    behavior_score_mean: Optional[float] = None
    behavior_score_std: Optional[float] = None
    episode_returns: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.recipe not in RECIPES:
            raise ValueError(f"unknown recipe {self.recipe!r}")
        n = self.states.shape[0]
        for name in ("actions", "rewards", "next_states", "terminals"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, states has {n}")
        if self.next_states.shape[1:] != self.states.shape[1:]:
            raise ValueError("next_states and states disagree in width")

    @property
    def count(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.states[i], self.actions[i], float(self.rewards[i]),
                          self.next_states[i], bool(self.terminals[i]), OFFLINE)

    def __iter__(self) -> Iterator[Transition]:
        return (self[i] for i in range(self.count))

    def metadata(self) -> dict:
        return {
            "env_id": self.env_id, "recipe": self.recipe, "seed": self.seed, "count": self.count,
            "behavior_score_mean": self.behavior_score_mean,
            "behavior_score_std": self.behavior_score_std,
            "episode_returns": list(self.episode_returns),
        }


def _f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _from_rollout(spec: EnvSpec, recipe: str, seed: int, rows: dict, episode_returns) -> OfflineDataset:
    ref = envs.score_reference(spec.id)
    scores = [envs.normalized_score(ref, r) for r in episode_returns]
    return OfflineDataset(
        env_id=spec.id, recipe=recipe,
        states=_f32(rows["states"]).reshape(-1, spec.state_dim),
        actions=_f32(rows["actions"]).reshape(-1, spec.action_dim),
        rewards=_f32(rows["rewards"]).reshape(-1),
        next_states=_f32(rows["next_states"]).reshape(-1, spec.state_dim),
        terminals=np.asarray(rows["terminals"], dtype=bool).reshape(-1),
        seed=seed,
        behavior_score_mean=float(np.mean(scores)) if scores else None,
        behavior_score_std=float(np.std(scores)) if scores else None,
        episode_returns=[float(r) for r in episode_returns],
    )


def generate_medium(spec: EnvSpec, rng: Rng, n_transitions: int) -> OfflineDataset:
    """Roll out the scripted medium policy until ``n_transitions`` are collected.

    Behavior statistics cover completed episodes (the partial last one only if
    nothing else finished).
    """
    if n_transitions < 1:
        raise ValueError("n_transitions must be at least 1")
    env_rng, act_rng = rng.substream("env"), rng.substream("policy")
    rows = {k: [] for k in ("states", "actions", "rewards", "next_states", "terminals")}
    returns, partial = [], None
    collected = 0
    while collected < n_transitions:
        state = envs.reset(spec, env_rng)
        ep_return = 0.0
        while not state.terminal and collected < n_transitions:
            action = envs.medium_action(spec, state.obs[None, :], act_rng)[0]
            nxt, reward = envs.step(spec, state, action)
            rows["states"].append(state.obs)
            rows["actions"].append(action)
            rows["rewards"].append(reward)
            rows["next_states"].append(nxt.obs)
            rows["terminals"].append(nxt.failed)
            ep_return += reward
            collected += 1
            state = nxt
        if state.terminal:
            returns.append(ep_return)
        else:
            partial = ep_return
    if not returns and partial is not None:
        returns.append(partial)
    return _from_rollout(spec, "medium", rng.seed, rows, returns)


def generate_medium_replay(spec: EnvSpec, rng: Rng, n_transitions: int, hyper=None,
                           max_env_steps: int = 200_000, target_score: float = EARLY_STOP_SCORE,
                           check_every: int = EARLY_STOP_CHECK, eval_episodes: int = 10) -> OfflineDataset:
    """Dump the replay buffer of a TD3 agent trained online until it first scores ``target_score``.

    The run starts with ``min_replay_size`` uniformly random actions. The dump
    keeps the newest ``n_transitions`` items; when the agent stops early with
    fewer, the early-stopped policy keeps acting (with exploration noise, no
    further training) until the count is reached.
    """
    from . import agents  # deferred: agents imports replay, which this module also needs

    if n_transitions < 1:
        raise ValueError("n_transitions must be at least 1")
    hyper = hyper or agents.AgentHyper()
    run = agents.run_online_td3(spec, hyper, rng, max_env_steps=max_env_steps, capacity=n_transitions,
                                eval_every=check_every, eval_episodes=eval_episodes,
                                stop_score=target_score, fill_to=n_transitions)
    if not run.reached:
        best = max((r[1] for r in run.evals), default=float("nan"))
        raise GenerationError(
            f"TD3 never reached normalized score {target_score} on {spec.id} within {max_env_steps} "
            f"env steps (best {best:.1f} over {len(run.evals)} evaluations)")
    ring = run.buffer._ring
    order = (ring.head + np.arange(ring.size)) % max(ring.capacity, 1) if ring.size == ring.capacity \
        else np.arange(ring.size)
    rows = dict(states=ring.states[order], actions=ring.actions[order], rewards=ring.rewards[order],
                next_states=ring.next_states[order], terminals=ring.terminals[order] > 0.5)
    return _from_rollout(spec, "medium_replay", rng.seed, rows, run.episode_returns)


def generate(spec: EnvSpec, recipe: str, seed: int, n_transitions: int = DEFAULT_SIZE, **kwargs) -> OfflineDataset:
    rng = Rng(seed).substream(f"dataset/{recipe}")
    if recipe == "medium":
        return generate_medium(spec, rng, n_transitions)
    if recipe == "medium_replay":
        return generate_medium_replay(spec, rng, n_transitions, **kwargs)
    raise ValueError(f"unknown recipe {recipe!r}; choose from {RECIPES}")


# -- file format ---------------------------------------------------------------------------------

def sidecar_path(path) -> str:
    return os.fspath(path) + ".json"


def to_bytes(ds: OfflineDataset) -> bytes:
    env = ds.env_id.encode("utf-8")
    head = _HEAD.pack(MAGIC, VERSION, len(env)) + env + _TAIL.pack(
        RECIPES.index(ds.recipe), ds.state_dim, ds.action_dim, ds.count, ds.seed)
    body = np.zeros(ds.count, dtype=record_dtype(ds.state_dim, ds.action_dim))
    body["state"], body["action"], body["reward"] = ds.states, ds.actions, ds.rewards
    body["next_state"], body["terminal"] = ds.next_states, ds.terminals
    return head + body.tobytes()


def save(ds: OfflineDataset, path) -> None:
    data = to_bytes(ds)
    with open(path, "wb") as f:
        f.write(data)
    with open(sidecar_path(path), "w") as f:
        json.dump(ds.metadata(), f, indent=2, sort_keys=True)
        f.write("\n")


def from_bytes(data: bytes) -> OfflineDataset:
    if len(data) < _HEAD.size:
        raise DatasetFormatError("file too short for a dataset header")
    magic, version, id_len = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported format version {version}")
    pos = _HEAD.size
    if len(data) < pos + id_len + _TAIL.size:
        raise DatasetFormatError("truncated header")
    env_id = data[pos:pos + id_len].decode("utf-8")
    pos += id_len
    recipe, state_dim, action_dim, count, seed = _TAIL.unpack_from(data, pos)
    pos += _TAIL.size
    if recipe >= len(RECIPES):
        raise DatasetFormatError(f"unknown recipe code {recipe}")
    if env_id in envs.ENVS:
        spec = envs.ENVS[env_id]
        if (state_dim, action_dim) != (spec.state_dim, spec.action_dim):
            raise DatasetFormatError(
                f"dims ({state_dim}, {action_dim}) do not match {env_id} "
                f"({spec.state_dim}, {spec.action_dim})")
    dtype = record_dtype(state_dim, action_dim)
    expected = pos + count * dtype.itemsize
    if len(data) != expected:
        raise DatasetFormatError(f"file holds {len(data)} bytes, header implies {expected}")
    body = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    return OfflineDataset(
        env_id=env_id, recipe=RECIPES[recipe],
        states=body["state"].astype(np.float64).reshape(count, state_dim),
        actions=body["action"].astype(np.float64).reshape(count, action_dim),
        rewards=body["reward"].astype(np.float64),
        next_states=body["next_state"].astype(np.float64).reshape(count, state_dim),
        terminals=body["terminal"].astype(bool),
        seed=seed,
    )


def load(path) -> OfflineDataset:
    with open(path, "rb") as f:
        ds = from_bytes(f.read())
    side = sidecar_path(path)
    if os.path.exists(side):
        with open(side) as f:
            meta = json.load(f)
        if (meta.get("env_id"), meta.get("recipe"), meta.get("seed"), meta.get("count")) == \
                (ds.env_id, ds.recipe, ds.seed, ds.count):
            ds.behavior_score_mean = meta.get("behavior_score_mean")
            ds.behavior_score_std = meta.get("behavior_score_std")
            ds.episode_returns = list(meta.get("episode_returns", []))
    return ds


# -- diversity statistics ------------------------------------------------------------------------

def state_coverage(ds: OfflineDataset, rng: Rng, subsample: int = 1000) -> float:
    """Mean nearest-neighbour distance among a random subsample of states (larger = more spread)."""
    n = min(subsample, ds.count)
    if n < 2:
        raise ValueError("need at least two states")
    idx = rng.gen.choice(ds.count, size=n, replace=False)
    pts = ds.states[idx]
    dist, _ = cKDTree(pts).query(pts, k=2)
    return float(dist[:, 1].mean())


def action_spread(ds: OfflineDataset) -> np.ndarray:
    """Per-dimension action standard deviation."""
    return ds.actions.std(axis=0)
