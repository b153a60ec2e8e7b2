"""Deterministic toy control tasks standing in for the MuJoCo benchmarks.

PointMass2D
    state ``(x, y, vx, vy)``, action ``(ax, ay)`` in ``[-1, 1]^2``. Damped double
    integrator with time step ``dt``::

        v' = v + dt * (a - damping * v)
        p' = clip(p + dt * v', -wall, wall)       (velocity along a hit wall is zeroed)

    reward ``-||p' - goal||`` with the goal at the origin. Episodes start at rest
    with the position uniform in ``[0.8, 1.0]^2`` and last 200 steps. Never terminal.

Pendulum1D
    observation ``(cos th, sin th, thdot)`` with ``th = 0`` upright, torque in ``[-2, 2]``::

        thdot' = thdot + dt * (1.5 * g * sin th + 3 * u)      (clipped to +-max_speed)
        th'    = th + dt * thdot'

    reward ``-(wrap(th)^2 + 0.1 thdot^2 + 0.001 u^2)`` evaluated before the move.
    Episodes start hanging, ``th`` in ``pi +- 0.05`` and ``thdot`` in ``+-0.05``, and
    last 200 steps. The ``pendulum1d-fail`` variant drops the speed clip and instead
    terminates once ``|thdot'|`` exceeds ``max_speed``.

Scripted policies: ``expert`` is a PD controller (PointMass2D) or energy pumping
with a PD balancer near the top (Pendulum1D). ``medium`` runs the same controller
with its gains scaled by ``medium_gain`` plus Gaussian action noise
``medium_noise * action_bound``; both knobs were tuned once so the medium score
lands in the 40-70 normalized band.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Callable, Dict, Tuple

import numpy as np

from .numerics import NonFiniteError, Rng


@dataclass(frozen=True)
class EnvSpec:
    id: str
    state_dim: int
    action_dim: int
    action_bound: float
    episode_length: int
    dynamics: Dict[str, float] = field(default_factory=dict)
    medium_gain: float = 1.0
    medium_noise: float = 0.0

    def __post_init__(self):
        if self.action_bound <= 0:
            raise ValueError("action_bound must be positive")
        if self.episode_length < 1:
            raise ValueError("episode_length must be at least 1")


@dataclass
class EnvState:
    obs: np.ndarray
    physical: np.ndarray  # internal coordinates; differs from obs for the pendulum
    t: int = 0
    terminal: bool = False  # episode over: failure or time limit
    failed: bool = False  # entered the failure set; the only case that stops bootstrapping
    action_clipped: bool = False


@dataclass(frozen=True)
class ScoreReference:
    env_id: str
    random_return: float
    expert_return: float

    def __post_init__(self):
        if not self.expert_return > self.random_return:
            raise ValueError(f"expert_return must exceed random_return for {self.env_id}")


POINTMASS = EnvSpec(
    id="pointmass2d", state_dim=4, action_dim=2, action_bound=1.0, episode_length=200,
    dynamics={"dt": 0.1, "damping": 1.0, "wall": 2.0, "kp": 4.0, "kd": 3.0,
              "init_low": 0.8, "init_high": 1.0},
    medium_gain=0.02, medium_noise=0.1,
)

PENDULUM = EnvSpec(
    id="pendulum1d", state_dim=3, action_dim=1, action_bound=2.0, episode_length=200,
    dynamics={"dt": 0.05, "g": 10.0, "max_speed": 8.0, "fail_on_speed": 0.0,
              "pump_gain": 1.0, "kp": 10.0, "kd": 2.0, "switch_angle": 0.4,
              "init_angle": 0.05, "init_speed": 0.05},
    medium_gain=0.2, medium_noise=0.1,
)

PENDULUM_FAIL = replace(PENDULUM, id="pendulum1d-fail",
                        dynamics={**PENDULUM.dynamics, "fail_on_speed": 1.0})

ENVS: Dict[str, EnvSpec] = {s.id: s for s in (POINTMASS, PENDULUM, PENDULUM_FAIL)}


def get_env(env_id: str) -> EnvSpec:
    try:
        return ENVS[env_id]
    except KeyError:
        raise KeyError(f"unknown environment {env_id!r}; choose from {sorted(ENVS)}") from None


def _is_pendulum(spec: EnvSpec) -> bool:
    return spec.id.startswith("pendulum1d")


def wrap_angle(th):
    return (th + np.pi) % (2 * np.pi) - np.pi


# -- vectorized core: leading axis is the episode index --------------------------------------------

def init_physical(spec: EnvSpec, rng: Rng, n: int) -> np.ndarray:
    d = spec.dynamics
    if _is_pendulum(spec):
        th = np.pi + rng.uniform(-d["init_angle"], d["init_angle"], n)
        thdot = rng.uniform(-d["init_speed"], d["init_speed"], n)
        return np.stack([th, thdot], axis=1)
    pos = rng.uniform(d["init_low"], d["init_high"], (n, 2))
    return np.concatenate([pos, np.zeros((n, 2))], axis=1)


def observe(spec: EnvSpec, physical: np.ndarray) -> np.ndarray:
    if _is_pendulum(spec):
        th, thdot = physical[..., 0], physical[..., 1]
        return np.stack([np.cos(th), np.sin(th), thdot], axis=-1)
    return physical.copy()


def advance(spec: EnvSpec, physical: np.ndarray, action: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One step of the dynamics for already-clipped actions. Returns (physical', reward, failed)."""
    d = spec.dynamics
    if _is_pendulum(spec):
        th, thdot = physical[..., 0], physical[..., 1]
        u = action[..., 0]
        reward = -(wrap_angle(th) ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2)
        new_thdot = thdot + d["dt"] * (1.5 * d["g"] * np.sin(th) + 3.0 * u)
        if d["fail_on_speed"]:
            failed = np.abs(new_thdot) > d["max_speed"]
        else:
            new_thdot = np.clip(new_thdot, -d["max_speed"], d["max_speed"])
            failed = np.zeros(th.shape, dtype=bool)
        new_th = th + d["dt"] * new_thdot
        return np.stack([new_th, new_thdot], axis=-1), reward, failed

    pos, vel = physical[..., :2], physical[..., 2:]
    vel = vel + d["dt"] * (action - d["damping"] * vel)
    pos = pos + d["dt"] * vel
    hit = np.abs(pos) > d["wall"]
    pos = np.clip(pos, -d["wall"], d["wall"])
    vel = np.where(hit, 0.0, vel)
    reward = -np.linalg.norm(pos, axis=-1)
    return np.concatenate([pos, vel], axis=-1), reward, np.zeros(reward.shape, dtype=bool)


def clip_action(spec: EnvSpec, action) -> np.ndarray:
    action = np.asarray(action, dtype=np.float64)
    if not np.all(np.isfinite(action)):
        raise NonFiniteError("non-finite action")
    return np.clip(action, -spec.action_bound, spec.action_bound)


# -- single-episode interface ----------------------------------------------------------------------

def reset(spec: EnvSpec, rng: Rng) -> EnvState:
    phys = init_physical(spec, rng, 1)[0]
    return EnvState(obs=observe(spec, phys), physical=phys)


def step(spec: EnvSpec, state: EnvState, action) -> Tuple[EnvState, float]:
    if state.terminal:
        raise RuntimeError("step() called on a terminal state; reset first")
    action = np.asarray(action, dtype=np.float64).reshape(spec.action_dim)
    clipped = clip_action(spec, action)
    phys, reward, failed = advance(spec, state.physical, clipped)
    t = state.t + 1
    nxt = EnvState(
        obs=observe(spec, phys), physical=phys, t=t,
        terminal=bool(failed) or t >= spec.episode_length,
        failed=bool(failed),
        action_clipped=bool(np.any(clipped != action)),
    )
    return nxt, float(reward)


# -- scripted policies -----------------------------------------------------------------------------

def expert_action(spec: EnvSpec, obs: np.ndarray, gain: float = 1.0) -> np.ndarray:
    d = spec.dynamics
    obs = np.asarray(obs, dtype=np.float64)
    if _is_pendulum(spec):
        th = np.arctan2(obs[..., 1], obs[..., 0])
        thdot = obs[..., 2]
        energy = 0.5 * thdot ** 2 + 1.5 * d["g"] * (np.cos(th) - 1.0)
        pump = d["pump_gain"] * gain * (-energy) * np.where(thdot >= 0, 1.0, -1.0)
        balance = -gain * (d["kp"] * th + d["kd"] * thdot)
        u = np.where(np.abs(th) < d["switch_angle"], balance, pump)[..., None]
    else:
        u = -gain * (d["kp"] * obs[..., :2] + d["kd"] * obs[..., 2:])
    return np.clip(u, -spec.action_bound, spec.action_bound)


def medium_action(spec: EnvSpec, obs: np.ndarray, rng: Rng) -> np.ndarray:
    base = expert_action(spec, obs, gain=spec.medium_gain)
    noise = rng.normal(0.0, spec.medium_noise * spec.action_bound, base.shape)
    return np.clip(base + noise, -spec.action_bound, spec.action_bound)


def random_action(spec: EnvSpec, rng: Rng, n: int) -> np.ndarray:
    return rng.uniform(-spec.action_bound, spec.action_bound, (n, spec.action_dim))


def scripted_policy(spec: EnvSpec, name: str, rng: Rng) -> Callable[[np.ndarray], np.ndarray]:
    if name == "expert":
        return lambda obs: expert_action(spec, obs)
    if name == "medium":
        return lambda obs: medium_action(spec, obs, rng)
    if name == "random":
        return lambda obs: random_action(spec, rng, obs.shape[0])
    raise ValueError(f"unknown scripted policy {name!r}")


def episode_returns(spec: EnvSpec, policy: Callable[[np.ndarray], np.ndarray], rng: Rng,
                    n_episodes: int) -> np.ndarray:
    """Run ``n_episodes`` in lockstep; ``policy`` maps an (n, state_dim) batch to actions."""
    phys = init_physical(spec, rng, n_episodes)
    alive = np.ones(n_episodes, dtype=bool)
    returns = np.zeros(n_episodes)
    for _ in range(spec.episode_length):
        action = clip_action(spec, policy(observe(spec, phys)))
        phys, reward, failed = advance(spec, phys, action)
        returns += np.where(alive, reward, 0.0)
        alive &= ~failed
        if not alive.any():
            break
    return returns


# -- score normalization ---------------------------------------------------------------------------

def normalized_score(ref: ScoreReference, episodic_return) -> float:
    span = ref.expert_return - ref.random_return
    if span == 0:
        raise ValueError("expert and random returns coincide")
    return 100.0 * (episodic_return - ref.random_return) / span


def derive_score_reference(spec: EnvSpec, seed: int = 0, episodes: int = 1000) -> ScoreReference:
    rng = Rng(seed).substream(f"score-ref/{spec.id}")
    rand = episode_returns(spec, scripted_policy(spec, "random", rng.substream("policy")),
                          rng.substream("random"), episodes)
    expert = episode_returns(spec, scripted_policy(spec, "expert", rng.substream("policy")),
                            rng.substream("expert"), episodes)
    return ScoreReference(spec.id, float(rand.mean()), float(expert.mean()))


_REFS: Dict[str, ScoreReference] = {}


def score_reference(env_id: str) -> ScoreReference:
    if not _REFS:
        text = resources.files("o2o").joinpath("data/score_refs.json").read_text()
        for doc in json.loads(text):
            _REFS[doc["env_id"]] = ScoreReference(**doc)
    try:
        return _REFS[env_id]
    except KeyError:
        raise KeyError(f"no score reference stored for {env_id!r}") from None


def write_score_references(path, seed: int = 0, episodes: int = 1000) -> None:
    docs = []
    for spec in ENVS.values():
        ref = derive_score_reference(spec, seed, episodes)
        docs.append({"env_id": ref.env_id, "random_return": ref.random_return,
                     "expert_return": ref.expert_return})
    with open(path, "w") as f:
        json.dump(docs, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    import sys

    out = sys.argv[1] if len(sys.argv) > 1 else "score_refs.json"
    write_score_references(out)
    print(open(out).read(), end="")
