"""TD3, TD3-BC and conservative TD3 (TD3-C) on one actor / twin-critic substrate.

The three kinds differ only in the actor objective:

* TD3    ascends ``mean Q1(s, pi(s))``.
* TD3BC  ascends ``mean[lam * Q1(s, pi(s))] - mean (a - pi(s))^2`` with the adaptive
         weight ``lam = alpha / mean|Q1(s, pi(s))|`` (held constant in the gradient).
* TD3C   ascends ``mean Q1(s, pi(s)) - dual * c`` where
         ``c = mean ||pi(s) - pi_target(s)||^2``; afterwards the dual variable takes a
         projected ascent step ``dual <- max(0, dual + dual_lr * (c - epsilon))``.

In every kind the per-sample action gradient ``dQ1/da`` is clipped to unit norm when
``action_grad_clip`` is on. Update functions mutate the ``ParamSet`` in place.
Noise scales are fractions of the action bound.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from . import envs
from .envs import EnvSpec
from .numerics import (
    HIDDEN, AdamState, MlpParams, NonFiniteError, Rng, adam_step, clip_to_unit_norm, flat_grads,
    mlp_backward_cached, mlp_forward, mlp_forward_cached, mlp_init, polyak_update,
)
from .replay import Batch, Regime, ReplayBuffer, Transition


class AgentKind(str, Enum):
    TD3 = "TD3"
    TD3BC = "TD3BC"
    TD3C = "TD3C"


@dataclass
class AgentHyper:
    discount: float = 0.99
    tau: float = 5e-3
    policy_delay: int = 2
    exploration_noise: float = 0.1
    target_noise: float = 0.2
    target_noise_clip: float = 0.5
    batch_size: int = 256
    policy_lr: float = 3e-4
    critic_lr: float = 3e-4
    bc_alpha: float = 2.5
    epsilon: float = 1e-5
    dual_lr: float = 100.0
    dual_init: float = 0.0
    reset_dual: bool = False
    action_grad_clip: bool = True
    hidden: int = HIDDEN

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.policy_delay < 1:
            raise ValueError("policy_delay must be at least 1")
        if min(self.exploration_noise, self.target_noise, self.target_noise_clip) < 0:
            raise ValueError("noise scales must be non-negative")
        if self.batch_size < 1 or self.hidden < 1:
            raise ValueError("batch_size and hidden must be positive")
        if self.bc_alpha < 0:
            raise ValueError("bc_alpha must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.dual_lr < 0 or self.dual_init < 0:
            raise ValueError("dual_lr and dual_init must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["epsilon"]):
            d["epsilon"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AgentHyper":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hyperparameter(s): {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("epsilon"), str):
            d["epsilon"] = float(d["epsilon"])
        return cls(**d)


@dataclass
class ParamSet:
    actor: MlpParams
    critic1: MlpParams
    critic2: MlpParams
    actor_target: MlpParams
    critic1_target: MlpParams
    critic2_target: MlpParams
    actor_opt: AdamState
    critic1_opt: AdamState
    critic2_opt: AdamState
    dual: float = 0.0
    step: int = 0
    actor_steps: int = 0

    @property
    def action_bound(self) -> float:
        return self.actor.out_scale

    @property
    def state_dim(self) -> int:
        return self.actor.in_dim

    @property
    def action_dim(self) -> int:
        return self.actor.out_dim

    def copy(self) -> "ParamSet":
        return ParamSet(
            self.actor.copy(), self.critic1.copy(), self.critic2.copy(),
            self.actor_target.copy(), self.critic1_target.copy(), self.critic2_target.copy(),
            self.actor_opt.copy(), self.critic1_opt.copy(), self.critic2_opt.copy(),
            self.dual, self.step, self.actor_steps,
        )

    def networks(self) -> dict:
        return {"actor": self.actor, "critic1": self.critic1, "critic2": self.critic2,
                "actor_target": self.actor_target, "critic1_target": self.critic1_target,
                "critic2_target": self.critic2_target}

    def flat(self) -> np.ndarray:
        """Every network parameter concatenated, for equality checks."""
        return np.concatenate([net.flat() for net in self.networks().values()] + [np.array([self.dual])])


def init_params(state_dim: int, action_dim: int, action_bound: float, hyper: AgentHyper, rng: Rng) -> ParamSet:
    actor = mlp_init(rng.substream("actor"), state_dim, action_dim, hyper.hidden, out_scale=action_bound)
    c1 = mlp_init(rng.substream("critic1"), state_dim + action_dim, 1, hyper.hidden)
    c2 = mlp_init(rng.substream("critic2"), state_dim + action_dim, 1, hyper.hidden)
    return ParamSet(
        actor, c1, c2, actor.copy(), c1.copy(), c2.copy(),
        AdamState.zeros_like({"flat": actor.flat()}, lr=hyper.policy_lr),
        AdamState.zeros_like({"flat": c1.flat()}, lr=hyper.critic_lr),
        AdamState.zeros_like({"flat": c2.flat()}, lr=hyper.critic_lr),
        dual=hyper.dual_init,
    )


def init_for_env(spec: EnvSpec, hyper: AgentHyper, rng: Rng) -> ParamSet:
    return init_params(spec.state_dim, spec.action_dim, spec.action_bound, hyper, rng)


def select_action(params: ParamSet, state, mode: str, rng: Optional[Rng], hyper: AgentHyper) -> np.ndarray:
    bound = params.action_bound
    action = mlp_forward(params.actor, state)
    if mode == "explore":
        action = action + rng.normal(0.0, hyper.exploration_noise * bound, action.shape)
    elif mode != "evaluate":
        raise ValueError(f"mode must be 'explore' or 'evaluate', not {mode!r}")
    return np.clip(action, -bound, bound)


def _q(critic: MlpParams, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    return mlp_forward(critic, np.concatenate([s, a], axis=1))[:, 0]


def target_actions(params: ParamSet, next_states: np.ndarray, hyper: AgentHyper, rng: Rng) -> np.ndarray:
    bound = params.action_bound
    a = mlp_forward(params.actor_target, next_states)
    noise = rng.normal(0.0, hyper.target_noise * bound, a.shape)
    clip = hyper.target_noise_clip * bound
    return np.clip(a + np.clip(noise, -clip, clip), -bound, bound)


def critic_target(params: ParamSet, batch: Batch, hyper: AgentHyper, rng: Rng) -> np.ndarray:
    """Bellman target with clipped double-Q and target policy smoothing (one noise draw shared by both critics)."""
    a2 = target_actions(params, batch.next_states, hyper, rng)
    q = np.minimum(_q(params.critic1_target, batch.next_states, a2),
                   _q(params.critic2_target, batch.next_states, a2))
    return batch.rewards + hyper.discount * (1.0 - batch.terminals) * q


def _adam(opt: AdamState, net: MlpParams, grads: dict) -> Tuple[AdamState, MlpParams]:
    opt, new = adam_step(opt, {"flat": net.flat()}, {"flat": flat_grads(grads)})
    return opt, net.from_flat(new["flat"])


def critic_update(params: ParamSet, batch: Batch, hyper: AgentHyper, rng: Rng,
                  target: Optional[np.ndarray] = None) -> dict:
    y = critic_target(params, batch, hyper, rng) if target is None else target
    x = np.concatenate([batch.states, batch.actions], axis=1)
    n = len(batch)
    info = {}
    for name in ("critic1", "critic2"):
        net = getattr(params, name)
        q, cache = mlp_forward_cached(net, x)
        err = q[:, 0] - y
        loss = float(np.mean(err * err))
        if not math.isfinite(loss):
            raise NonFiniteError(f"{name} loss is not finite")
        grads, _ = mlp_backward_cached(net, cache, (2.0 / n) * err[:, None])
        opt, new = _adam(getattr(params, name + "_opt"), net, grads)
        setattr(params, name, new)
        setattr(params, name + "_opt", opt)
        info[name + "_loss"] = loss
    return info


def actor_gradients(kind: AgentKind, params: ParamSet, batch: Batch, hyper: AgentHyper) -> Tuple[dict, dict]:
    """Gradient of the actor loss (the negated objective) and diagnostics, without touching params."""
    kind = AgentKind(kind)
    s = batch.states
    n = s.shape[0]
    pi, actor_cache = mlp_forward_cached(params.actor, s)
    q, q_cache = mlp_forward_cached(params.critic1, np.concatenate([s, pi], axis=1))
    _, dx = mlp_backward_cached(params.critic1, q_cache, np.ones_like(q), need_params=False)
    dq_da = dx[:, params.state_dim:]
    if hyper.action_grad_clip:
        dq_da = clip_to_unit_norm(dq_da)
    q = q[:, 0]
    info = {"q_mean": float(q.mean())}

    if kind is AgentKind.TD3:
        cot = -dq_da / n
    elif kind is AgentKind.TD3BC:
        lam = hyper.bc_alpha / max(float(np.abs(q).mean()), 1e-8)
        diff = pi - batch.actions
        cot = -lam * dq_da / n + (2.0 / diff.size) * diff
        info.update(bc_lambda=lam, bc_mse=float(np.mean(diff * diff)))
    else:
        diff = pi - mlp_forward(params.actor_target, s)
        c_val = float(np.mean(np.sum(diff * diff, axis=1)))
        cot = -dq_da / n + params.dual * (2.0 / n) * diff
        info.update(constraint=c_val)

    grads, _ = mlp_backward_cached(params.actor, actor_cache, cot)
    return grads, info


def actor_update(kind: AgentKind, params: ParamSet, batch: Batch, hyper: AgentHyper) -> dict:
    kind = AgentKind(kind)
    grads, info = actor_gradients(kind, params, batch, hyper)
    params.actor_opt, params.actor = _adam(params.actor_opt, params.actor, grads)
    if kind is AgentKind.TD3C:
        info["dual_before"] = params.dual
        params.dual = max(0.0, params.dual + hyper.dual_lr * (info["constraint"] - hyper.epsilon))
        assert params.dual >= 0.0
        info["dual"] = params.dual
    update_targets(params, hyper.tau)
    params.actor_steps += 1
    return info


def update_targets(params: ParamSet, tau: float) -> None:
    params.actor_target = polyak_update(params.actor_target, params.actor, tau)
    params.critic1_target = polyak_update(params.critic1_target, params.critic1, tau)
    params.critic2_target = polyak_update(params.critic2_target, params.critic2, tau)


def learner_step(kind: AgentKind, params: ParamSet, buffer: ReplayBuffer, rng: Rng, hyper: AgentHyper) -> dict:
    """Sample a batch, update both critics, and the actor on every ``policy_delay``-th call."""
    batch = buffer.sample(hyper.batch_size, rng)
    info = critic_update(params, batch, hyper, rng)
    params.step += 1
    if params.step % hyper.policy_delay == 0:
        info.update(actor_update(kind, params, batch, hyper))
    return info


# -- evaluation and a plain online TD3 driver ----------------------------------------------------

def evaluate_returns(params: ParamSet, spec: EnvSpec, rng: Rng, episodes: int) -> np.ndarray:
    """Returns of ``episodes`` deterministic-policy episodes, run in lockstep."""
    return envs.episode_returns(spec, lambda obs: mlp_forward(params.actor, obs), rng, episodes)


@dataclass
class OnlineRun:
    params: ParamSet
    buffer: ReplayBuffer
    evals: List[Tuple[int, float]] = field(default_factory=list)
    episode_returns: List[float] = field(default_factory=list)
    reached: bool = False
    env_steps: int = 0


def run_online_td3(spec: EnvSpec, hyper: AgentHyper, rng: Rng, max_env_steps: int,
                   capacity: int = 1_000_000, min_size: int = 1000, eval_every: int = 1000,
                   eval_episodes: int = 10, stop_score: Optional[float] = None,
                   fill_to: Optional[int] = None) -> OnlineRun:
    """Train TD3 from scratch online: ``min_size`` random actions, then one learner step per env step.

    With ``stop_score`` set, training stops at the first evaluation reaching it; if
    ``fill_to`` is also set the stopped policy keeps collecting exploratory
    transitions (without learning) until the buffer holds ``fill_to`` items.
    """
    ref = envs.score_reference(spec.id)
    params = init_for_env(spec, hyper, rng.substream("init"))
    buffer = ReplayBuffer(spec.state_dim, spec.action_dim, capacity=capacity,
                          min_size=min(min_size, capacity), regime=Regime.ONLINE_ONLY)
    env_rng, explore_rng = rng.substream("env"), rng.substream("explore")
    learn_rng, eval_rng = rng.substream("learner"), rng.substream("eval")
    run = OnlineRun(params, buffer)
    state = envs.reset(spec, env_rng)
    ep_return = 0.0
    learning = True

    def env_step(state, ep_return):
        if run.env_steps < min_size:
            action = envs.random_action(spec, explore_rng, 1)[0]
        else:
            action = select_action(params, state.obs, "explore", explore_rng, hyper)
        nxt, reward = envs.step(spec, state, action)
        buffer.push(Transition(state.obs, action, reward, nxt.obs, nxt.failed))
        run.env_steps += 1
        ep_return += reward
        if nxt.terminal:
            run.episode_returns.append(ep_return)
            return envs.reset(spec, env_rng), 0.0
        return nxt, ep_return

    while run.env_steps < max_env_steps:
        state, ep_return = env_step(state, ep_return)
        if buffer.ready(hyper.batch_size):
            learner_step(AgentKind.TD3, params, buffer, learn_rng, hyper)
        if run.env_steps % eval_every == 0:
            returns = evaluate_returns(params, spec, eval_rng.substream(str(len(run.evals))), eval_episodes)
            score = envs.normalized_score(ref, float(returns.mean()))
            run.evals.append((run.env_steps, score))
            if stop_score is not None and score >= stop_score:
                run.reached = True
                learning = False
                break
    if not learning and fill_to is not None:
        while buffer.size < fill_to:
            state, ep_return = env_step(state, ep_return)
    return run
