"""Replay buffer with the three finetuning sampling regimes.

``PRELOAD_UNIFORM``
    the offline dataset is copied in before finetuning and every stored item is
    sampled uniformly; new online items push the oldest items out.
``ONLINE_ONLY``
    no offline data; sampling starts once ``min_size`` online items exist.
``FIXED_RATIO``
    offline and online items live in separate FIFO stores and each batch holds
    exactly ``round(ratio * batch_size)`` offline draws (half rounds up).

All sampling is uniform with replacement.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .numerics import Rng

OFFLINE, ONLINE = 0, 1


class Regime(str, Enum):
    PRELOAD_UNIFORM = "preload_uniform"
    ONLINE_ONLY = "online_only"
    FIXED_RATIO = "fixed_ratio"


class ReplayError(RuntimeError):
    pass


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool
    provenance: int = ONLINE


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray  # float 0/1
    provenance: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]


class _Ring:
    """FIFO store on numpy arrays that grows geometrically up to ``capacity``."""

    def __init__(self, state_dim: int, action_dim: int, capacity: int):
        self.capacity = capacity
        self.state_dim, self.action_dim = state_dim, action_dim
        self.size = 0
        self.head = 0  # slot of the oldest item once the ring is full
        self._alloc(min(capacity, 1024))

    def _alloc(self, n: int) -> None:
        old = getattr(self, "states", None)
        fields = dict(states=(n, self.state_dim), actions=(n, self.action_dim), rewards=(n,),
                      next_states=(n, self.state_dim), terminals=(n,))
        for name, shape in fields.items():
            arr = np.zeros(shape)
            if old is not None:
                arr[: self.size] = getattr(self, name)[: self.size]
            setattr(self, name, arr)
        prov = np.zeros(n, dtype=np.int8)
        if old is not None:
            prov[: self.size] = self.provenance[: self.size]
        self.provenance = prov

    def append(self, s, a, r, s2, term, prov) -> Optional[int]:
        """Store one item; returns the provenance of the evicted item, if any."""
        evicted = None
        if self.size < self.capacity:
            if self.size == self.states.shape[0]:
                self._alloc(min(self.capacity, 2 * self.size))
            i = self.size
            self.size += 1
        else:
            i = self.head
            evicted = int(self.provenance[i])
            self.head = (self.head + 1) % self.capacity
        self.states[i], self.actions[i], self.rewards[i] = s, a, r
        self.next_states[i], self.terminals[i], self.provenance[i] = s2, float(term), prov
        return evicted

    def gather(self, idx: np.ndarray) -> Batch:
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.terminals[idx], self.provenance[idx])


def _concat(a: Batch, b: Batch) -> Batch:
    return Batch(*(np.concatenate([x, y]) for x, y in zip(
        (a.states, a.actions, a.rewards, a.next_states, a.terminals, a.provenance),
        (b.states, b.actions, b.rewards, b.next_states, b.terminals, b.provenance))))


class ReplayBuffer:
    def __init__(self, state_dim: int, action_dim: int, capacity: int = 1_000_000,
                 min_size: int = 1000, regime: Regime = Regime.PRELOAD_UNIFORM, ratio: float = 0.5):
        regime = Regime(regime)
        if capacity < 1 or not 0 < min_size <= capacity:
            raise ValueError("need 0 < min_size <= capacity")
        if not 0.0 <= ratio <= 1.0:
            raise ValueError("ratio must lie in [0, 1]")
        self.state_dim, self.action_dim = state_dim, action_dim
        self.capacity, self.min_size, self.regime, self.ratio = capacity, min_size, regime, ratio
        self._preloaded = False
        self.n_offline = 0
        self.n_online = 0
        if regime is Regime.FIXED_RATIO:
            self._offline = _Ring(state_dim, action_dim, capacity)
            self._online: Optional[_Ring] = None  # sized on first push from what preload left free
        else:
            self._ring = _Ring(state_dim, action_dim, capacity)

    @property
    def size(self) -> int:
        return self.n_offline + self.n_online

    def __len__(self) -> int:
        return self.size

    def preload(self, dataset) -> "ReplayBuffer":
        """Copy an ``OfflineDataset`` in as offline items, keeping the newest ``capacity`` of them."""
        if self.regime is Regime.ONLINE_ONLY:
            raise ReplayError("online-only buffers never hold offline data")
        if self._preloaded:
            raise ReplayError("buffer was already preloaded")
        if self.n_online:
            raise ReplayError("preload must happen before any online push")
        self._check_dims(dataset.states.shape[1], dataset.actions.shape[1])
        ring = self._offline if self.regime is Regime.FIXED_RATIO else self._ring
        start = max(0, dataset.count - self.capacity)
        n = dataset.count - start
        ring._alloc(max(n, 1))
        sl = slice(start, dataset.count)
        ring.states[:n], ring.actions[:n] = dataset.states[sl], dataset.actions[sl]
        ring.rewards[:n], ring.next_states[:n] = dataset.rewards[sl], dataset.next_states[sl]
        ring.terminals[:n] = dataset.terminals[sl]
        ring.provenance[:n] = OFFLINE
        ring.size, ring.head = n, 0
        self.n_offline = n
        self._preloaded = True
        return self

    def push(self, t: Transition) -> "ReplayBuffer":
        """Insert one online transition."""
        s = np.asarray(t.state, dtype=np.float64)
        a = np.asarray(t.action, dtype=np.float64)
        s2 = np.asarray(t.next_state, dtype=np.float64)
        self._check_dims(s.shape[-1], a.shape[-1])
        if s.shape != (self.state_dim,) or s2.shape != (self.state_dim,) or a.shape != (self.action_dim,):
            raise ValueError("transition dimensions do not match the buffer")
        if self.regime is Regime.FIXED_RATIO:
            if self._online is None:
                room = self.capacity - self.n_offline
                if room < 1:
                    raise ReplayError("offline data fills the whole buffer; no room for online items")
                self._online = _Ring(self.state_dim, self.action_dim, room)
            evicted = self._online.append(s, a, t.reward, s2, t.terminal, ONLINE)
        else:
            evicted = self._ring.append(s, a, t.reward, s2, t.terminal, ONLINE)
        self.n_online += 1
        if evicted == OFFLINE:
            self.n_offline -= 1
        elif evicted == ONLINE:
            self.n_online -= 1
        return self

    def offline_batch_count(self, batch_size: int) -> int:
        return int(math.floor(self.ratio * batch_size + 0.5))

    def ready(self, batch_size: int = 1) -> bool:
        if self.regime is Regime.ONLINE_ONLY:
            return self.n_online >= self.min_size
        if self.size < self.min_size:
            return False
        if self.regime is Regime.FIXED_RATIO:
            n_off = self.offline_batch_count(batch_size)
            return (n_off == 0 or self.n_offline > 0) and (n_off == batch_size or self.n_online > 0)
        return True

    def sample(self, batch_size: int, rng: Rng) -> Batch:
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.regime is Regime.ONLINE_ONLY and self.n_online < self.min_size:
            raise ReplayError(f"only {self.n_online} online items, need {self.min_size}")
        if self.size < self.min_size:
            raise ReplayError(f"only {self.size} items, need {self.min_size}")
        if self.regime is not Regime.FIXED_RATIO:
            return self._ring.gather(rng.integers(0, self._ring.size, batch_size))
        n_off = self.offline_batch_count(batch_size)
        n_on = batch_size - n_off
        if n_off and self.n_offline == 0:
            raise ReplayError("fixed-ratio batch needs offline items but none are stored")
        if n_on and self.n_online == 0:
            raise ReplayError("fixed-ratio batch needs online items but none are stored")
        off = self._offline.gather(rng.integers(0, max(self._offline.size, 1), n_off))
        if n_on == 0:
            return off
        return _concat(off, self._online.gather(rng.integers(0, self._online.size, n_on)))

    def _check_dims(self, state_dim: int, action_dim: int) -> None:
        if (state_dim, action_dim) != (self.state_dim, self.action_dim):
            raise ValueError(f"dims ({state_dim}, {action_dim}) do not match buffer "
                             f"({self.state_dim}, {self.action_dim})")
