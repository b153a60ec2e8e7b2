"""Dense-array math for the actor/critic networks.

Everything here works on float64 numpy arrays. The only network shape
supported is the layer-norm MLP used by every agent::

    linear(in -> h) -> layernorm -> tanh -> linear(h -> h) -> elu -> linear(h -> out) [-> tanh * scale]

Gradients are written out by hand; there is no autodiff.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

LN_EPS = 1e-5
HIDDEN = 256
PARAM_NAMES = ("w1", "b1", "ln_gain", "ln_bias", "w2", "b2", "w3", "b3")

Arrays = Dict[str, np.ndarray]


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in an input, output or gradient."""


class ShapeError(ValueError):
    pass


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    # a single NaN/Inf entry poisons the sum; overflow of the sum itself is also treated as failure
    if not np.isfinite(np.add.reduce(x, axis=None)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


class Rng:
    """Seedable Philox stream that can be split into named substreams.

    ``Rng(3).substream("env")`` always yields the same stream, independent of
    how much has been drawn from the parent or from sibling substreams.
    """

    def __init__(self, seed: int, path: Tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def substream(self, name: str) -> "Rng":
        return Rng(self.seed, self.path + (zlib.crc32(name.encode("utf-8")),))

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


@dataclass
class MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    # None -> linear head (critic); float -> tanh head scaled to +-out_scale (actor)
    out_scale: Optional[float] = None
    # set when the arrays above are views into one contiguous vector
    _flat: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w3.shape[1]

    def as_dict(self) -> Arrays:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_arrays(self, arrays: Arrays) -> "MlpParams":
        return replace(self, _flat=None, **{name: arrays[name] for name in PARAM_NAMES})

    def flat(self) -> np.ndarray:
        """All parameters as one vector (shares memory with the layer arrays when possible)."""
        if self._flat is not None:
            return self._flat
        return np.concatenate([getattr(self, name).ravel() for name in PARAM_NAMES])

    def from_flat(self, vec: np.ndarray) -> "MlpParams":
        """Same architecture, parameters taken (as views) from ``vec``."""
        vec = np.asarray(vec, dtype=np.float64)
        arrays, start = {}, 0
        for name in PARAM_NAMES:
            shape = getattr(self, name).shape
            size = int(np.prod(shape))
            arrays[name] = vec[start:start + size].reshape(shape)
            start += size
        if start != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, network needs {start}")
        return replace(self, _flat=vec, **arrays)

    def copy(self) -> "MlpParams":
        return self.from_flat(self.flat().copy())

    def validate(self) -> None:
        h = self.hidden
        expected = {
            "b1": (h,), "ln_gain": (h,), "ln_bias": (h,),
            "w2": (h, h), "b2": (h,),
            "w3": (h, self.out_dim), "b3": (self.out_dim,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")


def mlp_init(rng: Rng, in_dim: int, out_dim: int, hidden: int = HIDDEN,
             out_scale: Optional[float] = None) -> MlpParams:
    """Fan-in uniform init; an actor (``out_scale`` set) gets a +-1e-3 final layer."""
    def fan_in(n_in, n_out):
        bound = 1.0 / np.sqrt(n_in)
        return rng.uniform(-bound, bound, (n_in, n_out))

    w3 = rng.uniform(-1e-3, 1e-3, (hidden, out_dim)) if out_scale is not None else fan_in(hidden, out_dim)
    params = MlpParams(
        w1=fan_in(in_dim, hidden), b1=np.zeros(hidden),
        ln_gain=np.ones(hidden), ln_bias=np.zeros(hidden),
        w2=fan_in(hidden, hidden), b2=np.zeros(hidden),
        w3=w3, b3=np.zeros(out_dim),
        out_scale=None if out_scale is None else float(out_scale),
    )
    return params.from_flat(params.flat())


@dataclass
class ForwardCache:
    x: np.ndarray
    xhat: np.ndarray
    rstd: np.ndarray
    h1: np.ndarray
    z2: np.ndarray
    h2: np.ndarray
    t3: Optional[np.ndarray]  # tanh(z3) for actor heads
    squeeze: bool = False


def _as_batch(params: MlpParams, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match network input width {params.in_dim}")
    return x, squeeze


def mlp_forward_cached(params: MlpParams, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    x, squeeze = _as_batch(params, x)
    z1 = x @ params.w1 + params.b1
    xc = z1 - z1.mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    h1 = np.tanh(xhat * params.ln_gain + params.ln_bias)
    z2 = h1 @ params.w2 + params.b2
    h2 = np.maximum(z2, 0.0) + np.expm1(np.minimum(z2, 0.0))
    z3 = h2 @ params.w3 + params.b3
    if params.out_scale is None:
        t3 = None
        out = z3
    else:
        t3 = np.tanh(z3)
        out = params.out_scale * t3
    check_finite(out, "mlp output")
    cache = ForwardCache(x, xhat, rstd, h1, z2, h2, t3, squeeze)
    return (out[0] if squeeze else out), cache


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    return mlp_forward_cached(params, x)[0]


def mlp_backward_cached(params: MlpParams, cache: ForwardCache, cotangent: np.ndarray,
                        need_params: bool = True) -> Tuple[Optional[Arrays], np.ndarray]:
    """Vector-Jacobian product through a forward pass recorded in ``cache``.

    With ``need_params=False`` only the input gradient is formed, which is all
    the actor update needs from the critic.
    """
    g = np.asarray(cotangent, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != (cache.x.shape[0], params.out_dim):
        raise ShapeError(f"cotangent shape {g.shape} does not match output shape "
                         f"{(cache.x.shape[0], params.out_dim)}")
    if cache.t3 is not None:
        dz3 = g * (params.out_scale * (1.0 - cache.t3 * cache.t3))
    else:
        dz3 = g
    dh2 = dz3 @ params.w3.T
    # elu'(z) = 1 for z > 0, exp(z) = elu(z) + 1 otherwise
    dz2 = dh2 * np.minimum(cache.h2 + 1.0, 1.0)
    dh1 = dz2 @ params.w2.T
    dy = dh1 * (1.0 - cache.h1 * cache.h1)
    dxhat = dy * params.ln_gain
    dz1 = cache.rstd * (dxhat - dxhat.mean(axis=1, keepdims=True)
                        - cache.xhat * (dxhat * cache.xhat).mean(axis=1, keepdims=True))
    dx = dz1 @ params.w1.T
    check_finite(dx, "input gradient")

    grads = None
    if need_params:
        grads = {
            "w1": cache.x.T @ dz1, "b1": dz1.sum(axis=0),
            "ln_gain": (dy * cache.xhat).sum(axis=0), "ln_bias": dy.sum(axis=0),
            "w2": cache.h1.T @ dz2, "b2": dz2.sum(axis=0),
            "w3": cache.h2.T @ dz3, "b3": dz3.sum(axis=0),
        }
        for name, value in grads.items():
            check_finite(value, f"gradient of {name}")
    return grads, (dx[0] if cache.squeeze else dx)


def mlp_backward(params: MlpParams, x: np.ndarray, cotangent: np.ndarray) -> Tuple[Arrays, np.ndarray]:
    """Gradients of ``sum(cotangent * mlp_forward(params, x))`` w.r.t. params and x."""
    _, cache = mlp_forward_cached(params, x)
    return mlp_backward_cached(params, cache, cotangent)


@dataclass
class AdamState:
    m: Arrays
    v: Arrays
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Arrays, lr: float = 3e-4, **kwargs) -> "AdamState":
        return cls(m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()}, lr=lr, **kwargs)

    def copy(self) -> "AdamState":
        return replace(self, m={k: a.copy() for k, a in self.m.items()},
                       v={k: a.copy() for k, a in self.v.items()})


def adam_step(state: AdamState, params: Arrays, grads: Arrays) -> Tuple[AdamState, Arrays]:
    """One bias-corrected Adam step. Returns new state and new params; inputs are untouched."""
    for name, g in grads.items():
        check_finite(g, f"gradient of {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient of {name} has shape {g.shape}, parameter has {params[name].shape}")
    step = state.step + 1
    c1 = 1.0 - state.beta1 ** step
    c2 = 1.0 - state.beta2 ** step
    new_m, new_v, new_p = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        new_m[name], new_v[name] = m, v
        new_p[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return replace(state, m=new_m, v=new_v, step=step), new_p


def flat_grads(grads: Arrays) -> np.ndarray:
    """Gradient dict in the same order as ``MlpParams.flat``."""
    return np.concatenate([grads[name].ravel() for name in PARAM_NAMES])


def polyak_update(target, online, tau: float):
    """``(1 - tau) * target + tau * online``, for arrays or whole ``MlpParams``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if isinstance(target, MlpParams):
        return target.from_flat(polyak_update(target.flat(), online.flat(), tau))
    target = np.asarray(target, dtype=np.float64)
    online = np.asarray(online, dtype=np.float64)
    if target.shape != online.shape:
        raise ShapeError(f"target shape {target.shape} != online shape {online.shape}")
    return (1.0 - tau) * target + tau * online


def clip_to_unit_norm(g: np.ndarray) -> np.ndarray:
    """Rescale to unit 2-norm when the norm exceeds 1. 2-D input is clipped row by row."""
    g = check_finite(np.asarray(g, dtype=np.float64), "gradient to clip")
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    return np.where(norm > 1.0, g / np.maximum(norm, 1.0), g)
