"""A small numpy LSTM forecaster with hand-written backpropagation through time.

One LSTM encoder per input group; the final hidden states of all groups are
concatenated and every dense head reads that concatenation. With a single
group and a single head this is the plain LSTM -> dense forecaster.

Gate blocks are stored side by side in the order (input, forget, cell, output).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .slaloss import LossSpec, loss_grad, loss_value


class ShapeMismatch(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class NetConfig:
    input_channels: tuple[int, ...]
    hidden_units: int = 32
    window: int = 24
    heads: int = 1
    seed: int = 0

    def __post_init__(self):
        ch = self.input_channels
        ch = (int(ch),) if np.isscalar(ch) else tuple(int(c) for c in ch)
        object.__setattr__(self, "input_channels", ch)
        if not ch or min(ch) < 1 or self.hidden_units < 1 or self.window < 1 or self.heads < 1:
            raise ValueError(f"invalid network config {self}")

    @property
    def groups(self) -> int:
        return len(self.input_channels)

    def to_dict(self) -> dict:
        return {"input_channels": list(self.input_channels), "hidden_units": self.hidden_units,
                "window": self.window, "heads": self.heads, "seed": self.seed}

    @classmethod
    def from_dict(cls, d) -> "NetConfig":
        return cls(tuple(d["input_channels"]), int(d["hidden_units"]), int(d["window"]),
                   int(d["heads"]), int(d["seed"]))


@dataclass
class ModelParams:
    config: NetConfig
    arrays: dict[str, np.ndarray]

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.config, {k: np.zeros_like(v) for k, v in self.arrays.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def equals(self, other: "ModelParams") -> bool:
        return (self.config == other.config and self.names() == other.names()
                and all(np.array_equal(self[k], other[k]) for k in self.names()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: NetConfig) -> ModelParams:
    """Glorot-uniform weights per gate matrix, zero biases except forget gate = 1."""
    rng = np.random.default_rng(config.seed)
    h = config.hidden_units
    arrays: dict[str, np.ndarray] = {}
    for g, c in enumerate(config.input_channels):
        arrays[f"g{g}.Wx"] = np.concatenate([_glorot(rng, c, h, (c, h)) for _ in range(4)], axis=1)
        arrays[f"g{g}.Wh"] = np.concatenate([_glorot(rng, h, h, (h, h)) for _ in range(4)], axis=1)
        b = np.zeros(4 * h)
        b[h : 2 * h] = 1.0
        arrays[f"g{g}.b"] = b
    width = config.groups * h
    arrays["head.W"] = np.stack([_glorot(rng, width, 1, width) for _ in range(config.heads)], axis=1)
    arrays["head.b"] = np.zeros(config.heads)
    return ModelParams(config, arrays)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class _GroupCache:
    x: np.ndarray
    gates: np.ndarray  # (u, B, 4H) post-activation
    c: np.ndarray  # (u + 1, B, H), c[0] is the zero initial state
    h: np.ndarray  # (u + 1, B, H)


@dataclass
class ForwardCache:
    groups: list[_GroupCache] = field(default_factory=list)
    head_input: np.ndarray | None = None


def _as_groups(params: ModelParams, inputs) -> list[np.ndarray]:
    cfg = params.config
    if isinstance(inputs, np.ndarray):
        inputs = [inputs]
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    if len(inputs) != cfg.groups:
        raise ShapeMismatch(f"expected {cfg.groups} input groups, got {len(inputs)}")
    batch = inputs[0].shape[0]
    for x, c in zip(inputs, cfg.input_channels):
        if x.ndim != 3 or x.shape[1:] != (cfg.window, c) or x.shape[0] != batch:
            raise ShapeMismatch(f"input of shape {x.shape} does not match (B, {cfg.window}, {c})")
    return inputs


def forward(params: ModelParams, inputs) -> tuple[np.ndarray, ForwardCache]:
    """Run every group's LSTM over its window and apply the dense heads.

    Returns predictions of shape (B, heads) and the cache needed by :func:`backward`.
    """
    cfg = params.config
    xs = _as_groups(params, inputs)
    hdim = cfg.hidden_units
    cache = ForwardCache()
    finals = []
    for g, x in enumerate(xs):
        Wx, Wh, b = params[f"g{g}.Wx"], params[f"g{g}.Wh"], params[f"g{g}.b"]
        B, u, _ = x.shape
        xz = np.einsum("buc,cz->ubz", x, Wx) + b
        gates = np.empty((u, B, 4 * hdim))
        c = np.zeros((u + 1, B, hdim))
        h = np.zeros((u + 1, B, hdim))
        for t in range(u):
            z = xz[t] + h[t] @ Wh
            a = gates[t]
            a[:, : 2 * hdim] = _sigmoid(z[:, : 2 * hdim])
            a[:, 2 * hdim : 3 * hdim] = np.tanh(z[:, 2 * hdim : 3 * hdim])
            a[:, 3 * hdim :] = _sigmoid(z[:, 3 * hdim :])
            i, f, gg, o = a[:, :hdim], a[:, hdim : 2 * hdim], a[:, 2 * hdim : 3 * hdim], a[:, 3 * hdim :]
            c[t + 1] = f * c[t] + i * gg
            h[t + 1] = o * np.tanh(c[t + 1])
        cache.groups.append(_GroupCache(x, gates, c, h))
        finals.append(h[u])
    head_in = np.concatenate(finals, axis=1)
    cache.head_input = head_in
    return head_in @ params["head.W"] + params["head.b"], cache


def predict(params: ModelParams, inputs) -> np.ndarray:
    return forward(params, inputs)[0]


def backward(params: ModelParams, cache: ForwardCache, dpred: np.ndarray) -> ModelParams:
    """Gradient of ``sum(dpred * predictions)`` with respect to every parameter."""
    cfg = params.config
    dpred = np.asarray(dpred, dtype=np.float64)
    head_in = cache.head_input
    if dpred.shape != (head_in.shape[0], cfg.heads):
        raise ShapeMismatch(f"dpred shape {dpred.shape} != {(head_in.shape[0], cfg.heads)}")
    grads = params.zeros_like()
    grads.arrays["head.W"] = head_in.T @ dpred
    grads.arrays["head.b"] = dpred.sum(axis=0)
    dhead = dpred @ params["head.W"].T
    hdim = cfg.hidden_units
    for g, gc in enumerate(cache.groups):
        Wh = params[f"g{g}.Wh"]
        u, B, _ = gc.gates.shape
        dz_all = np.empty((u, B, 4 * hdim))
        dh = dhead[:, g * hdim : (g + 1) * hdim].copy()
        dc = np.zeros((B, hdim))
        for t in range(u - 1, -1, -1):
            a = gc.gates[t]
            i, f, gg, o = a[:, :hdim], a[:, hdim : 2 * hdim], a[:, 2 * hdim : 3 * hdim], a[:, 3 * hdim :]
            tc = np.tanh(gc.c[t + 1])
            dc = dc + dh * o * (1.0 - tc * tc)
            dz = dz_all[t]
            dz[:, :hdim] = dc * gg * i * (1.0 - i)
            dz[:, hdim : 2 * hdim] = dc * gc.c[t] * f * (1.0 - f)
            dz[:, 2 * hdim : 3 * hdim] = dc * i * (1.0 - gg * gg)
            dz[:, 3 * hdim :] = dh * tc * o * (1.0 - o)
            dh = dz @ Wh.T
            dc = dc * f
        grads.arrays[f"g{g}.Wx"] = np.einsum("buc,ubz->cz", gc.x, dz_all)
        grads.arrays[f"g{g}.Wh"] = np.einsum("ubh,ubz->hz", gc.h[:-1], dz_all)
        grads.arrays[f"g{g}.b"] = dz_all.sum(axis=(0, 1))
    return grads


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptState":
        return cls({k: np.zeros_like(a) for k, a in params.arrays.items()},
                   {k: np.zeros_like(a) for k, a in params.arrays.items()})


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def optimizer_step(params: ModelParams, grads: ModelParams, state: OptState, lr: float = 1e-3
                   ) -> tuple[ModelParams, OptState]:
    """One Adam update; the inputs are left untouched."""
    for k, g in grads.arrays.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {k}")
    step = state.step + 1
    new = {}
    m_new, v_new = {}, {}
    c1 = 1.0 - ADAM_BETA1**step
    c2 = 1.0 - ADAM_BETA2**step
    for k, p in params.arrays.items():
        g = grads[k]
        m = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * g * g
        new[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        m_new[k], v_new[k] = m, v
    return ModelParams(params.config, new), OptState(m_new, v_new, step)


def head_losses(pred: np.ndarray, target: np.ndarray, specs: Sequence[LossSpec]) -> np.ndarray:
    """Mean loss of each head."""
    e = pred - target
    return np.array([np.mean(loss_value(s, e[:, k])) for k, s in enumerate(specs)])


def loss_and_grad(params: ModelParams, inputs, target: np.ndarray, specs: Sequence[LossSpec],
                  mask: np.ndarray | None = None) -> tuple[float, ModelParams]:
    """Unweighted mean over heads of each head's mean loss, and its gradient.

    ``mask`` (B, heads) drops individual samples from both value and gradient.
    """
    pred, cache = forward(params, inputs)
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    e = pred - target
    B, K = pred.shape
    if mask is None:
        mask = np.ones_like(e, dtype=bool)
    counts = np.maximum(mask.sum(axis=0), 1)
    total = 0.0
    dpred = np.zeros_like(e)
    for k, s in enumerate(specs):
        m = mask[:, k]
        total += float(np.sum(loss_value(s, e[m, k]))) / counts[k]
        dpred[:, k] = np.where(m, loss_grad(s, e[:, k]), 0.0) / counts[k]
    total /= K
    dpred /= K
    return total, backward(params, cache, dpred)


def grad_check(config: NetConfig, loss_weight: float = 1.0, sample_count: int = 4, eps: float = 1e-5,
               params: ModelParams | None = None, data_seed: int | None = None) -> float:
    """Largest relative error between analytic and central-difference gradients of the wMAE loss.

    Samples whose error lies within 1e-6 of the kink are dropped from both sides.
    Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``; the floor keeps entries that
    are zero up to rounding from dominating.
    """
    rng = np.random.default_rng(config.seed + 1 if data_seed is None else data_seed)
    params = init_params(config) if params is None else params
    xs = [rng.standard_normal((sample_count, config.window, c)) for c in config.input_channels]
    y = rng.standard_normal((sample_count, config.heads))
    specs = [LossSpec.wmae(loss_weight)] * config.heads
    pred = predict(params, xs)
    mask = np.abs(pred - y) > 1e-6
    _, grads = loss_and_grad(params, xs, y, specs, mask)

    worst = 0.0
    for name, arr in params.arrays.items():
        g = grads[name]
        flat = arr.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            lp, _ = _loss_only(params, xs, y, specs, mask)
            flat[j] = old - eps
            lm, _ = _loss_only(params, xs, y, specs, mask)
            flat[j] = old
            num = (lp - lm) / (2 * eps)
            ana = g.reshape(-1)[j]
            denom = max(abs(ana), abs(num), 1e-6)
            worst = max(worst, abs(ana - num) / denom)
    return worst


def _loss_only(params, xs, y, specs, mask):
    pred = predict(params, xs)
    e = pred - y
    counts = np.maximum(mask.sum(axis=0), 1)
    total = 0.0
    for k, s in enumerate(specs):
        total += float(np.sum(loss_value(s, e[mask[:, k], k]))) / counts[k]
    return total / len(specs), pred
