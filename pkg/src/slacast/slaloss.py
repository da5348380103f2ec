"""Asymmetric training losses and SLA metrics.

Errors are always ``prediction - actual``: a negative error means demand was
underprovisioned (an SLA violation), a positive one means capacity was
overprovisioned.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class EmptyInput(ValueError):
    pass


class LossKind(str, Enum):
    WMAE = "wmae"
    MAE = "mae"
    MSE = "mse"
    HUBER = "huber"
    LOGCOSH = "logcosh"


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.WMAE
    weight: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if self.weight < 1:
            raise ValueError(f"weight must be >= 1, got {self.weight}")
        if self.delta <= 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")

    @classmethod
    def wmae(cls, weight: float) -> "LossSpec":
        return cls(LossKind.WMAE, weight=weight)

    @property
    def name(self) -> str:
        if self.kind is LossKind.WMAE:
            return f"wmae(w={self.weight:g})"
        return self.kind.value


@dataclass(frozen=True)
class SlaTarget:
    rate: float

    def __post_init__(self):
        if not 0 < self.rate < 0.5:
            raise ValueError(f"SLA target rate must lie in (0, 0.5), got {self.rate}")


def _log_cosh(e):
    # log(cosh(e)) without overflow for large |e|
    a = np.abs(e)
    return a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)


def loss_value(spec: LossSpec, e):
    """Elementwise loss of prediction error ``e`` (scalar or array)."""
    e = np.asarray(e, dtype=np.float64)
    kind = spec.kind
    if kind is LossKind.WMAE:
        return np.where(e <= 0, spec.weight * np.abs(e), e)
    if kind is LossKind.MAE:
        return np.abs(e)
    if kind is LossKind.MSE:
        return e * e
    if kind is LossKind.HUBER:
        a = np.abs(e)
        d = spec.delta
        return np.where(a <= d, 0.5 * e * e, d * (a - 0.5 * d))
    return _log_cosh(e)


def loss_grad(spec: LossSpec, e):
    """Derivative of :func:`loss_value` with respect to the prediction.

    The kink of the absolute-value losses at ``e == 0`` gets subgradient 0.
    """
    e = np.asarray(e, dtype=np.float64)
    kind = spec.kind
    if kind is LossKind.WMAE:
        return np.where(e < 0, -spec.weight, np.where(e > 0, 1.0, 0.0))
    if kind is LossKind.MAE:
        return np.sign(e)
    if kind is LossKind.MSE:
        return 2.0 * e
    if kind is LossKind.HUBER:
        return np.clip(e, -spec.delta, spec.delta)
    return np.tanh(e)


def _errors(errors) -> np.ndarray:
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise EmptyInput("metric needs at least one error sample")
    return e


def sla_violation_rate(errors) -> float:
    """Fraction of samples whose prediction fell short of demand (``e < 0``)."""
    e = _errors(errors)
    return float(np.count_nonzero(e < 0) / e.size)


def overprovisioning_volume(errors) -> float:
    """Mean of the strictly positive errors; 0.0 when there are none."""
    e = _errors(errors)
    pos = e[e > 0]
    if pos.size == 0:
        return 0.0
    return float(pos.mean())


def sla_based_loss(errors, w: float) -> float:
    """Mean weighted absolute error, underprovisioning penalised by ``w``."""
    e = _errors(errors)
    return float(np.mean(loss_value(LossSpec.wmae(w), e)))
