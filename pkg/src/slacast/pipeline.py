"""Training, weight calibration, multi-step rollout and evaluation.

Architectures
-------------
``single_cell``   one model per cell on its total traffic.
``multi_cell``    one model over several cells: an LSTM per cell, concatenated
                  hidden states, one dense head per cell.
``single_slice``  one model per (cell, slice).
``multi_slice``   one model per cell with a group and head per slice, each head
                  carrying its own SLA target.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import neuralnet as nn
from .features import (
    CALENDAR_CHANNELS,
    CORRELATION_THRESHOLD,
    DatasetBundle,
    FeatureSet,
    ModelKind,
    NormStats,
    SupervisedDataset,
    build_dataset,
    day_of_week_flags,
    make_dataset,
    FittedFeatures,
)
from .slaloss import (
    LossKind,
    LossSpec,
    loss_value,
    overprovisioning_volume,
    sla_based_loss,
    sla_violation_rate,
)
from .telemetry import CellId, FoldSplit, SliceKind, TelemetryStore, hour_of_day, split_folds

log = logging.getLogger(__name__)

DEFAULT_GRID = (1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 20.0, 24.0, 32.0, 40.0, 48.0, 64.0, 96.0, 128.0)
REPORT_HORIZONS = (1, 2, 4, 8, 24)

REPORT_COLUMNS = [
    "arch", "model_kind", "cell", "slice", "sla_target", "horizon", "fold",
    "sla_loss", "violation_rate", "overprov_volume", "weight_w", "flag_unmet",
]


class PipelineError(ValueError):
    pass


class NonFiniteLoss(PipelineError, FloatingPointError):
    pass


class EmptyDataset(PipelineError):
    pass


class MisalignedGroups(PipelineError):
    pass


class EmptyGrid(PipelineError):
    pass


class HorizonZero(PipelineError):
    pass


class ArchKind(str, Enum):
    SINGLE_CELL = "single_cell"
    MULTI_CELL = "multi_cell"
    SINGLE_SLICE = "single_slice"
    MULTI_SLICE = "multi_slice"


@dataclass(frozen=True)
class TrainConfig:
    epochs_max: int = 30
    patience: int = 5
    batch: int = 32
    lr: float = 1e-3
    window: int = 24
    hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.epochs_max < 0 or self.batch < 1 or self.hidden < 1 or not self.lr > 0:
            raise ValueError(f"invalid training config {self}")
        if self.patience >= self.epochs_max and self.epochs_max > 0:
            raise ValueError("patience must be smaller than epochs_max")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class GroupKey:
    cell: CellId
    slice: SliceKind

    @property
    def name(self) -> str:
        return f"{self.cell}/{self.slice.value}"


@dataclass
class TrainedModel:
    params: nn.ModelParams
    groups: list[GroupKey]
    feature_sets: list[FeatureSet]
    norm_stats: list[NormStats]
    peak_flags: list[np.ndarray]
    weights: list[float]
    arch: ArchKind = ArchKind.SINGLE_CELL
    model_kind: ModelKind = ModelKind.UNIVARIATE
    loss: LossKind = LossKind.WMAE
    sla_targets: list[float | None] = field(default_factory=list)
    flag_unmet: list[bool] = field(default_factory=list)
    fold: FoldSplit | None = None
    threshold: float = CORRELATION_THRESHOLD

    def __post_init__(self):
        k = len(self.groups)
        if not (len(self.feature_sets) == len(self.norm_stats) == len(self.peak_flags) == k):
            raise ValueError("per-group metadata lengths differ")
        if len(self.weights) != self.params.config.heads:
            raise ValueError("need one loss weight per head")
        if any(w < 1 for w in self.weights):
            raise ValueError("loss weights must be >= 1")
        if not self.sla_targets:
            self.sla_targets = [None] * len(self.weights)
        if not self.flag_unmet:
            self.flag_unmet = [False] * len(self.weights)

    @property
    def window(self) -> int:
        return self.params.config.window

    def loss_specs(self) -> list[LossSpec]:
        if self.loss is LossKind.WMAE:
            return [LossSpec.wmae(w) for w in self.weights]
        return [LossSpec(self.loss)] * len(self.weights)


def _stack(groups: Sequence[SupervisedDataset]) -> tuple[list[np.ndarray], np.ndarray]:
    if not groups:
        raise EmptyDataset("no input groups")
    n = len(groups[0])
    for g in groups[1:]:
        if len(g) != n or not np.array_equal(g.target_epoch_hours, groups[0].target_epoch_hours):
            raise MisalignedGroups("input groups do not share target hours")
    return [g.inputs for g in groups], np.stack([g.targets for g in groups], axis=1)


def _denorm_errors(pred: np.ndarray, target: np.ndarray, groups: Sequence[SupervisedDataset]) -> np.ndarray:
    std = np.array([g.f0_std for g in groups])
    return (pred - target) * std


def validation_objective(params: nn.ModelParams, groups: Sequence[SupervisedDataset],
                         specs: Sequence[LossSpec]) -> float:
    """Mean over heads of the head's loss; absolute-value losses in physical units."""
    xs, y = _stack(groups)
    pred = nn.predict(params, xs)
    e_norm = pred - y
    e_phys = _denorm_errors(pred, y, groups)
    vals = []
    for k, s in enumerate(specs):
        e = e_phys[:, k] if s.kind in (LossKind.WMAE, LossKind.MAE) else e_norm[:, k]
        vals.append(float(np.mean(loss_value(s, e))))
    return float(np.mean(vals))


def _fit(train: Sequence[SupervisedDataset], val: Sequence[SupervisedDataset], specs: Sequence[LossSpec],
         config: TrainConfig) -> tuple[nn.ModelParams, list[float]]:
    xs, y = _stack(train)
    if len(y) == 0:
        raise EmptyDataset("training set has no samples")
    if len(val) and len(val[0]) == 0:
        raise EmptyDataset("validation set has no samples")
    net = nn.NetConfig(tuple(g.inputs.shape[2] for g in train), config.hidden, config.window, len(train),
                       config.seed)
    params = nn.init_params(net)
    state = nn.OptState.for_params(params)
    rng = np.random.default_rng(config.seed)
    best = params
    best_val = validation_objective(params, val, specs)
    history = [best_val]
    stale = 0
    n = len(y)
    for epoch in range(config.epochs_max):
        order = rng.permutation(n)
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            loss, grads = nn.loss_and_grad(params, [x[idx] for x in xs], y[idx], specs)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"training loss diverged at epoch {epoch}")
            params, state = nn.optimizer_step(params, grads, state, config.lr)
        v = validation_objective(params, val, specs)
        if not np.isfinite(v):
            raise NonFiniteLoss(f"validation loss diverged at epoch {epoch}")
        history.append(v)
        if v < best_val:
            best, best_val, stale = params, v, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best, history


def _model_from(params, bundles: Sequence[DatasetBundle], weights, loss: LossKind, arch: ArchKind,
                kind: ModelKind) -> TrainedModel:
    return TrainedModel(
        params=params,
        groups=[GroupKey(b.cell, b.slice) for b in bundles],
        feature_sets=[b.fitted.feature_set for b in bundles],
        norm_stats=[b.fitted.norm_stats for b in bundles],
        peak_flags=[b.fitted.peak_flags for b in bundles],
        weights=list(weights),
        arch=arch,
        model_kind=kind,
        loss=loss,
        fold=bundles[0].split,
    )


def train_single(bundle: DatasetBundle, loss: LossSpec, config: TrainConfig) -> TrainedModel:
    """Fit one LSTM -> dense forecaster, keeping the best-validation parameters."""
    params, _ = _fit([bundle.train], [bundle.val], [loss], config)
    arch = ArchKind.SINGLE_CELL if bundle.slice is SliceKind.TOTAL else ArchKind.SINGLE_SLICE
    return _model_from(params, [bundle], [loss.weight if loss.kind is LossKind.WMAE else 1.0],
                       loss.kind, arch, bundle.kind)


def train_multihead(bundles: Sequence[DatasetBundle], losses: Sequence[LossSpec] | LossSpec, config: TrainConfig,
                    arch: ArchKind = ArchKind.MULTI_CELL) -> TrainedModel:
    """One LSTM per group, concatenated hidden states, one head per group."""
    if len(bundles) < 2:
        raise MisalignedGroups("multi-head training needs at least two input groups; use train_single")
    if isinstance(losses, LossSpec):
        losses = [losses] * len(bundles)
    if len(losses) != len(bundles):
        raise ValueError("need one loss per head")
    params, _ = _fit([b.train for b in bundles], [b.val for b in bundles], losses, config)
    weights = [s.weight if s.kind is LossKind.WMAE else 1.0 for s in losses]
    return _model_from(params, bundles, weights, losses[0].kind, ArchKind(arch), bundles[0].kind)


def val_rates(model_params: nn.ModelParams, groups: Sequence[SupervisedDataset]) -> list[float]:
    xs, y = _stack(groups)
    e = nn.predict(model_params, xs) - y
    return [sla_violation_rate(e[:, k]) for k in range(e.shape[1])]


class GridScan:
    """Trains and caches one model per loss-weight tuple for one set of bundles."""

    def __init__(self, bundles: Sequence[DatasetBundle], config: TrainConfig,
                 arch: ArchKind = ArchKind.SINGLE_CELL):
        self.bundles = list(bundles)
        self.config = config
        self.arch = ArchKind(arch)
        self._params: dict[tuple[float, ...], nn.ModelParams] = {}
        self._rates: dict[tuple[float, ...], list[float]] = {}

    @property
    def heads(self) -> int:
        return len(self.bundles)

    def params(self, weights: Sequence[float]) -> nn.ModelParams:
        key = tuple(float(w) for w in weights)
        if key not in self._params:
            specs = [LossSpec.wmae(w) for w in key]
            self._params[key], _ = _fit([b.train for b in self.bundles], [b.val for b in self.bundles],
                                        specs, self.config)
            log.debug("trained %s weights=%s", [GroupKey(b.cell, b.slice).name for b in self.bundles], key)
        return self._params[key]

    def rates(self, weights: Sequence[float]) -> list[float]:
        key = tuple(float(w) for w in weights)
        if key not in self._rates:
            self._rates[key] = val_rates(self.params(key), [b.val for b in self.bundles])
        return self._rates[key]

    def model(self, weights: Sequence[float]) -> TrainedModel:
        return _model_from(self.params(weights), self.bundles, weights, LossKind.WMAE, self.arch,
                           self.bundles[0].kind)


@dataclass
class LineSearchResult:
    weights: list[float]
    unmet: list[bool]
    targets: list[float]
    # validation violation rate per head for each scanned grid weight
    rates: dict[float, list[float]]

    @property
    def weight(self) -> float:
        return self.weights[0]

    @property
    def flag_unmet(self) -> bool:
        return any(self.unmet)


def calibrate(scan: GridScan, targets: Sequence[float] | float, grid: Sequence[float] = DEFAULT_GRID
              ) -> LineSearchResult:
    """Smallest grid weight per head whose validation violation rate meets that head's target.

    Every head is scanned with a shared weight; a head that never qualifies gets the
    grid maximum and is flagged.
    """
    grid = [float(w) for w in grid]
    if not grid:
        raise EmptyGrid("weight grid is empty")
    if grid != sorted(grid) or grid[0] != 1.0:
        raise ValueError("grid must be ascending and start at 1")
    targets = [float(targets)] * scan.heads if np.isscalar(targets) else [float(t) for t in targets]
    if len(targets) != scan.heads:
        raise ValueError("need one target per head")
    chosen: list[float | None] = [None] * scan.heads
    seen = {}
    for w in grid:
        r = scan.rates([w] * scan.heads)
        seen[w] = r
        for k in range(scan.heads):
            if chosen[k] is None and r[k] <= targets[k]:
                chosen[k] = w
        if all(c is not None for c in chosen):
            break
    unmet = [c is None for c in chosen]
    weights = [grid[-1] if c is None else c for c in chosen]
    return LineSearchResult(weights, unmet, targets, seen)


def weight_line_search(bundle: DatasetBundle | Sequence[DatasetBundle], target: float | Sequence[float],
                       config: TrainConfig, grid: Sequence[float] = DEFAULT_GRID) -> LineSearchResult:
    bundles = [bundle] if isinstance(bundle, DatasetBundle) else list(bundle)
    return calibrate(GridScan(bundles, config), target, grid)


def calibrated_model(scan: GridScan, result: LineSearchResult) -> TrainedModel:
    model = scan.model(result.weights)
    model.sla_targets = list(result.targets)
    model.flag_unmet = list(result.unmet)
    return model


def _calendar_row(flags: np.ndarray, epoch_hours: np.ndarray) -> np.ndarray:
    return np.stack([flags[hour_of_day(epoch_hours)], day_of_week_flags(epoch_hours)], axis=-1).astype(float)


def rollout(model: TrainedModel, windows: Sequence[np.ndarray], first_hours: np.ndarray, horizon: int
            ) -> np.ndarray:
    """Recursive forecast in normalised units, shape (B, horizon, heads).

    Each step feeds the head's prediction back as the newest F0 value of its
    group, recomputes calendar flags for the new hour and holds every other
    channel at its last observed value.
    """
    if horizon < 1:
        raise HorizonZero("horizon must be at least 1")
    if model.params.config.heads != len(model.groups) and horizon > 1:
        raise PipelineError("recursive rollout needs one head per input group")
    xs = [np.array(w, dtype=np.float64, copy=True) for w in windows]
    first_hours = np.asarray(first_hours, dtype=np.int64)
    out = np.empty((xs[0].shape[0], horizon, model.params.config.heads))
    cal_idx = [[fs.index(c) if c in fs.channels else None for c in CALENDAR_CHANNELS]
               for fs in model.feature_sets]
    for step in range(horizon):
        pred = nn.predict(model.params, xs)
        out[:, step] = pred
        if step == horizon - 1:
            break
        hours = first_hours + step + 1
        for g, x in enumerate(xs):
            row = x[:, -1, :].copy()
            row[:, 0] = pred[:, g]
            if any(i is not None for i in cal_idx[g]):
                cal = _calendar_row(model.peak_flags[g], hours)
                for j, i in enumerate(cal_idx[g]):
                    if i is not None:
                        row[:, i] = cal[:, j]
            x[:, :-1] = x[:, 1:]
            x[:, -1] = row
    return out


def predict_multi_step(model: TrainedModel, seed_window, horizon: int, calendar: Sequence) -> np.ndarray:
    """Forecast ``horizon`` hours ahead from one window, in physical units.

    ``seed_window`` is a normalised (u, C) array, or a list of them for multi-group
    models; ``calendar`` lists the epoch hours (or datetimes) being predicted.
    Returns shape (horizon,) for a single head and (horizon, heads) otherwise.
    """
    from datetime import datetime

    from .telemetry import epoch_hour

    if horizon < 1:
        raise HorizonZero("horizon must be at least 1")
    if len(calendar) < horizon:
        raise ValueError("calendar must cover every predicted hour")
    first = calendar[0]
    first = epoch_hour(first) if isinstance(first, datetime) else int(first)
    windows = seed_window if isinstance(seed_window, (list, tuple)) else [seed_window]
    windows = [np.asarray(w, dtype=np.float64)[None] for w in windows]
    out = rollout(model, windows, np.array([first]), horizon)[0]
    for k in range(out.shape[1]):
        out[:, k] = out[:, k] * model.norm_stats[k].std[0] + model.norm_stats[k].mean[0]
    return out[:, 0] if out.shape[1] == 1 else out


@dataclass
class HeadMetrics:
    head: str
    horizon: int
    fold: int | str
    sla_loss: float
    violation_rate: float
    overprov_volume: float
    n: int
    weight: float
    sla_target: float | None = None
    flag_unmet: bool = False


def metrics_from_errors(errors, w: float) -> tuple[float, float, float]:
    """(SLA-based loss, violation rate, overprovisioning volume) of physical errors."""
    return sla_based_loss(errors, w), sla_violation_rate(errors), overprovisioning_volume(errors)


@dataclass
class EvalReport:
    rows: list[HeadMetrics] = field(default_factory=list)

    def get(self, head: str | None = None, horizon: int = 1, fold=None) -> HeadMetrics:
        for r in self.rows:
            if (head is None or r.head == head) and r.horizon == horizon and (fold is None or r.fold == fold):
                return r
        raise KeyError((head, horizon, fold))

    def aggregate(self) -> list[HeadMetrics]:
        """Arithmetic mean over folds for every (head, horizon)."""
        keys = []
        buckets: dict[tuple[str, int], list[HeadMetrics]] = {}
        for r in self.rows:
            k = (r.head, r.horizon)
            if k not in buckets:
                keys.append(k)
                buckets[k] = []
            buckets[k].append(r)
        out = []
        for k in keys:
            rs = buckets[k]
            out.append(HeadMetrics(
                head=k[0], horizon=k[1], fold="mean",
                sla_loss=float(np.mean([r.sla_loss for r in rs])),
                violation_rate=float(np.mean([r.violation_rate for r in rs])),
                overprov_volume=float(np.mean([r.overprov_volume for r in rs])),
                n=int(sum(r.n for r in rs)),
                weight=float(np.mean([r.weight for r in rs])),
                sla_target=rs[0].sla_target,
                flag_unmet=any(r.flag_unmet for r in rs),
            ))
        return out


def evaluate(model: TrainedModel, test: Sequence[SupervisedDataset] | SupervisedDataset,
             horizons: Iterable[int] = (1,), weights: Sequence[float] | None = None) -> EvalReport:
    """SLA metrics per horizon and head, every test hour used as a forecast origin.

    For horizon h the origin at sample n is scored against the actual value h-1
    hours after its first target hour. ``weights`` overrides the loss weight used
    for scoring (baselines are scored at a calibrated wMAE weight).
    """
    groups = [test] if isinstance(test, SupervisedDataset) else list(test)
    xs, y = _stack(groups)
    n = len(y)
    if n == 0:
        raise EmptyDataset("test set has no samples")
    if np.any(np.diff(groups[0].target_epoch_hours) != 1):
        raise PipelineError("evaluation needs one contiguous test range")
    weights = list(model.weights if weights is None else weights)
    horizons = sorted({int(h) for h in horizons})
    if not horizons or horizons[0] < 1:
        raise HorizonZero("horizons must be >= 1")
    hmax = horizons[-1]
    if hmax > n:
        raise EmptyDataset(f"horizon {hmax} exceeds the {n} test samples")
    preds = rollout(model, xs, groups[0].target_epoch_hours, hmax)
    fold = model.fold.index if model.fold is not None else 0
    report = EvalReport()
    for h in horizons:
        m = n - h + 1
        for k, g in enumerate(groups):
            p = preds[:m, h - 1, k] * g.f0_std + g.f0_mean
            a = g.denormalize(y[h - 1 : h - 1 + m, k])
            loss, rate, vol = metrics_from_errors(p - a, weights[k])
            report.rows.append(HeadMetrics(model.groups[k].name, h, fold, loss, rate, vol, m, weights[k],
                                           model.sla_targets[k], model.flag_unmet[k]))
    return report


# --------------------------------------------------------------------------- experiments


@dataclass(frozen=True)
class FoldSpec:
    fold_count: int = 6
    segment_weeks: int = 8
    test_weeks: int = 4
    run: tuple[int, ...] | None = None

    def splits(self, total_hours: int) -> list[FoldSplit]:
        all_splits = split_folds(total_hours, self.fold_count, self.segment_weeks, self.test_weeks)
        if self.run is None:
            return all_splits
        bad = [i for i in self.run if not 0 <= i < self.fold_count]
        if bad:
            raise ValueError(f"fold indices out of range: {bad}")
        return [all_splits[i] for i in self.run]


_EXPERIMENT_KEYS = {"arch", "cells", "slices", "model_kinds", "sla_targets", "baselines", "horizons", "grid",
                    "folds", "train", "threshold"}


@dataclass
class Experiment:
    arch: ArchKind = ArchKind.SINGLE_CELL
    cells: list[CellId] = field(default_factory=list)
    slices: list[SliceKind] = field(default_factory=list)
    model_kinds: list[ModelKind] = field(default_factory=lambda: [ModelKind.UNIVARIATE])
    # each entry is one scalar target for every head, or a per-slice / per-cell mapping
    sla_targets: list[float | dict[str, float]] = field(default_factory=lambda: [0.05])
    baselines: list[LossKind] = field(default_factory=list)
    horizons: list[int] = field(default_factory=lambda: [1])
    grid: list[float] = field(default_factory=lambda: list(DEFAULT_GRID))
    folds: FoldSpec = field(default_factory=FoldSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    threshold: float = CORRELATION_THRESHOLD

    @classmethod
    def from_dict(cls, d: Mapping) -> "Experiment":
        unknown = set(d) - _EXPERIMENT_KEYS
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        folds = dict(d.get("folds", {}))
        bad = set(folds) - {"fold_count", "segment_weeks", "test_weeks", "run"}
        if bad:
            raise ValueError(f"unknown fold keys: {sorted(bad)}")
        if folds.get("run") is not None:
            folds["run"] = tuple(int(i) for i in folds["run"])
        train = dict(d.get("train", {}))
        bad = set(train) - {f.name for f in fields(TrainConfig)}
        if bad:
            raise ValueError(f"unknown train keys: {sorted(bad)}")
        exp = cls(
            arch=ArchKind(d.get("arch", "single_cell")),
            cells=[CellId.parse(c) for c in d.get("cells", [])],
            slices=[SliceKind(s) for s in d.get("slices", [])],
            model_kinds=[ModelKind(k) for k in d.get("model_kinds", ["univariate"])],
            sla_targets=list(d.get("sla_targets", [0.05])),
            baselines=[LossKind(b) for b in d.get("baselines", [])],
            horizons=[int(h) for h in d.get("horizons", [1])],
            grid=[float(w) for w in d.get("grid", DEFAULT_GRID)],
            folds=FoldSpec(**folds),
            train=TrainConfig(**train),
            threshold=float(d.get("threshold", CORRELATION_THRESHOLD)),
        )
        if LossKind.WMAE in exp.baselines:
            raise ValueError("wmae is the calibrated model, not a baseline")
        for t in exp.sla_targets:
            vals = t.values() if isinstance(t, Mapping) else [t]
            for v in vals:
                if not 0 < float(v) < 0.5:
                    raise ValueError(f"SLA target {v} outside (0, 0.5)")
        if not exp.horizons or min(exp.horizons) < 1:
            raise ValueError("horizons must be >= 1")
        return exp

    def to_dict(self) -> dict:
        return {
            "arch": self.arch.value,
            "cells": [str(c) for c in self.cells],
            "slices": [s.value for s in self.slices],
            "model_kinds": [k.value for k in self.model_kinds],
            "sla_targets": self.sla_targets,
            "baselines": [b.value for b in self.baselines],
            "horizons": self.horizons,
            "grid": self.grid,
            "folds": {"fold_count": self.folds.fold_count, "segment_weeks": self.folds.segment_weeks,
                      "test_weeks": self.folds.test_weeks,
                      "run": None if self.folds.run is None else list(self.folds.run)},
            "train": self.train.to_dict(),
            "threshold": self.threshold,
        }


def experiment_units(store: TelemetryStore, exp: Experiment) -> list[list[GroupKey]]:
    """The input groups of every model the experiment trains."""
    cells = exp.cells or store.cells()
    slices = exp.slices or [s for s in SliceKind if s is not SliceKind.TOTAL]
    if exp.arch is ArchKind.SINGLE_CELL:
        return [[GroupKey(c, SliceKind.TOTAL)] for c in cells]
    if exp.arch is ArchKind.MULTI_CELL:
        if len(cells) < 2:
            raise MisalignedGroups("multi_cell needs at least two cells")
        return [[GroupKey(c, SliceKind.TOTAL) for c in cells]]
    if exp.arch is ArchKind.SINGLE_SLICE:
        return [[GroupKey(c, s)] for c in cells for s in slices]
    if len(set(slices)) != len(slices) or len(slices) < 2:
        raise MisalignedGroups("multi_slice needs at least two distinct slices")
    return [[GroupKey(c, s) for s in slices] for c in cells]


def _head_targets(target, groups: Sequence[GroupKey]) -> list[float]:
    if isinstance(target, Mapping):
        out = []
        for g in groups:
            for key in (g.slice.value, str(g.cell), g.name):
                if key in target:
                    out.append(float(target[key]))
                    break
            else:
                raise ValueError(f"SLA target map {dict(target)} has no entry for {g.name}")
        return out
    return [float(target)] * len(groups)


def _target_label(targets: Sequence[float]) -> str:
    return "-".join(f"{t:g}" for t in targets)


@dataclass
class ExperimentResult:
    rows: list[dict]
    models: dict[str, TrainedModel]

    def csv_text(self) -> str:
        return rows_to_csv(self.rows)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def report_rows(report: EvalReport, model: TrainedModel, model_label: str, include_mean: bool = True
                ) -> list[dict]:
    by_name = {g.name: g for g in model.groups}
    rows = []
    metrics = list(report.rows) + (report.aggregate() if include_mean else [])
    for m in metrics:
        g = by_name[m.head]
        rows.append({
            "arch": model.arch.value, "model_kind": model_label, "cell": str(g.cell), "slice": g.slice.value,
            "sla_target": "" if m.sla_target is None else float(m.sla_target), "horizon": m.horizon,
            "fold": m.fold, "sla_loss": m.sla_loss, "violation_rate": m.violation_rate,
            "overprov_volume": m.overprov_volume, "weight_w": float(m.weight), "flag_unmet": bool(m.flag_unmet),
        })
    return rows


def _sort_key(row: Mapping):
    fold = row["fold"]
    return (row["arch"], row["model_kind"], row["cell"], row["slice"], str(row["sla_target"]),
            int(row["horizon"]), (1, 0) if fold == "mean" else (0, int(fold)))


def run_experiment(store: TelemetryStore, exp: Experiment, checkpoint_dir: Path | None = None
                   ) -> ExperimentResult:
    """Train, calibrate and score every (unit, fold, model kind, target) of an experiment."""
    from .checkpoint import save_checkpoint

    if len(store) == 0:
        raise EmptyDataset("telemetry store is empty")
    units = experiment_units(store, exp)
    lengths = {store.get(g.cell, g.slice).length for u in units for g in u}
    if len(lengths) != 1:
        raise MisalignedGroups(f"series lengths differ: {sorted(lengths)}")
    splits = exp.folds.splits(lengths.pop())
    per_fold: dict[tuple, list[tuple[EvalReport, TrainedModel, str]]] = {}
    models: dict[str, TrainedModel] = {}

    for unit in units:
        for split in splits:
            scans: dict[ModelKind, GridScan] = {}

            def scan_for(kind: ModelKind) -> GridScan:
                if kind not in scans:
                    bundles = [build_dataset(store, g.cell, g.slice, kind, split, exp.train.window, exp.threshold)
                               for g in unit]
                    scans[kind] = GridScan(bundles, exp.train, exp.arch)
                return scans[kind]

            for kind in exp.model_kinds:
                scan = scan_for(kind)
                for ti, target in enumerate(exp.sla_targets):
                    targets = _head_targets(target, unit)
                    result = calibrate(scan, targets, exp.grid)
                    model = calibrated_model(scan, result)
                    rep = evaluate(model, [b.test for b in scan.bundles], exp.horizons)
                    key = (tuple(g.name for g in unit), kind.value, _target_label(targets))
                    per_fold.setdefault(key, []).append((rep, model, kind.value))
                    name = _checkpoint_name(exp.arch, unit, kind.value, ti, split.index)
                    models[name] = model
                    if checkpoint_dir is not None:
                        save_checkpoint(model, Path(checkpoint_dir) / name)

            for base in exp.baselines:
                scan = scan_for(ModelKind.UNIVARIATE)
                spec = LossSpec(base)
                params, _ = _fit([b.train for b in scan.bundles], [b.val for b in scan.bundles],
                                 [spec] * len(unit), exp.train)
                bmodel = _model_from(params, scan.bundles, [1.0] * len(unit), base, exp.arch,
                                     ModelKind.UNIVARIATE)
                label = f"baseline_{base.value}"
                for ti, target in enumerate(exp.sla_targets):
                    targets = _head_targets(target, unit)
                    result = calibrate(scan, targets, exp.grid)
                    bmodel.sla_targets = list(targets)
                    rep = evaluate(bmodel, [b.test for b in scan.bundles], exp.horizons, weights=result.weights)
                    for row in rep.rows:
                        row.flag_unmet = False
                    key = (tuple(g.name for g in unit), label, _target_label(targets))
                    per_fold.setdefault(key, []).append((rep, bmodel, label))
                    if ti == 0:
                        # the checkpoint keeps the weight it is scored at for the first target
                        scoring = (list(result.weights), list(targets))
                bmodel.weights, bmodel.sla_targets = scoring
                name = _checkpoint_name(exp.arch, unit, label, 0, split.index)
                models[name] = bmodel
                if checkpoint_dir is not None:
                    save_checkpoint(bmodel, Path(checkpoint_dir) / name)

    rows = []
    for key, entries in per_fold.items():
        merged = EvalReport([r for rep, _, _ in entries for r in rep.rows])
        model, label = entries[0][1], entries[0][2]
        rows.extend(report_rows(merged, model, label))
    rows.sort(key=_sort_key)
    return ExperimentResult(rows, models)


def _checkpoint_name(arch: ArchKind, unit: Sequence[GroupKey], kind: str, target_index: int, fold: int) -> str:
    unit_name = "+".join(g.name.replace("/", "-") for g in unit)
    return f"{arch.value}__{unit_name}__{kind}__t{target_index}__fold{fold}.json"


def summary_table(rows: Sequence[Mapping]) -> str:
    """Fixed-width text table of the fold-averaged rows."""
    mean_rows = [r for r in rows if r["fold"] == "mean"]
    head = f"{'arch':<13}{'model':<18}{'cell':<6}{'slice':<7}{'target':>7}{'h':>4}{'loss':>11}{'rate':>8}{'overprov':>11}{'w':>7}"
    lines = [head, "-" * len(head)]
    for r in mean_rows:
        tgt = "" if r["sla_target"] == "" else f"{r['sla_target']:.2f}"
        flag = " *" if r["flag_unmet"] else ""
        lines.append(
            f"{r['arch']:<13}{r['model_kind']:<18}{r['cell']:<6}{r['slice']:<7}{tgt:>7}{r['horizon']:>4}"
            f"{r['sla_loss']:>11.4f}{r['violation_rate']:>8.4f}{r['overprov_volume']:>11.4f}{r['weight_w']:>7g}{flag}"
        )
    if any(r["flag_unmet"] for r in mean_rows):
        lines.append("* target not met on validation within the weight grid")
    return "\n".join(lines)


def rebuild_test(store: TelemetryStore, model: TrainedModel) -> list[SupervisedDataset]:
    """Test datasets for a stored model, reusing its fitted statistics."""
    if model.fold is None:
        raise PipelineError("model has no fold information")
    out = []
    for g, fs, ns, pk in zip(model.groups, model.feature_sets, model.norm_stats, model.peak_flags):
        fitted = FittedFeatures(fs, ns, pk, [c for c in fs.channels if c.startswith("F-RAN")])
        out.append(make_dataset(store, g.cell, g.slice, fitted, (model.fold.test_range,), model.window))
    return out
