"""Feature families and windowed supervised datasets.

Three families feed the forecaster besides the target traffic F0:

* RAN counters whose Pearson correlation with F0 clears a threshold,
* calendar flags (peak hour of day, weekday vs weekend),
* mobility-cluster aggregates: handover-weighted means of neighbour traffic.

Everything that is *fitted* (normalisation statistics, peak-hour table,
selected counters) is computed from the training hours only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .telemetry import (
    FEATURE_LABELS,
    SLICE_LABELS,
    CellId,
    CellSeries,
    FoldSplit,
    GapError,
    Interval,
    SliceKind,
    TelemetryStore,
    hour_of_day,
    validate_series,
    weekday,
)

PEAK_RATIO = 0.70
CORRELATION_THRESHOLD = 0.90


class FeatureError(ValueError):
    pass


class DegenerateInput(FeatureError):
    pass


class UnknownLabel(FeatureError, KeyError):
    pass


class NoNeighbors(FeatureError):
    pass


class MissingNeighborSeries(FeatureError):
    pass


class WindowTooLong(FeatureError):
    pass


class ModelKind(str, Enum):
    UNIVARIATE = "univariate"
    MV_RAN = "mv_ran"
    MV_PEAK = "mv_peak"
    MV_HANDOVER = "mv_handover"
    MV_ALL = "mv_all"


class Direction(str, Enum):
    INCOMING = "incoming"
    OUTGOING = "outgoing"


# channel descriptors: RAN labels are their own names, the rest are fixed tokens
PEAK_FLAG = "peak_hour"
DAY_FLAG = "weekday"
MC_IN = "mc_in"
MC_OUT = "mc_out"
BOOLEAN_CHANNELS = frozenset({PEAK_FLAG, DAY_FLAG})
CALENDAR_CHANNELS = (PEAK_FLAG, DAY_FLAG)


def pearson_correlation(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DegenerateInput("sequences must be one-dimensional and equal length")
    if x.size < 2:
        raise DegenerateInput("need at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInput("constant sequence has no correlation")
    r = float(dx @ dy) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def _take(values: np.ndarray, ranges: Iterable[Interval]) -> np.ndarray:
    parts = [values[a:b] for a, b in ranges]
    return np.concatenate(parts) if parts else values[:0]


def _as_ranges(r) -> tuple[Interval, ...]:
    if len(r) == 2 and all(isinstance(v, (int, np.integer)) for v in r):
        return ((int(r[0]), int(r[1])),)
    return tuple((int(a), int(b)) for a, b in r)


def correlation_table(series: CellSeries, train_ranges) -> dict[str, float]:
    """Correlation of each candidate counter with F0; constant channels are left out."""
    ranges = _as_ranges(train_ranges)
    f0 = _take(series.f0, ranges)
    candidates = SLICE_LABELS[1:] if series.slice is not SliceKind.TOTAL else FEATURE_LABELS[1:]
    table = {}
    for label in candidates:
        if label not in series.features:
            continue
        try:
            table[label] = pearson_correlation(_take(series.features[label], ranges), f0)
        except DegenerateInput:
            continue
    return table


def select_features(store: TelemetryStore, cell: CellId, slice: SliceKind, threshold: float,
                    train_range) -> list[str]:
    """Counters whose training-span correlation with F0 is at least ``threshold``."""
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    table = correlation_table(store.get(cell, slice), train_range)
    return [lab for lab in FEATURE_LABELS[1:] if lab in table and table[lab] >= threshold]


def label_peak_hours(series: CellSeries, train_range, ratio: float = PEAK_RATIO) -> np.ndarray:
    """24 flags: hour-of-day whose mean training F0 exceeds ``ratio`` of the busiest hour's mean."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    ranges = _as_ranges(train_range)
    hod = _take(hour_of_day(series.epoch_hours()), ranges)
    f0 = _take(series.f0, ranges)
    if f0.size == 0:
        raise DegenerateInput("empty training range")
    sums = np.bincount(hod, weights=f0, minlength=24)
    counts = np.bincount(hod, minlength=24)
    means = np.divide(sums, counts, out=np.zeros(24), where=counts > 0)
    return peak_flags_from_means(means, ratio)


def peak_flags_from_means(means, ratio: float = PEAK_RATIO) -> np.ndarray:
    means = np.asarray(means, dtype=np.float64)
    return means > ratio * means.max()


def day_of_week_flags(epoch_hours) -> np.ndarray:
    """1 on Monday-Friday, 0 on weekends."""
    return weekday(epoch_hours) < 5


def calendar_channels(epoch_hours, peak_flags: np.ndarray) -> np.ndarray:
    """(n, 2) float array of (peak-hour flag, weekday flag)."""
    eh = np.asarray(epoch_hours, dtype=np.int64)
    return np.stack([peak_flags[hour_of_day(eh)], day_of_week_flags(eh)], axis=-1).astype(np.float64)


def neighbor_weights(store: TelemetryStore, target: CellId, direction: Direction) -> list[tuple[CellId, float]]:
    """Neighbours in one handover direction with weights normalised to sum to one."""
    direction = Direction(direction)
    edges = store.handovers.incoming(target) if direction is Direction.INCOMING else store.handovers.outgoing(target)
    edges = [(c, r) for c, r in edges if r > 0]
    if not edges:
        raise NoNeighbors(f"{target} has no {direction.value} handover neighbours")
    total = sum(r for _, r in edges)
    return [(c, r / total) for c, r in edges]


def mobility_aggregate(store: TelemetryStore, target: CellId, direction: Direction,
                       range: Interval | None = None) -> np.ndarray:
    """Handover-weighted mean of the neighbours' total F0, hour by hour."""
    parts = []
    for cell, weight in neighbor_weights(store, target, direction):
        try:
            s = store.get(cell, SliceKind.TOTAL)
        except KeyError:
            raise MissingNeighborSeries(f"neighbour {cell} of {target} has no total series") from None
        parts.append((weight, s.f0))
    lengths = {len(v) for _, v in parts}
    if len(lengths) != 1:
        raise MissingNeighborSeries(f"neighbour series of {target} differ in length")
    out = np.zeros(lengths.pop())
    for w, v in parts:
        out += w * v
    if range is not None:
        out = out[range[0] : range[1]]
    return out


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))

    def __eq__(self, other):
        return (isinstance(other, NormStats) and np.array_equal(self.mean, other.mean)
                and np.array_equal(self.std, other.std))


@dataclass(frozen=True)
class FeatureSet:
    """Ordered channels of one input group. Channel 0 is always F0."""

    channels: tuple[str, ...]

    def __post_init__(self):
        if not self.channels or self.channels[0] != "F0":
            raise ValueError("first channel must be F0")
        if len(set(self.channels)) != len(self.channels):
            raise ValueError(f"duplicate channels in {self.channels}")

    def __len__(self) -> int:
        return len(self.channels)

    @property
    def boolean_mask(self) -> np.ndarray:
        return np.array([c in BOOLEAN_CHANNELS for c in self.channels])

    def index(self, channel: str) -> int:
        return self.channels.index(channel)


def feature_set_for(kind: ModelKind, selected: Sequence[str] = ()) -> FeatureSet:
    kind = ModelKind(kind)
    ran = tuple(selected)
    if kind is ModelKind.UNIVARIATE:
        extra = ()
    elif kind is ModelKind.MV_RAN:
        extra = ran
    elif kind is ModelKind.MV_PEAK:
        extra = CALENDAR_CHANNELS
    elif kind is ModelKind.MV_HANDOVER:
        extra = (MC_IN, MC_OUT)
    else:
        extra = ran + CALENDAR_CHANNELS + (MC_IN, MC_OUT)
    return FeatureSet(("F0",) + extra)


@dataclass
class SupervisedDataset:
    """Normalised windows ``inputs[n]`` (u x C) paired with next-hour F0 ``targets[n]``."""

    inputs: np.ndarray
    targets: np.ndarray
    norm_stats: NormStats
    window: int
    ranges: tuple[Interval, ...]
    feature_set: FeatureSet
    # series index of each target hour and its absolute epoch hour
    target_index: np.ndarray
    target_epoch_hours: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def f0_mean(self) -> float:
        return float(self.norm_stats.mean[0])

    @property
    def f0_std(self) -> float:
        return float(self.norm_stats.std[0])

    def denormalize(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y) * self.f0_std + self.f0_mean


@dataclass
class FittedFeatures:
    """Everything fitted on the training hours that a dataset build needs."""

    feature_set: FeatureSet
    norm_stats: NormStats
    peak_flags: np.ndarray
    selected: list[str]
    correlations: dict[str, float] = field(default_factory=dict)


@dataclass
class DatasetBundle:
    train: SupervisedDataset
    val: SupervisedDataset
    test: SupervisedDataset
    fitted: FittedFeatures
    cell: CellId
    slice: SliceKind
    kind: ModelKind
    split: FoldSplit


def _raw_channels(store: TelemetryStore, cell: CellId, slice: SliceKind, fs: FeatureSet,
                  peak_flags: np.ndarray) -> np.ndarray:
    series = store.get(cell, slice)
    n = series.length
    cols = []
    cal = None
    for ch in fs.channels:
        if ch in series.features:
            cols.append(series.features[ch])
        elif ch in CALENDAR_CHANNELS:
            if cal is None:
                cal = calendar_channels(series.epoch_hours(), peak_flags)
            cols.append(cal[:, CALENDAR_CHANNELS.index(ch)])
        elif ch == MC_IN:
            cols.append(mobility_aggregate(store, cell, Direction.INCOMING))
        elif ch == MC_OUT:
            cols.append(mobility_aggregate(store, cell, Direction.OUTGOING))
        else:
            raise UnknownLabel(f"channel {ch} unavailable for {cell}/{SliceKind(slice).value}")
        if len(cols[-1]) != n:
            raise MissingNeighborSeries(f"channel {ch} length {len(cols[-1])} != {n}")
    return np.stack(cols, axis=-1)


def fit_norm_stats(raw: np.ndarray, fs: FeatureSet, train_ranges) -> NormStats:
    sub = _take(raw, _as_ranges(train_ranges))
    if len(sub) == 0:
        raise DegenerateInput("empty training range")
    mean = sub.mean(axis=0)
    std = sub.std(axis=0)
    # flat channels would divide by zero; leave their scale alone
    std = np.where(std > 1e-12, std, 1.0)
    mask = fs.boolean_mask
    mean = np.where(mask, 0.0, mean)
    std = np.where(mask, 1.0, std)
    return NormStats(mean, std)


def fit_features(store: TelemetryStore, cell: CellId, slice: SliceKind, kind: ModelKind,
                 split: FoldSplit, threshold: float = CORRELATION_THRESHOLD) -> FittedFeatures:
    slice = SliceKind(slice)
    kind = ModelKind(kind)
    series = store.get(cell, slice)
    rep = validate_series(series)
    if rep.gaps:
        raise GapError(f"{cell}/{slice.value} has {rep.gap_count} missing hour(s)",
                       [(str(cell), slice.value, g) for g in rep.gaps])
    train = split.train_ranges
    selected: list[str] = []
    corr: dict[str, float] = {}
    if kind in (ModelKind.MV_RAN, ModelKind.MV_ALL):
        corr = correlation_table(series, train)
        selected = [lab for lab in FEATURE_LABELS[1:] if lab in corr and corr[lab] >= threshold]
    peak = label_peak_hours(series, train)
    fs = feature_set_for(kind, selected)
    raw = _raw_channels(store, cell, slice, fs, peak)
    stats = fit_norm_stats(raw, fs, train)
    return FittedFeatures(fs, stats, peak, selected, corr)


def windows(data: np.ndarray, target: np.ndarray, window: int, ranges) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sliding windows inside each contiguous range; no window straddles two ranges."""
    xs, ys, idx = [], [], []
    for a, b in _as_ranges(ranges):
        if b - a <= window:
            continue
        view = np.lib.stride_tricks.sliding_window_view(data[a : b - 1], window, axis=0)
        # sliding_window_view puts the window axis last: (n, C, u) -> (n, u, C)
        xs.append(np.moveaxis(view, -1, 1))
        ys.append(target[a + window : b])
        idx.append(np.arange(a + window, b))
    if not xs:
        c = data.shape[1]
        return np.zeros((0, window, c)), np.zeros(0), np.zeros(0, dtype=np.int64)
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(idx)


def make_dataset(store: TelemetryStore, cell: CellId, slice: SliceKind, fitted: FittedFeatures,
                 ranges, window: int) -> SupervisedDataset:
    """Windows over ``ranges`` using already-fitted statistics."""
    ranges = _as_ranges(ranges)
    series = store.get(cell, slice)
    span = max(b - a for a, b in ranges) if ranges else 0
    if span <= window:
        raise WindowTooLong(f"window {window} leaves no samples in ranges {ranges}")
    raw = _raw_channels(store, cell, slice, fitted.feature_set, fitted.peak_flags)
    norm = fitted.norm_stats.apply(raw)
    x, y, idx = windows(norm, norm[:, 0], window, ranges)
    return SupervisedDataset(
        inputs=np.ascontiguousarray(x),
        targets=y.copy(),
        norm_stats=fitted.norm_stats,
        window=window,
        ranges=ranges,
        feature_set=fitted.feature_set,
        target_index=idx,
        target_epoch_hours=series.epoch_hours()[idx],
    )


def build_dataset(store: TelemetryStore, cell: CellId, slice: SliceKind, kind: ModelKind, split: FoldSplit,
                  window: int = 24, threshold: float = CORRELATION_THRESHOLD) -> DatasetBundle:
    """Train, validation and test datasets for one fold, fitted on the fold's training hours."""
    slice = SliceKind(slice)
    kind = ModelKind(kind)
    fitted = fit_features(store, cell, slice, kind, split, threshold)
    return DatasetBundle(
        train=make_dataset(store, cell, slice, fitted, split.train_ranges, window),
        val=make_dataset(store, cell, slice, fitted, (split.val_range,), window),
        test=make_dataset(store, cell, slice, fitted, (split.test_range,), window),
        fitted=fitted,
        cell=cell,
        slice=slice,
        kind=kind,
        split=split,
    )


def feature_report(store: TelemetryStore, cell: CellId, slice: SliceKind, train_range,
                   threshold: float = CORRELATION_THRESHOLD) -> dict:
    """JSON-ready summary of the fitted feature families for one series."""
    series = store.get(cell, slice)
    corr = correlation_table(series, train_range)
    report = {
        "cell": str(cell),
        "slice": SliceKind(slice).value,
        "threshold": threshold,
        "correlations": {k: corr[k] for k in FEATURE_LABELS[1:] if k in corr},
        "selected": [lab for lab in FEATURE_LABELS[1:] if lab in corr and corr[lab] >= threshold],
        "peak_hours": [int(b) for b in label_peak_hours(series, train_range)],
        "neighbors": {},
    }
    for d in Direction:
        try:
            report["neighbors"][d.value] = [
                {"cell": str(c), "weight": w} for c, w in neighbor_weights(store, cell, d)
            ]
        except NoNeighbors:
            report["neighbors"][d.value] = []
    return report
