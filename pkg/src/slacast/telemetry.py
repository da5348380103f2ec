"""Hourly RAN telemetry: data model, CSV ingestion and fold construction."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Mapping

import numpy as np

FEATURE_LABELS: tuple[str, ...] = ("F0",) + tuple(f"F-RAN{i}" for i in range(1, 20))
# Only these counters exist per slice; the rest are cell-level.
SLICE_LABELS: tuple[str, ...] = ("F0", "F-RAN1", "F-RAN2")

TELEMETRY_HEADER = ["timestamp", "base_station", "cell_index", "slice", *FEATURE_LABELS]
HANDOVER_HEADER = ["src_base", "src_index", "dst_base", "dst_index", "rate_percent"]

HOURS_PER_WEEK = 168
_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


class TelemetryError(ValueError):
    pass


class MalformedRow(TelemetryError):
    pass


class DuplicateTimestamp(TelemetryError):
    pass


class MixedSliceSchema(TelemetryError):
    pass


class InconsistentDurations(TelemetryError):
    pass


class GapError(TelemetryError):
    """Raised when a series with missing hours is used for training."""

    def __init__(self, message: str, locations: list[tuple[str, str, int]]):
        super().__init__(message)
        self.locations = locations


class SliceKind(str, Enum):
    TOTAL = "total"
    VOICE = "voice"
    DATA = "data"
    FWA = "fwa"


@dataclass(frozen=True, order=True)
class CellId:
    """A cell ``A2`` is cell 2 of base station ``A``."""

    base_station: str
    cell_index: int

    def __post_init__(self):
        if not self.base_station:
            raise ValueError("base_station must be non-empty")
        # a trailing digit would make the rendered name ambiguous
        if self.base_station[-1].isdigit():
            raise ValueError(f"base_station may not end in a digit: {self.base_station!r}")
        if int(self.cell_index) < 1:
            raise ValueError(f"cell_index must be positive, got {self.cell_index}")
        object.__setattr__(self, "cell_index", int(self.cell_index))

    def __str__(self) -> str:
        return f"{self.base_station}{self.cell_index}"

    @classmethod
    def parse(cls, text: str) -> "CellId":
        m = re.fullmatch(r"(.*?\D)(\d+)", text.strip())
        if m is None:
            raise ValueError(f"cannot parse cell id {text!r}")
        return cls(m.group(1), int(m.group(2)))


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    ts = ts.astimezone(timezone.utc)
    if ts.minute or ts.second or ts.microsecond:
        raise ValueError(f"timestamp not on an hour boundary: {text}")
    return ts


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def epoch_hour(ts: datetime) -> int:
    return int((ts - _EPOCH).total_seconds()) // 3600


def hour_of_day(epoch_hours) -> np.ndarray:
    return np.asarray(epoch_hours, dtype=np.int64) % 24


def weekday(epoch_hours) -> np.ndarray:
    """Monday=0 ... Sunday=6; the epoch fell on a Thursday."""
    return (np.asarray(epoch_hours, dtype=np.int64) // 24 + 3) % 7


@dataclass
class CellSeries:
    cell: CellId
    slice: SliceKind
    start: datetime
    features: dict[str, np.ndarray]
    # hour offsets of each sample relative to ``start``; 0..n-1 when gapless
    offsets: np.ndarray | None = None

    def __post_init__(self):
        if "F0" not in self.features:
            raise ValueError("series must carry F0")
        self.features = {k: np.asarray(v, dtype=np.float64) for k, v in self.features.items()}
        lengths = {len(v) for v in self.features.values()}
        if len(lengths) != 1:
            raise ValueError(f"feature lengths differ: {sorted(lengths)}")
        if self.offsets is None:
            self.offsets = np.arange(self.length, dtype=np.int64)
        else:
            self.offsets = np.asarray(self.offsets, dtype=np.int64)
            if len(self.offsets) != self.length:
                raise ValueError("offsets length does not match features")

    @property
    def length(self) -> int:
        return len(self.features["F0"])

    @property
    def f0(self) -> np.ndarray:
        return self.features["F0"]

    @property
    def start_hour(self) -> int:
        return epoch_hour(self.start)

    def epoch_hours(self) -> np.ndarray:
        return self.start_hour + self.offsets

    def timestamps(self) -> list[datetime]:
        from datetime import timedelta

        return [self.start + timedelta(hours=int(o)) for o in self.offsets]


@dataclass
class HandoverMatrix:
    entries: dict[tuple[CellId, CellId], float] = field(default_factory=dict)

    def __post_init__(self):
        for (src, dst), rate in self.entries.items():
            if src == dst:
                raise ValueError(f"self-edge on {src}")
            if not rate >= 0:
                raise ValueError(f"negative handover rate {src}->{dst}: {rate}")

    def incoming(self, target: CellId) -> list[tuple[CellId, float]]:
        return sorted((s, r) for (s, d), r in self.entries.items() if d == target)

    def outgoing(self, target: CellId) -> list[tuple[CellId, float]]:
        return sorted((d, r) for (s, d), r in self.entries.items() if s == target)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class TelemetryStore:
    series: dict[tuple[CellId, SliceKind], CellSeries] = field(default_factory=dict)
    handovers: HandoverMatrix = field(default_factory=HandoverMatrix)

    def add(self, s: CellSeries) -> None:
        key = (s.cell, s.slice)
        if key in self.series:
            raise ValueError(f"duplicate series for {s.cell}/{s.slice.value}")
        self.series[key] = s

    def get(self, cell: CellId, slice: SliceKind = SliceKind.TOTAL) -> CellSeries:
        try:
            return self.series[(cell, SliceKind(slice))]
        except KeyError:
            raise KeyError(f"no series for {cell}/{SliceKind(slice).value}") from None

    def cells(self) -> list[CellId]:
        return sorted({c for c, _ in self.series})

    def slices_of(self, cell: CellId) -> list[SliceKind]:
        order = list(SliceKind)
        return sorted((s for c, s in self.series if c == cell), key=order.index)

    def __len__(self) -> int:
        return len(self.series)


@dataclass
class ValidationReport:
    length: int
    gaps: list[int]
    negatives: list[int]

    @property
    def gap_count(self) -> int:
        return len(self.gaps)

    @property
    def negative_count(self) -> int:
        return len(self.negatives)

    @property
    def ok(self) -> bool:
        return not self.gaps and not self.negatives


def validate_series(series: CellSeries) -> ValidationReport:
    """List every missing hour (as an offset from ``start``) and every negative F0."""
    offsets = series.offsets
    gaps: list[int] = []
    if len(offsets):
        present = np.zeros(int(offsets.max()) + 1, dtype=bool)
        present[offsets] = True
        gaps = np.flatnonzero(~present).tolist()
    negatives = np.flatnonzero(series.f0 < 0).tolist()
    return ValidationReport(series.length, gaps, negatives)


def require_complete(store: TelemetryStore) -> None:
    """Raise :class:`GapError` if any series has missing hours."""
    locations = []
    for (cell, sl), s in sorted(store.series.items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
        for g in validate_series(s).gaps:
            locations.append((str(cell), sl.value, g))
    if locations:
        shown = ", ".join(f"{c}/{s}@{g}" for c, s, g in locations[:20])
        raise GapError(f"{len(locations)} missing hour(s): {shown}", locations)


def load_telemetry(telemetry_path, handover_path=None) -> TelemetryStore:
    """Read the telemetry CSV (and optional handover CSV) into a store."""
    rows: dict[tuple[CellId, SliceKind], list[tuple[datetime, dict[str, float]]]] = {}
    with open(telemetry_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TELEMETRY_HEADER:
            raise MalformedRow(f"unexpected telemetry header: {header}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(TELEMETRY_HEADER):
                raise MalformedRow(f"line {lineno}: expected {len(TELEMETRY_HEADER)} fields, got {len(rec)}")
            try:
                ts = parse_timestamp(rec[0])
                cell = CellId(rec[1].strip(), int(rec[2]))
                sl = SliceKind(rec[3].strip().lower())
            except ValueError as exc:
                raise MalformedRow(f"line {lineno}: {exc}") from None
            values: dict[str, float] = {}
            for label, raw in zip(FEATURE_LABELS, rec[4:]):
                raw = raw.strip()
                if raw == "":
                    if sl is SliceKind.TOTAL or label in SLICE_LABELS:
                        raise MalformedRow(f"line {lineno}: missing value for {label}")
                    continue
                if sl is not SliceKind.TOTAL and label not in SLICE_LABELS:
                    raise MixedSliceSchema(f"line {lineno}: {sl.value} row carries {label}")
                try:
                    values[label] = float(raw)
                except ValueError:
                    raise MalformedRow(f"line {lineno}: bad number {raw!r} for {label}") from None
            rows.setdefault((cell, sl), []).append((ts, values))

    store = TelemetryStore()
    for (cell, sl), recs in sorted(rows.items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
        recs.sort(key=lambda r: r[0])
        for a, b in zip(recs, recs[1:]):
            if a[0] == b[0]:
                raise DuplicateTimestamp(f"{cell}/{sl.value}: duplicate timestamp {format_timestamp(a[0])}")
        start = recs[0][0]
        base = epoch_hour(start)
        offsets = np.array([epoch_hour(t) - base for t, _ in recs], dtype=np.int64)
        labels = FEATURE_LABELS if sl is SliceKind.TOTAL else SLICE_LABELS
        feats = {lab: np.array([v[lab] for _, v in recs], dtype=np.float64) for lab in labels}
        store.add(CellSeries(cell, sl, start, feats, offsets))

    if handover_path is not None:
        store.handovers = load_handovers(handover_path)
    return store


def load_handovers(path) -> HandoverMatrix:
    entries: dict[tuple[CellId, CellId], float] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != HANDOVER_HEADER:
            raise MalformedRow(f"unexpected handover header: {header}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                src = CellId(rec[0].strip(), int(rec[1]))
                dst = CellId(rec[2].strip(), int(rec[3]))
                rate = float(rec[4])
            except (ValueError, IndexError) as exc:
                raise MalformedRow(f"handover line {lineno}: {exc}") from None
            if not 0 <= rate <= 100:
                raise MalformedRow(f"handover line {lineno}: rate {rate} outside [0, 100]")
            if (src, dst) in entries:
                raise MalformedRow(f"handover line {lineno}: duplicate edge {src}->{dst}")
            entries[(src, dst)] = rate
    try:
        return HandoverMatrix(entries)
    except ValueError as exc:
        raise MalformedRow(str(exc)) from None


def _fmt(x: float) -> str:
    return repr(float(x))


def save_telemetry(store: TelemetryStore, path) -> None:
    """Write the store in the ingestion format; floats use ``repr`` so reloads are exact."""
    from datetime import timedelta

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TELEMETRY_HEADER)
        for (cell, sl), s in sorted(store.series.items(), key=lambda kv: (kv[0][0], list(SliceKind).index(kv[0][1]))):
            stamps = [format_timestamp(s.start + timedelta(hours=int(o))) for o in s.offsets]
            cols = [s.features.get(lab) for lab in FEATURE_LABELS]
            for i, stamp in enumerate(stamps):
                vals = ["" if c is None else _fmt(c[i]) for c in cols]
                w.writerow([stamp, cell.base_station, cell.cell_index, sl.value, *vals])


def save_handovers(matrix: HandoverMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HANDOVER_HEADER)
        for (src, dst), rate in sorted(matrix.entries.items()):
            w.writerow([src.base_station, src.cell_index, dst.base_station, dst.cell_index, _fmt(rate)])


Interval = tuple[int, int]


@dataclass(frozen=True)
class FoldSplit:
    """Half-open hour-index intervals. Training may be split around the validation segment."""

    index: int
    train_ranges: tuple[Interval, ...]
    val_range: Interval
    test_range: Interval

    @property
    def train_hours(self) -> int:
        return sum(b - a for a, b in self.train_ranges)

    def train_index(self) -> np.ndarray:
        if not self.train_ranges:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.arange(a, b) for a, b in self.train_ranges])

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "train_ranges": [list(r) for r in self.train_ranges],
            "val_range": list(self.val_range),
            "test_range": list(self.test_range),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FoldSplit":
        return cls(
            int(d["index"]),
            tuple((int(a), int(b)) for a, b in d["train_ranges"]),
            (int(d["val_range"][0]), int(d["val_range"][1])),
            (int(d["test_range"][0]), int(d["test_range"][1])),
        )


def split_folds(total_hours: int, fold_count: int, segment_weeks: int, test_weeks: int) -> list[FoldSplit]:
    """Rotating validation folds over the span that precedes a fixed test block.

    Fold ``i`` validates on segment ``i`` and trains on every other segment.
    """
    expected = (fold_count * segment_weeks + test_weeks) * HOURS_PER_WEEK
    if fold_count < 1 or segment_weeks < 1 or test_weeks < 0 or total_hours != expected:
        raise InconsistentDurations(
            f"total_hours={total_hours} but {fold_count} folds x {segment_weeks} weeks "
            f"+ {test_weeks} test weeks = {expected} hours"
        )
    seg = segment_weeks * HOURS_PER_WEEK
    pre = fold_count * seg
    test = (pre, total_hours)
    splits = []
    for i in range(fold_count):
        val = (i * seg, (i + 1) * seg)
        train = tuple(r for r in ((0, val[0]), (val[1], pre)) if r[1] > r[0])
        splits.append(FoldSplit(i, train, val, test))
    return splits

