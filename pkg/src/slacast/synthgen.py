"""Seeded synthetic RAN telemetry with daily cycles, spikes and handover coupling.

Every random draw comes from a stream keyed by ``(seed, cell, slice, channel)``
so adding or removing a cell leaves the other cells' values untouched.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np

from .telemetry import (
    FEATURE_LABELS,
    HOURS_PER_WEEK,
    CellId,
    CellSeries,
    HandoverMatrix,
    SliceKind,
    TelemetryStore,
    epoch_hour,
    format_timestamp,
    hour_of_day,
    parse_timestamp,
    weekday,
)

# low 00-06, rising 07-11, plateau 12-18, evening peak 19-22, falling 23
DAILY_TEMPLATE = np.array(
    [0.10, 0.06, 0.04, 0.03, 0.03, 0.05, 0.10,
     0.25, 0.40, 0.52, 0.62, 0.68,
     0.72, 0.72, 0.70, 0.70, 0.72, 0.74, 0.78,
     0.92, 1.00, 0.98, 0.90,
     0.50]
)  # fmt: skip

DEFAULT_START = "2023-01-02T00:00:00Z"  # a Monday

# F-RAN1..4 are planted as affine images of F0: (offset, gain)
_PLANTED = {
    "F-RAN1": (2.0, 0.05),
    "F-RAN2": (1.0, 0.03),
    "F-RAN3": (5.0, 0.08),
    "F-RAN4": (10.0, 0.25),
}


class ConfigError(ValueError):
    pass


class Regularity(str, Enum):
    REGULAR = "regular"
    BURSTY = "bursty"


@dataclass(frozen=True)
class CellProfile:
    base_load: float = 50.0
    daily_amplitude: float = 100.0
    weekend_factor: float = 0.8
    spike_rate: float = 0.5
    spike_magnitude: float = 1.5
    noise_std: float = 5.0
    regularity: Regularity = Regularity.REGULAR

    def __post_init__(self):
        object.__setattr__(self, "regularity", Regularity(self.regularity))
        if not self.base_load > 0:
            raise ConfigError(f"base_load must be > 0, got {self.base_load}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0 < self.weekend_factor <= 1:
            raise ConfigError(f"weekend_factor must lie in (0, 1], got {self.weekend_factor}")
        if self.daily_amplitude < 0 or self.spike_rate < 0 or self.spike_magnitude < 0:
            raise ConfigError("daily_amplitude, spike_rate and spike_magnitude must be >= 0")


@dataclass(frozen=True)
class HandoverEdge:
    src: CellId
    dst: CellId
    rate_percent: float
    coupling: float = 0.0

    def __post_init__(self):
        if not 0 <= self.coupling <= 1:
            raise ConfigError(f"coupling must lie in [0, 1], got {self.coupling}")
        if not 0 <= self.rate_percent <= 100:
            raise ConfigError(f"rate_percent must lie in [0, 100], got {self.rate_percent}")
        if self.src == self.dst:
            raise ConfigError(f"self-edge on {self.src}")


@dataclass(frozen=True)
class Injection:
    """A deterministic additive deviation on one (cell, slice) at one hour."""

    cell: CellId
    slice: SliceKind
    hour: int
    value: float


@dataclass
class ScenarioConfig:
    cells: dict[CellId, dict[SliceKind, CellProfile]]
    weeks: int = 16
    handover_edges: list[HandoverEdge] = field(default_factory=list)
    aux_feature_noise: float = 0.5
    seed: int = 0
    start: str = DEFAULT_START
    injections: list[Injection] = field(default_factory=list)

    def __post_init__(self):
        if self.weeks < 1:
            raise ConfigError(f"weeks must be >= 1, got {self.weeks}")
        if self.aux_feature_noise < 0:
            raise ConfigError("aux_feature_noise must be >= 0")
        if not self.cells:
            raise ConfigError("scenario needs at least one cell")
        layouts = set()
        for cell, profiles in self.cells.items():
            kinds = set(profiles)
            if not kinds:
                raise ConfigError(f"cell {cell} has no profiles")
            if kinds != {SliceKind.TOTAL} and SliceKind.TOTAL in kinds:
                raise ConfigError(f"cell {cell}: Total is derived from slices, do not profile it too")
            layouts.add(frozenset(kinds))
        if len(layouts) != 1:
            raise ConfigError("all cells must share one slice layout")
        for e in self.handover_edges:
            if e.src not in self.cells or e.dst not in self.cells:
                raise ConfigError(f"handover edge {e.src}->{e.dst} references an unknown cell")
        parse_timestamp(self.start)

    @property
    def hours(self) -> int:
        return self.weeks * HOURS_PER_WEEK

    @property
    def leaf_slices(self) -> list[SliceKind]:
        kinds = next(iter(self.cells.values())).keys()
        return [s for s in SliceKind if s in kinds]

    def to_dict(self) -> dict:
        return {
            "cells": {
                str(c): {s.value: {**asdict(p), "regularity": p.regularity.value} for s, p in prof.items()}
                for c, prof in sorted(self.cells.items())
            },
            "weeks": self.weeks,
            "handover_edges": [
                {"src": str(e.src), "dst": str(e.dst), "rate_percent": e.rate_percent, "coupling": e.coupling}
                for e in self.handover_edges
            ],
            "aux_feature_noise": self.aux_feature_noise,
            "seed": self.seed,
            "start": self.start,
            "injections": [
                {"cell": str(i.cell), "slice": i.slice.value, "hour": i.hour, "value": i.value}
                for i in self.injections
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioConfig":
        known = {"cells", "weeks", "handover_edges", "aux_feature_noise", "seed", "start", "injections"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        try:
            cells = {
                CellId.parse(c): {SliceKind(s): CellProfile(**p) for s, p in prof.items()}
                for c, prof in d["cells"].items()
            }
            edges = [
                HandoverEdge(CellId.parse(e["src"]), CellId.parse(e["dst"]), float(e["rate_percent"]),
                             float(e.get("coupling", 0.0)))
                for e in d.get("handover_edges", [])
            ]
            inj = [
                Injection(CellId.parse(i["cell"]), SliceKind(i.get("slice", "total")), int(i["hour"]),
                          float(i["value"]))
                for i in d.get("injections", [])
            ]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad scenario entry: {exc}") from None
        return cls(
            cells=cells,
            weeks=int(d.get("weeks", 16)),
            handover_edges=edges,
            aux_feature_noise=float(d.get("aux_feature_noise", 0.5)),
            seed=int(d.get("seed", 0)),
            start=str(d.get("start", DEFAULT_START)),
            injections=inj,
        )


def _key(text: str) -> int:
    return zlib.crc32(text.encode())


def stream(seed: int, cell: CellId, slice: SliceKind | str, channel: str) -> np.random.Generator:
    """Counter-based generator for one (seed, cell, slice, channel) tuple."""
    sl = slice.value if isinstance(slice, SliceKind) else slice
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, _key(str(cell)), _key(sl), _key(channel)])
    return np.random.Generator(np.random.Philox(ss))


def seasonal_profile(profile: CellProfile, epoch_hours: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Deterministic-ish baseline s(t): daily shape plus weekend scaling."""
    hod = hour_of_day(epoch_hours)
    if profile.regularity is Regularity.BURSTY:
        shape = _random_levels(len(epoch_hours), rng)
    else:
        shape = DAILY_TEMPLATE[hod]
    s = profile.base_load + profile.daily_amplitude * shape
    weekend = weekday(epoch_hours) >= 5
    return np.where(weekend, s * profile.weekend_factor, s)


def _random_levels(n: int, rng: np.random.Generator, mean_duration: float = 6.0) -> np.ndarray:
    out = np.empty(n)
    t = 0
    while t < n:
        d = int(rng.geometric(1.0 / mean_duration))
        out[t : t + d] = rng.uniform(0.0, 1.0)
        t += d
    return out


def spike_train(profile: CellProfile, hours: int, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative spike factor minus one: Poisson-timed bursts lasting 1-3 hours."""
    extra = np.zeros(hours)
    if profile.spike_rate <= 0 or profile.spike_magnitude == 1:
        return extra
    count = rng.poisson(profile.spike_rate * hours / 24.0)
    starts = rng.integers(0, hours, size=count)
    durations = rng.integers(1, 4, size=count)
    for s, d in zip(starts, durations):
        extra[s : s + d] = profile.spike_magnitude - 1.0
    return extra


def couple(seasonal: np.ndarray, own: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Propagate deviations along handover edges with a one-hour lag.

    ``seasonal`` and ``own`` are (cells, hours); ``weights[i, j]`` is the fraction
    of cell i's deviation that shows up in cell j one hour later. Returns the
    clipped F0 matrix.
    """
    n_cells, hours = seasonal.shape
    f0 = np.empty_like(seasonal)
    transfer = np.zeros(n_cells)
    for t in range(hours):
        f0[:, t] = np.maximum(0.0, seasonal[:, t] + own[:, t] + transfer)
        transfer = (f0[:, t] - seasonal[:, t]) @ weights
    return f0


def generate_scenario(config: ScenarioConfig) -> TelemetryStore:
    """Build a gapless, non-negative :class:`TelemetryStore` from a scenario."""
    start = parse_timestamp(config.start)
    hours = config.hours
    ehours = epoch_hour(start) + np.arange(hours, dtype=np.int64)
    cells = sorted(config.cells)
    pos = {c: i for i, c in enumerate(cells)}
    leaves = config.leaf_slices

    weights = np.zeros((len(cells), len(cells)))
    matrix = {}
    for e in config.handover_edges:
        weights[pos[e.src], pos[e.dst]] += e.coupling * e.rate_percent / 100.0
        matrix[(e.src, e.dst)] = e.rate_percent

    leaf_f0: dict[SliceKind, np.ndarray] = {}
    for sl in leaves:
        seasonal = np.zeros((len(cells), hours))
        own = np.zeros((len(cells), hours))
        for c in cells:
            p = config.cells[c][sl]
            s = seasonal_profile(p, ehours, stream(config.seed, c, sl, "shape"))
            seasonal[pos[c]] = s
            spikes = spike_train(p, hours, stream(config.seed, c, sl, "spike"))
            noise = p.noise_std * stream(config.seed, c, sl, "noise").standard_normal(hours)
            own[pos[c]] = s * spikes + noise
        for inj in config.injections:
            if inj.slice is sl and inj.cell in pos and 0 <= inj.hour < hours:
                own[pos[inj.cell], inj.hour] += inj.value
        leaf_f0[sl] = couple(seasonal, own, weights)

    store = TelemetryStore(handovers=HandoverMatrix(matrix))
    noise = config.aux_feature_noise
    for c in cells:
        i = pos[c]
        total = sum(leaf_f0[sl][i] for sl in leaves)
        if leaves != [SliceKind.TOTAL]:
            for sl in leaves:
                f0 = leaf_f0[sl][i]
                feats = {"F0": f0}
                for lab in ("F-RAN1", "F-RAN2"):
                    feats[lab] = _planted(f0, lab, noise, stream(config.seed, c, sl, lab))
                store.add(CellSeries(c, sl, start, feats))
        feats = {"F0": total}
        for lab in FEATURE_LABELS[1:]:
            rng = stream(config.seed, c, SliceKind.TOTAL, lab)
            if lab in _PLANTED:
                feats[lab] = _planted(total, lab, noise, rng)
            else:
                feats[lab] = 50.0 + 10.0 * rng.standard_normal(hours)
        store.add(CellSeries(c, SliceKind.TOTAL, start, feats))
    return store


def _planted(f0: np.ndarray, label: str, noise: float, rng: np.random.Generator) -> np.ndarray:
    offset, gain = _PLANTED[label]
    return offset + gain * (f0 + noise * rng.standard_normal(len(f0)))


def planted_correlation_check(store: TelemetryStore, label: str, cell: CellId | None = None,
                              slice: SliceKind = SliceKind.TOTAL) -> float:
    """Pearson coefficient of ``label`` against F0 over the whole series."""
    from .features import UnknownLabel, pearson_correlation

    cell = cell if cell is not None else store.cells()[0]
    series = store.get(cell, slice)
    if label not in series.features:
        raise UnknownLabel(f"{label} not present for {cell}/{SliceKind(slice).value}")
    return pearson_correlation(series.features[label], series.f0)


# Reference profiles: voice and data follow the daily cycle, FWA is bursty.
VOICE = CellProfile(base_load=15.0, daily_amplitude=45.0, weekend_factor=0.7, spike_rate=0.3,
                    spike_magnitude=1.5, noise_std=3.0)
DATA = CellProfile(base_load=40.0, daily_amplitude=120.0, weekend_factor=0.8, spike_rate=0.5,
                   spike_magnitude=1.6, noise_std=8.0)
FWA = CellProfile(base_load=30.0, daily_amplitude=60.0, weekend_factor=0.95, spike_rate=0.2,
                  spike_magnitude=1.4, noise_std=5.0, regularity=Regularity.BURSTY)


def default_scenario(seed: int = 0, weeks: int = 16, coupling: float = 0.3,
                     aux_feature_noise: float = 0.5) -> ScenarioConfig:
    """Three cells of base station A, each carrying voice, data and FWA slices."""
    cells = [CellId("A", i) for i in (1, 2, 3)]
    profiles = {c: {SliceKind.VOICE: VOICE, SliceKind.DATA: DATA, SliceKind.FWA: FWA} for c in cells}
    a1, a2, a3 = cells
    edges = [
        HandoverEdge(a1, a2, 30.0, coupling),
        HandoverEdge(a2, a1, 25.0, coupling),
        HandoverEdge(a3, a2, 20.0, coupling),
        HandoverEdge(a2, a3, 15.0, coupling),
        HandoverEdge(a1, a3, 10.0, coupling),
    ]
    return ScenarioConfig(profiles, weeks=weeks, handover_edges=edges,
                          aux_feature_noise=aux_feature_noise, seed=seed)


def coupling_scenario(seed: int = 0, weeks: int = 16, coupling: float = 0.6) -> ScenarioConfig:
    """A quiet target cell ``A1`` fed by two noisy, spiky neighbours."""
    target = CellId("A", 1)
    b, c = CellId("B", 1), CellId("C", 1)
    quiet = CellProfile(base_load=60.0, daily_amplitude=100.0, weekend_factor=0.8, spike_rate=0.0,
                        spike_magnitude=1.0, noise_std=3.0)
    noisy = CellProfile(base_load=80.0, daily_amplitude=120.0, weekend_factor=0.8, spike_rate=2.0,
                        spike_magnitude=1.8, noise_std=25.0)
    cells = {target: {SliceKind.TOTAL: quiet}, b: {SliceKind.TOTAL: noisy}, c: {SliceKind.TOTAL: noisy}}
    edges = [
        HandoverEdge(b, target, 60.0, coupling),
        HandoverEdge(c, target, 40.0, coupling),
        HandoverEdge(target, b, 30.0, 0.0),
        HandoverEdge(target, c, 20.0, 0.0),
    ]
    return ScenarioConfig(cells, weeks=weeks, handover_edges=edges, aux_feature_noise=0.5, seed=seed)


def scenario_echo(config: ScenarioConfig) -> dict:
    d = config.to_dict()
    d["resolved_start"] = format_timestamp(parse_timestamp(config.start))
    d["hours"] = config.hours
    return d


__all__ = [
    "CellProfile",
    "ConfigError",
    "HandoverEdge",
    "Injection",
    "Regularity",
    "ScenarioConfig",
    "coupling_scenario",
    "default_scenario",
    "generate_scenario",
    "planted_correlation_check",
    "scenario_echo",
    "stream",
]
