import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slacast.features import UnknownLabel
from slacast.synthgen import (
    CellProfile,
    ConfigError,
    HandoverEdge,
    Injection,
    ScenarioConfig,
    coupling_scenario,
    default_scenario,
    generate_scenario,
    planted_correlation_check,
    seasonal_profile,
    stream,
)
from slacast.telemetry import CellId, SliceKind, validate_series, weekday

A1, A2 = CellId("A", 1), CellId("A", 2)
FLAT = CellProfile(base_load=42.0, daily_amplitude=0.0, weekend_factor=1.0, spike_rate=0.0, noise_std=0.0)


def stores_equal(a, b) -> bool:
    if set(a.series) != set(b.series) or a.handovers.entries != b.handovers.entries:
        return False
    for key, s in a.series.items():
        t = b.series[key]
        if set(s.features) != set(t.features):
            return False
        if not all(np.array_equal(s.features[k], t.features[k]) for k in s.features):
            return False
    return True


def test_constant_profile():
    cfg = ScenarioConfig({A1: {SliceKind.TOTAL: FLAT}}, weeks=1)
    s = generate_scenario(cfg).get(A1)
    assert s.length == 168
    assert (s.f0 == 42.0).all()


def test_same_seed_bit_identical():
    cfg = default_scenario(seed=5, weeks=2)
    assert stores_equal(generate_scenario(cfg), generate_scenario(cfg))


def test_different_seed_differs():
    a = generate_scenario(default_scenario(seed=1, weeks=1))
    b = generate_scenario(default_scenario(seed=2, weeks=1))
    assert not stores_equal(a, b)


def test_adding_a_cell_keeps_other_draws():
    p = CellProfile()
    one = generate_scenario(ScenarioConfig({A1: {SliceKind.TOTAL: p}}, weeks=1, seed=3))
    two = generate_scenario(ScenarioConfig({A1: {SliceKind.TOTAL: p}, A2: {SliceKind.TOTAL: p}}, weeks=1, seed=3))
    np.testing.assert_array_equal(one.get(A1).f0, two.get(A1).f0)


def test_coupling_transfer_example():
    # source gets +10 at hour h; half of a 100% handover share reaches the target one hour later
    h = 30
    inj = [Injection(A1, SliceKind.TOTAL, h, 10.0)]

    def target(coupling):
        cfg = ScenarioConfig({A1: {SliceKind.TOTAL: FLAT}, A2: {SliceKind.TOTAL: FLAT}}, weeks=1,
                             handover_edges=[HandoverEdge(A1, A2, 100.0, coupling)], injections=inj)
        return generate_scenario(cfg).get(A2).f0

    coupled, base = target(0.5), target(0.0)
    expected = 10.0 * 0.5 * 100.0 / 100.0
    assert coupled[h + 1] - base[h + 1] == pytest.approx(expected, abs=1e-12)
    diff = coupled - base
    diff[h + 1] = 0.0
    assert not diff.any()


def test_total_is_sum_of_slices():
    store = generate_scenario(default_scenario(seed=0, weeks=1))
    for c in store.cells():
        parts = sum(store.get(c, sl).f0 for sl in (SliceKind.VOICE, SliceKind.DATA, SliceKind.FWA))
        np.testing.assert_allclose(store.get(c).f0, parts, rtol=0, atol=1e-12)
        assert set(store.get(c, SliceKind.VOICE).features) == {"F0", "F-RAN1", "F-RAN2"}


def test_exact_affine_channel():
    store = generate_scenario(default_scenario(seed=0, weeks=2, aux_feature_noise=0.0))
    assert planted_correlation_check(store, "F-RAN1") == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_planted_and_noise_channels(seed):
    store = generate_scenario(default_scenario(seed=seed, weeks=10))
    assert abs(planted_correlation_check(store, "F-RAN10")) < 0.2
    assert planted_correlation_check(store, "F-RAN1") > 0.9


def test_unknown_label():
    store = generate_scenario(default_scenario(seed=0, weeks=1))
    with pytest.raises(UnknownLabel):
        planted_correlation_check(store, "F-RAN7", slice=SliceKind.VOICE)


def test_weekday_above_weekend():
    p = CellProfile(base_load=20.0, daily_amplitude=80.0, weekend_factor=0.6, spike_rate=1.0, noise_std=0.0)
    s = generate_scenario(ScenarioConfig({A1: {SliceKind.TOTAL: p}}, weeks=2, seed=4)).get(A1)
    wk = weekday(s.epoch_hours()) < 5
    assert s.f0[wk].mean() > s.f0[~wk].mean()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 1.0))
def test_output_always_valid(seed, coupling):
    store = generate_scenario(default_scenario(seed=seed, weeks=1, coupling=coupling))
    for s in store.series.values():
        assert validate_series(s).ok


def _lag1(seed, coupling):
    cfg = coupling_scenario(seed, weeks=8, coupling=coupling)
    store = generate_scenario(cfg)
    src, dst = CellId("B", 1), CellId("A", 1)
    eh = store.get(src).epoch_hours()
    seasonal = seasonal_profile(cfg.cells[src][SliceKind.TOTAL], eh, stream(cfg.seed, src, SliceKind.TOTAL, "shape"))
    dev = store.get(src).f0 - seasonal
    return np.corrcoef(dev[:-1], store.get(dst).f0[1:])[0, 1]


def test_lag1_correlation_grows_with_coupling():
    med = [np.median([_lag1(s, c) for s in range(5)]) for c in (0.2, 0.5, 0.9)]
    assert med[0] > 0
    assert med[0] < med[1] < med[2]


def test_config_validation():
    with pytest.raises(ConfigError):
        CellProfile(base_load=0)
    with pytest.raises(ConfigError):
        CellProfile(weekend_factor=1.2)
    with pytest.raises(ConfigError):
        HandoverEdge(A1, A2, 10.0, coupling=1.5)
    with pytest.raises(ConfigError):
        ScenarioConfig({A1: {SliceKind.TOTAL: FLAT}}, weeks=0)
    with pytest.raises(ConfigError):
        ScenarioConfig({A1: {SliceKind.TOTAL: FLAT, SliceKind.VOICE: FLAT}})


def test_config_dict_roundtrip():
    cfg = default_scenario(seed=9, weeks=3)
    back = ScenarioConfig.from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict()
    d = cfg.to_dict()
    d["colour"] = "blue"
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict(d)
