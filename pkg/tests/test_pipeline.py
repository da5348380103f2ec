from dataclasses import replace
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slacast import neuralnet as nn
from slacast.features import FeatureSet, ModelKind, NormStats, build_dataset
from slacast.pipeline import (
    REPORT_HORIZONS,
    REPORT_COLUMNS,
    ArchKind,
    EmptyDataset,
    EmptyGrid,
    EvalReport,
    Experiment,
    FoldSpec,
    GridScan,
    GroupKey,
    HeadMetrics,
    HorizonZero,
    MisalignedGroups,
    TrainConfig,
    TrainedModel,
    calibrate,
    evaluate,
    metrics_from_errors,
    predict_multi_step,
    rollout,
    rows_to_csv,
    run_experiment,
    train_multihead,
    train_single,
    validation_objective,
    weight_line_search,
)
from slacast.slaloss import LossKind, LossSpec
from slacast.synthgen import CellProfile, ScenarioConfig, default_scenario, generate_scenario
from slacast.telemetry import CellId, CellSeries, SliceKind, TelemetryStore, split_folds

A1, A2 = CellId("A", 1), CellId("A", 2)
TINY = TrainConfig(epochs_max=3, patience=2, batch=64, lr=3e-3, window=24, hidden=4, seed=0)
FOLDS = FoldSpec(2, 1, 2)


@pytest.fixture(scope="module")
def small():
    store = generate_scenario(default_scenario(seed=0, weeks=4))
    split = FOLDS.splits(4 * 168)[1]
    return store, split


@pytest.fixture(scope="module")
def constant_store():
    flat = CellProfile(base_load=42.0, daily_amplitude=0.0, weekend_factor=1.0, spike_rate=0.0, noise_std=0.0)
    store = generate_scenario(ScenarioConfig({A1: {SliceKind.TOTAL: flat}}, weeks=4, aux_feature_noise=0.0))
    return store, FOLDS.splits(4 * 168)[1]


def test_constant_target_learned(constant_store):
    store, split = constant_store
    b = build_dataset(store, A1, SliceKind.TOTAL, ModelKind.MV_PEAK, split)
    # the weekday flag varies, so the net has to learn to ignore a live input
    assert b.train.inputs[:, :, 2].std() > 0
    cfg = TrainConfig(epochs_max=40, patience=10, batch=32, lr=1e-2, hidden=4)
    m = train_single(b, LossSpec.wmae(1.0), cfg)
    pred = nn.predict(m.params, b.val.inputs)[:, 0]
    assert np.mean(np.abs(pred - b.val.targets)) < 1e-2


def test_zero_epochs_returns_init(small):
    store, split = small
    b = build_dataset(store, A2, SliceKind.TOTAL, ModelKind.UNIVARIATE, split)
    cfg = replace(TINY, epochs_max=0, patience=0)
    m = train_single(b, LossSpec.wmae(2.0), cfg)
    want = nn.init_params(nn.NetConfig((1,), cfg.hidden, cfg.window, 1, cfg.seed))
    assert m.params.equals(want)
    assert m.weights == [2.0]


def test_training_deterministic(small):
    store, split = small
    b = build_dataset(store, A2, SliceKind.TOTAL, ModelKind.MV_ALL, split)
    m1 = train_single(b, LossSpec.wmae(4.0), TINY)
    m2 = train_single(b, LossSpec.wmae(4.0), TINY)
    assert m1.params.equals(m2.params)


def test_training_improves_validation(small):
    store, split = small
    b = build_dataset(store, A2, SliceKind.TOTAL, ModelKind.UNIVARIATE, split)
    spec = [LossSpec.wmae(1.0)]
    init = nn.init_params(nn.NetConfig((1,), TINY.hidden, TINY.window, 1, TINY.seed))
    m = train_single(b, spec[0], replace(TINY, epochs_max=6))
    assert validation_objective(m.params, [b.val], spec) < validation_objective(init, [b.val], spec)


def test_multihead_symmetric_groups(small):
    store, split = small
    twin = TelemetryStore(handovers=store.handovers)
    for key, s in store.series.items():
        twin.add(s)
    src = store.get(A2)
    twin.add(CellSeries(CellId("Z", 2), SliceKind.TOTAL, src.start, dict(src.features), src.offsets))
    bundles = [build_dataset(twin, c, SliceKind.TOTAL, ModelKind.UNIVARIATE, split) for c in (A2, CellId("Z", 2))]
    cfg = TrainConfig(epochs_max=30, patience=6, batch=32, lr=1e-2, hidden=8)
    m = train_multihead(bundles, LossSpec.wmae(1.0), cfg)
    xs = [b.val.inputs for b in bundles]
    pred = nn.predict(m.params, xs)
    losses = [np.mean(np.abs(pred[:, k] - bundles[k].val.targets)) for k in range(2)]
    assert abs(losses[0] - losses[1]) <= 0.05 * max(losses)


def test_multislice_heads(small):
    store, split = small
    slices = (SliceKind.VOICE, SliceKind.DATA, SliceKind.FWA)
    bundles = [build_dataset(store, A2, s, ModelKind.MV_RAN, split) for s in slices]
    for b in bundles:
        assert set(b.fitted.feature_set.channels[1:]) <= {"F-RAN1", "F-RAN2"}
    m = train_multihead(bundles, [LossSpec.wmae(w) for w in (3, 2, 1)], TINY, ArchKind.MULTI_SLICE)
    assert m.params.config.heads == 3
    assert m.params.config.input_channels == tuple(len(b.fitted.feature_set) for b in bundles)
    assert m.weights == [3.0, 2.0, 1.0]


def test_multihead_needs_two_groups(small):
    store, split = small
    b = build_dataset(store, A2, SliceKind.TOTAL, ModelKind.UNIVARIATE, split)
    with pytest.raises(MisalignedGroups):
        train_multihead([b], LossSpec.wmae(1.0), TINY)


def test_line_search_fallback(small):
    store, split = small
    b = build_dataset(store, A2, SliceKind.TOTAL, ModelKind.UNIVARIATE, split)
    res = weight_line_search(b, 0.01, TINY, grid=[1.0])
    assert res.weights == [1.0] and res.unmet == [True]
    with pytest.raises(EmptyGrid):
        weight_line_search(b, 0.05, TINY, grid=[])


def test_line_search_needs_weight_above_one(small):
    store, split = small
    b = build_dataset(store, A2, SliceKind.TOTAL, ModelKind.UNIVARIATE, split)
    res = weight_line_search(b, 0.05, replace(TINY, epochs_max=6, patience=3), grid=[1, 2, 3, 4, 6, 8, 12])
    assert res.rates[1.0][0] > 0.05
    assert res.weight > 1


def test_line_search_picks_smallest_qualifying():
    class FakeScan:
        heads = 2

        def rates(self, w):
            table = {1.0: [0.5, 0.4], 2.0: [0.2, 0.09], 4.0: [0.04, 0.05], 8.0: [0.01, 0.01]}
            return table[w[0]]

    res = calibrate(FakeScan(), [0.05, 0.1], grid=[1, 2, 4, 8])
    assert res.weights == [4.0, 2.0]
    assert res.unmet == [False, False]
    # the scan stops once every head qualifies
    assert sorted(res.rates) == [1.0, 2.0, 4.0]


def zero_model(bias: float, std: float = 1.0, mean: float = 0.0, window: int = 3, w: float = 3.0) -> TrainedModel:
    """Univariate model whose output is the head bias whatever the input."""
    p = nn.init_params(nn.NetConfig(1, hidden_units=2, window=window)).zeros_like()
    p.arrays["head.b"] = np.array([bias])
    return TrainedModel(p, [GroupKey(A1, SliceKind.TOTAL)], [FeatureSet(("F0",))],
                        [NormStats(np.array([mean]), np.array([std]))], [np.zeros(24, dtype=bool)], [w])


def test_multi_step_base_cases(small):
    store, split = small
    b = build_dataset(store, A2, SliceKind.TOTAL, ModelKind.MV_ALL, split)
    m = train_single(b, LossSpec.wmae(2.0), TINY)
    one = predict_multi_step(m, b.test.inputs[0], 1, [int(b.test.target_epoch_hours[0])])
    direct = nn.predict(m.params, b.test.inputs[:1])[0, 0] * b.test.f0_std + b.test.f0_mean
    assert one.shape == (1,) and one[0] == pytest.approx(direct, rel=1e-12)

    z = zero_model(0.5, std=4.0, mean=10.0)
    out = predict_multi_step(z, np.zeros((3, 1)), 2, [0, 1])
    np.testing.assert_allclose(out, [12.0, 12.0])
    with pytest.raises(HorizonZero):
        predict_multi_step(z, np.zeros((3, 1)), 0, [])


def test_rollout_feeds_predictions_back(small):
    store, split = small
    b = build_dataset(store, A2, SliceKind.TOTAL, ModelKind.UNIVARIATE, split)
    m = train_single(b, LossSpec.wmae(2.0), TINY)
    x = b.test.inputs[:5].copy()
    out = rollout(m, [x], b.test.target_epoch_hours[:5], 3)
    manual = []
    cur = x.copy()
    for _ in range(3):
        p = nn.predict(m.params, cur)[:, 0]
        manual.append(p)
        cur = np.concatenate([cur[:, 1:], p[:, None, None]], axis=1)
    np.testing.assert_allclose(out[:, :, 0], np.stack(manual, axis=1), rtol=1e-13)


def test_rollout_calendar_recomputed(small):
    store, split = small
    b = build_dataset(store, A2, SliceKind.TOTAL, ModelKind.MV_PEAK, split)
    m = train_single(b, LossSpec.wmae(2.0), TINY)
    # windows shifted by one hour must see the true calendar of the new hour
    out = rollout(m, [b.test.inputs[:1]], b.test.target_epoch_hours[:1], 2)
    x = b.test.inputs[:1].copy()
    p0 = nn.predict(m.params, x)[0, 0]
    nxt = b.test.inputs[1:2].copy()
    nxt[0, -1, 0] = p0
    assert out[0, 1, 0] == pytest.approx(nn.predict(m.params, nxt)[0, 0], rel=1e-13)


def test_metrics_examples():
    assert metrics_from_errors(np.zeros(5), 4.0) == (0.0, 0.0, 0.0)
    assert metrics_from_errors(np.ones(5), 7.0) == (1.0, 0.0, 1.0)
    assert metrics_from_errors(-np.ones(5), 3.0) == (3.0, 1.0, 0.0)


def test_evaluate_on_constant_series(constant_store):
    store, split = constant_store
    b = build_dataset(store, A1, SliceKind.TOTAL, ModelKind.UNIVARIATE, split)
    # a flat series normalises to zeros with unit scale, so the head bias is the error
    for bias, w, want in ((0.0, 2.0, (0.0, 0.0, 0.0)), (1.0, 5.0, (1.0, 0.0, 1.0)), (-1.0, 3.0, (3.0, 1.0, 0.0))):
        z = zero_model(bias, std=1.0, mean=42.0, window=24, w=w)
        z.fold = split
        r = evaluate(z, b.test, horizons=[1]).get(horizon=1)
        assert (r.sla_loss, r.violation_rate, r.overprov_volume) == want


def test_evaluate_rows_per_horizon(small):
    store, split = small
    b = build_dataset(store, A2, SliceKind.TOTAL, ModelKind.UNIVARIATE, split)
    m = train_single(b, LossSpec.wmae(2.0), TINY)
    rep = evaluate(m, b.test, REPORT_HORIZONS)
    assert [r.horizon for r in rep.rows] == [1, 2, 4, 8, 24]
    assert all(r.n == len(b.test) - r.horizon + 1 for r in rep.rows)
    with pytest.raises(HorizonZero):
        evaluate(m, b.test, [0])


metric = st.floats(0, 100, allow_nan=False)


@given(st.lists(st.tuples(metric, st.floats(0, 1), metric), min_size=1, max_size=8))
def test_fold_aggregation_is_mean(vals):
    rows = [HeadMetrics("A1/total", 1, i, a, b, c, 10, 2.0) for i, (a, b, c) in enumerate(vals)]
    (agg,) = EvalReport(rows).aggregate()
    assert agg.fold == "mean"
    assert agg.sla_loss == float(np.mean([v[0] for v in vals]))
    assert agg.violation_rate == float(np.mean([v[1] for v in vals]))
    assert agg.overprov_volume == float(np.mean([v[2] for v in vals]))


def test_run_experiment_single_fold(small):
    store, _ = small
    exp = Experiment(cells=[A2], horizons=[1, 2], folds=replace(FOLDS, run=(1,)), train=TINY, grid=[1, 2])
    res = run_experiment(store, exp)
    per_fold = [r for r in res.rows if r["fold"] != "mean"]
    assert [r["horizon"] for r in per_fold] == [1, 2]
    assert len(res.models) == 1
    assert rows_to_csv(res.rows).splitlines()[0] == ",".join(REPORT_COLUMNS)


def test_run_experiment_table_shape(small):
    store, _ = small
    exp = Experiment(cells=[A2], model_kinds=list(ModelKind), sla_targets=[0.05, 0.1], horizons=[1],
                     folds=replace(FOLDS, run=(1,)), train=replace(TINY, epochs_max=1, patience=0), grid=[1, 2])
    res = run_experiment(store, exp)
    mean_rows = [r for r in res.rows if r["fold"] == "mean"]
    assert len(mean_rows) == 10
    assert {(r["model_kind"], r["sla_target"]) for r in mean_rows} == {
        (k.value, t) for k in ModelKind for t in (0.05, 0.1)}


def test_run_experiment_folds_and_baselines(small):
    store, _ = small
    exp = Experiment(cells=[A2], baselines=[LossKind.MAE], folds=FOLDS, train=replace(TINY, epochs_max=1, patience=0),
                     grid=[1, 2])
    res = run_experiment(store, exp)
    for label in ("univariate", "baseline_mae"):
        rows = [r for r in res.rows if r["model_kind"] == label]
        assert [r["fold"] for r in rows] == [0, 1, "mean"]
        assert rows[2]["sla_loss"] == float(np.mean([rows[0]["sla_loss"], rows[1]["sla_loss"]]))


def test_run_experiment_empty_store():
    with pytest.raises(EmptyDataset):
        run_experiment(TelemetryStore(), Experiment())


def test_experiment_config_roundtrip():
    exp = Experiment(arch=ArchKind.MULTI_SLICE, cells=[A2], sla_targets=[{"voice": 0.03, "data": 0.05, "fwa": 0.1}],
                     folds=FoldSpec(1, 12, 4), train=TINY)
    back = Experiment.from_dict(exp.to_dict())
    assert back.to_dict() == exp.to_dict()
    with pytest.raises(ValueError):
        Experiment.from_dict({"model": "lstm"})
    with pytest.raises(ValueError):
        Experiment.from_dict({"train": {"hidden": 4, "dropout": 0.1}})
    with pytest.raises(ValueError):
        Experiment.from_dict({"sla_targets": [0.7]})


def test_grid_scan_caches(small):
    store, split = small
    b = build_dataset(store, A2, SliceKind.TOTAL, ModelKind.UNIVARIATE, split)
    scan = GridScan([b], replace(TINY, epochs_max=1, patience=0))
    assert scan.params([2.0]) is scan.params([2.0])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs_max=5, patience=5)
    with pytest.raises(ValueError):
        TrainConfig(window=0)


def test_split_used_by_models(small):
    store, split = small
    b = build_dataset(store, A2, SliceKind.TOTAL, ModelKind.UNIVARIATE, split)
    m = train_single(b, LossSpec.wmae(1.0), replace(TINY, epochs_max=1, patience=0))
    assert m.fold == split
    assert split == split_folds(4 * 168, 2, 1, 2)[1]


def test_half_rate_target_met_at_unit_weight():
    # spike-free gaussian noise: a symmetric loss leaves about half the hours short
    flat_noise = CellProfile(base_load=60.0, daily_amplitude=100.0, weekend_factor=0.8, spike_rate=0.0,
                             spike_magnitude=1.0, noise_std=10.0)
    cfg = TrainConfig(epochs_max=10, patience=3, batch=32, lr=1e-2, hidden=8)
    chosen, rates = [], []
    for seed in range(5):
        store = generate_scenario(ScenarioConfig({A1: {SliceKind.TOTAL: flat_noise}}, weeks=4, seed=seed))
        b = build_dataset(store, A1, SliceKind.TOTAL, ModelKind.MV_PEAK, FOLDS.splits(4 * 168)[1])
        res = weight_line_search(b, 0.5, cfg, grid=[1, 2, 4])
        chosen.append(res.weight)
        rates.append(res.rates[1.0][0])
    assert np.median(chosen) == 1.0
    assert abs(np.median(rates) - 0.5) < 0.1
