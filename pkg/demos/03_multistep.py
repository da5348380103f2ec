"""Recursive multi-step forecasts: how the SLA loss grows with the horizon."""

# %%
from slacast.features import ModelKind, build_dataset
from slacast.pipeline import FoldSpec, TrainConfig, evaluate, train_single
from slacast.slaloss import LossSpec
from slacast.synthgen import default_scenario, generate_scenario
from slacast.telemetry import CellId, SliceKind

store = generate_scenario(default_scenario(seed=1))
split = FoldSpec(3, 4, 4, run=(2,)).splits(16 * 168)[0]
cfg = TrainConfig(epochs_max=20, patience=3, batch=64, lr=5e-3, hidden=12)

# %%
for kind in (ModelKind.UNIVARIATE, ModelKind.MV_ALL):
    bundle = build_dataset(store, CellId("A", 1), SliceKind.TOTAL, kind, split, cfg.window)
    model = train_single(bundle, LossSpec.wmae(20.0), cfg)
    rep = evaluate(model, bundle.test, [1, 2, 4, 8, 24])
    print(kind.value)
    for h in (1, 2, 4, 8, 24):
        m = rep.get(horizon=h)
        print(f"  h={h:2d}  rate {m.violation_rate:.3f}  loss {m.sla_loss:.2f}")
