"""Calibrate the wMAE weight of a single-cell model to a violation-rate target."""

# %%
from slacast.features import ModelKind, build_dataset
from slacast.pipeline import FoldSpec, GridScan, TrainConfig, calibrate, calibrated_model, evaluate, train_single
from slacast.slaloss import LossKind, LossSpec
from slacast.synthgen import default_scenario, generate_scenario
from slacast.telemetry import CellId, SliceKind

store = generate_scenario(default_scenario(seed=0))
split = FoldSpec(3, 4, 4, run=(2,)).splits(16 * 168)[0]
cfg = TrainConfig(epochs_max=20, patience=3, batch=64, lr=5e-3, hidden=12)
bundle = build_dataset(store, CellId("A", 2), SliceKind.TOTAL, ModelKind.MV_ALL, split, cfg.window)

# %%
# each weight on the grid trains one model; the scan stops once the target is met
scan = GridScan([bundle], cfg)
res = calibrate(scan, 0.05)
print("chosen w:", res.weight, "unmet:", res.flag_unmet)
for w, r in sorted(res.rates.items()):
    print(f"  w={w:5.1f} validation rate {r[0]:.3f}")

# %%
model = calibrated_model(scan, res)
m = evaluate(model, bundle.test, [1]).get()
print(f"test violation rate {m.violation_rate:.3f}  overprovisioning {m.overprov_volume:.2f}  loss {m.sla_loss:.2f}")

# %%
# a plain MAE model for contrast, scored with the same weight
mae = train_single(bundle, LossSpec(LossKind.MAE), cfg)
b = evaluate(mae, bundle.test, [1], weights=[res.weight]).get()
print(f"MAE model: violation rate {b.violation_rate:.3f}  loss {b.sla_loss:.2f}")
