"""One network, three slice heads, each with its own violation target."""

# %%
from slacast.features import ModelKind, build_dataset
from slacast.pipeline import ArchKind, FoldSpec, GridScan, TrainConfig, calibrate, calibrated_model, evaluate
from slacast.synthgen import default_scenario, generate_scenario
from slacast.telemetry import CellId, SliceKind

store = generate_scenario(default_scenario(seed=0))
split = FoldSpec(3, 4, 4, run=(2,)).splits(16 * 168)[0]
cfg = TrainConfig(epochs_max=20, patience=3, batch=64, lr=5e-3, hidden=12)
slices = [SliceKind.VOICE, SliceKind.DATA, SliceKind.FWA]
targets = [0.03, 0.05, 0.10]
bundles = [build_dataset(store, CellId("A", 2), s, ModelKind.MV_ALL, split, cfg.window) for s in slices]

# %%
scan = GridScan(bundles, cfg, ArchKind.MULTI_SLICE)
res = calibrate(scan, targets)
print("per-head weights:", res.weights)

# %%
rep = evaluate(calibrated_model(scan, res), [b.test for b in bundles], [1])
for s, t in zip(slices, targets):
    m = rep.get(head=f"A2/{s.value}")
    print(f"{s.value:5s} target {t:.2f}  test rate {m.violation_rate:.3f}")
