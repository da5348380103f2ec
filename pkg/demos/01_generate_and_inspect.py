"""Generate a synthetic three-cell scenario and look at what came out."""

# %%
import numpy as np

from slacast.features import fit_features, ModelKind
from slacast.synthgen import default_scenario, generate_scenario, planted_correlation_check
from slacast.telemetry import CellId, SliceKind, split_folds

store = generate_scenario(default_scenario(seed=0, weeks=16))
print(sorted(f"{c}/{s.value}" for c, s in store.series))

# %%
# the total is the sum of the three slices, hour by hour
a1 = CellId("A", 1)
total = store.get(a1).features["F0"]
parts = sum(store.get(a1, s).features["F0"] for s in (SliceKind.VOICE, SliceKind.DATA, SliceKind.FWA))
print("max |total - sum(slices)|:", np.abs(total - parts).max())

# %%
# daily shape, averaged over the whole series
daily = total[: len(total) // 24 * 24].reshape(-1, 24).mean(axis=0)
print(np.round(daily, 1))

# %%
for lab in ("F-RAN1", "F-RAN2", "F-RAN3", "F-RAN4", "F-RAN5", "F-RAN12"):
    print(lab, round(planted_correlation_check(store, lab, a1), 3))

# %%
split = split_folds(16 * 168, 3, 4, 4)[2]
fitted = fit_features(store, a1, SliceKind.TOTAL, ModelKind.MV_ALL, split)
print("selected:", fitted.selected)
print("peak hours:", np.flatnonzero(fitted.peak_flags).tolist())
for (src, dst), rate in store.handovers.entries.items():
    print(f"handover {src} -> {dst}: {rate:.1f}%")
