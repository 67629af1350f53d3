"""Simulate one jammed link and look at what the feature stage makes of it.

Run:  python demos/01_signals_and_features.py
"""
import numpy as np

from jamdetect import features as F
from jamdetect import synth as S

# A line-of-sight flight with two jammers at 20 dBm, 200 m out.
rec = S.generate(S.ScenarioConfig(condition="LoS", attackers=2, attacker_power_dbm=20.0,
                                  distance_m=200.0, length=2000, seed=1))
summary = S.summarize(rec)
print("samples:", len(rec), " attacked share: %.2f" % rec.attacked_ratio)
for k, v in summary.items():
    print(f"  {k}: {v}")

clean, jammed = rec.sinr[~rec.label], rec.sinr[rec.label]
print("SINR clean %.1f dB, jammed %.1f dB, gap %.1f dB" % (clean.mean(), jammed.mean(),
                                                           clean.mean() - jammed.mean()))

# Every 300-step window becomes one row. Nine views of that row are compressed
# by PCA; the top five scores of each view are appended to the raw window.
x = F.rolling_window(rec.rssi)
views = F.apply_transformations(x)
print("windows:", x.shape, " view widths:", [v.shape[1] for v in views])

em, fitted = F.enhance(rec.rssi)
print("components kept per view:", [p.n_retained for p in fitted.pcas])
print("enhanced matrix:", em.shape, "(300 raw +", fitted.n_pca, "PCA columns)")
print("PCA block stays inside the raw range:",
      bool(em.pca.min() >= x.min() and em.pca.max() <= x.max()))

# A slowly varying signal collapses each view to a single component, which is
# where the shorter 309-column width of NLoS-like traces comes from.
ramp, fitted_ramp = F.enhance(np.linspace(-50.0, -20.0, 900))
print("ramp enhanced width:", ramp.shape[1], " kept:", [p.n_retained for p in fitted_ramp.pcas])
