"""Updating the DeePC splits less often costs time spent in the network.

The controller is re-solved every 1, 3 or 6 duty cycles. Between updates
the last split is held.
"""
import logging

from perimeter_deepc import harness, scenario

logging.basicConfig(level=logging.WARNING)
cfg = scenario.stress_scenario()
data = harness.collect(cfg)
y_ref = [f.rho_cr for f in harness.fit_region_mfds(data.scatter, cfg.N)]

base = harness.run(cfg, "baseline").time_spent / 3600
print(f"baseline: {base:.0f} veh h")
for period in (1, 3, 6):
    rec = harness.run(cfg, "deepc", data=data.trajectory, y_ref=y_ref, period=period)
    tts = rec.time_spent / 3600
    print(f"DeePC every {period} cycle(s): {tts:.0f} veh h ({100 * (1 - tts / base):.1f}% below baseline)")
