"""Baseline, linear MPC and DeePC on the two-region stress scenario.

The static signal plan lets the inner region fill up until it locks. The
MPC opens the gates and avoids that, though the inner region still goes
far past its critical density during the second peak. DeePC learns from
one excitation experiment and the fitted MFDs, then holds the inner region
close to its critical density.
"""
import logging

from perimeter_deepc import analysis, harness, scenario

logging.basicConfig(level=logging.WARNING)
cfg = scenario.stress_scenario()

print("collecting excitation data ...")
data = harness.collect(cfg)
fits = harness.fit_region_mfds(data.scatter, cfg.N)
for name, f in zip(cfg.build_network().names, fits):
    print(f"  {name}: critical density {f.rho_cr:.1f} veh/km, maximal density {f.rho_max:.1f} veh/km")

runs = {
    "baseline": harness.run(cfg, "baseline"),
    "mpc": harness.run(cfg, "mpc"),
    "deepc": harness.run(cfg, "deepc", data=data.trajectory, y_ref=[f.rho_cr for f in fits]),
}
print(f"{'controller':<10} {'veh h':>8} {'gridlock':>9}  peak density / rho_max")
for name, rec in runs.items():
    s = analysis.summarize_run(rec)
    peak = (rec.rho / rec.rho_max).max(axis=0)
    print(f"{name:<10} {s.time_spent_veh_h:8.0f} {str(s.gridlock):>9}  {peak.round(2)}")
