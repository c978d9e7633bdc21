"""Post-hoc analytics: PCA of applied splits, run metrics and MFD comparison tables."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .harness import RunRecord

GRIDLOCK_FRACTION = 0.98
GRIDLOCK_CYCLES = 3


@dataclass(frozen=True)
class PcaResult:
    evr: np.ndarray           # (k,) normalised over the retained components
    eigenvalues: np.ndarray   # (k,) descending
    components: np.ndarray    # (l, k) orthonormal columns
    scores: np.ndarray        # (T, k)
    mean: np.ndarray          # (l,)

    @property
    def loadings(self) -> np.ndarray:
        return self.components

    def reconstruct(self) -> np.ndarray:
        """Centred input matrix rebuilt from the retained components, shape (l, T)."""
        return (self.scores @ self.components.T).T


def pca(lam, k: int | None = None) -> PcaResult:
    """PCA of an ``l x T`` split matrix with time steps as observations.

    Each actuator row is centred, the ``l x l`` sample covariance is
    diagonalised and explained-variance ratios use only the ``k`` retained
    eigenvalues in the denominator.  Component signs are fixed so the
    largest-magnitude loading is positive.
    """
    X = np.asarray(lam, dtype=float)
    if X.ndim != 2:
        raise ValueError("input log must be a 2-D actuators x steps matrix")
    l, T = X.shape
    if T < 2:
        raise ValueError("PCA needs at least two time steps")
    k = min(l, T) if k is None else int(k)
    if not 1 <= k <= min(l, T):
        raise ValueError(f"k must lie in [1, {min(l, T)}]")
    mean = X.mean(axis=1)
    Z = (X - mean[:, None]).T                       # (T, l)
    cov = Z.T @ Z / (T - 1)
    w, V = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1][:k]
    w = np.clip(w[order], 0.0, None)
    V = V[:, order]
    total = w.sum()
    if total <= 0.0:
        raise ValueError("input log has no variance; explained-variance ratios are undefined")
    pivot = np.argmax(np.abs(V), axis=0)
    V = V * np.sign(V[pivot, np.arange(k)])
    return PcaResult(w / total, w, V, Z @ V, mean)


@dataclass(frozen=True)
class ActuatorRanking:
    order: list[int]
    values: np.ndarray

    def top(self, k: int) -> list[int]:
        return [a for a in self.order[:k] if self.values[a] > 0]

    def bottom(self, k: int) -> list[int]:
        return [a for a in self.order[::-1][:k] if self.values[a] < 0]


def rank_actuators(loadings) -> ActuatorRanking:
    """Actuators sorted by descending loading; equal loadings keep id order."""
    v = np.asarray(loadings, dtype=float).ravel()
    order = sorted(range(len(v)), key=lambda a: (-v[a], a))
    return ActuatorRanking(order, v)


@dataclass(frozen=True)
class MetricsSummary:
    controller: str
    period: int
    time_spent_veh_h: float
    travel_time_min: float | None
    trips_completed: float
    demand_total: float
    peak_density: np.ndarray
    gridlock: bool

    def as_row(self) -> dict[str, str]:
        row = {
            "controller": self.controller,
            "period": str(self.period),
            "time_spent_veh_h": repr(self.time_spent_veh_h),
            "travel_time_min": "" if self.travel_time_min is None else repr(self.travel_time_min),
            "trips_completed": repr(self.trips_completed),
            "demand_total": repr(self.demand_total),
            "gridlock": str(int(self.gridlock)),
        }
        for i, v in enumerate(self.peak_density):
            row[f"peak_rho_{i}"] = repr(float(v))
        return row


def gridlock_flag(rho, rho_max, fraction: float = GRIDLOCK_FRACTION, cycles: int = GRIDLOCK_CYCLES) -> bool:
    """True when some region stays at or above ``fraction * rho_max`` for ``cycles`` consecutive cycles."""
    rho = np.atleast_2d(np.asarray(rho, dtype=float))
    if rho.size == 0:
        return False
    hit = rho >= fraction * np.asarray(rho_max, dtype=float)
    for col in hit.T:
        run = 0
        for h in col:
            run = run + 1 if h else 0
            if run >= cycles:
                return True
    return False


def recomputed_time_spent(rec: RunRecord) -> float:
    """Vehicle-seconds rebuilt from the per-plant-step state dump."""
    if rec.plant_n.size == 0:
        return 0.0
    return float(rec.plant_step_s * (rec.plant_n.sum() + rec.plant_queue.sum()))


def summarize_run(rec: RunRecord) -> MetricsSummary:
    tts = rec.time_spent / 3600.0
    tt = None
    if rec.trips_completed > 0:
        tt = rec.time_spent / rec.trips_completed / 60.0
    N = len(rec.region_names)
    peak = rec.rho.max(axis=0) if rec.rho.size else np.zeros(N)
    return MetricsSummary(rec.controller, rec.period, tts, tt, rec.trips_completed, rec.demand_total,
                          peak, gridlock_flag(rec.rho, rec.rho_max))


def mfd_comparison(estimates, grid_points: int = 200) -> np.ndarray:
    """Flow curves of several MFD estimates on a shared density grid, columns ``rho, q_1, ..., q_m``."""
    top = max(e.rho_max if e.rho_max is not None else e.rho_cr * 2 for e in estimates)
    rho = np.linspace(0.0, top, grid_points)
    return np.column_stack([rho] + [np.maximum(e(rho), 0.0) for e in estimates])


def _write(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def write_pca(res: PcaResult, out_dir, actuator_names=None) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k = len(res.evr)
    names = actuator_names or [str(a) for a in range(res.components.shape[0])]
    comp = _write(out / "pca_components.csv", ["step", *[f"PC{j + 1}" for j in range(k)]],
                  ([t, *map(repr, map(float, s))] for t, s in enumerate(res.scores)))
    load = _write(out / "loadings.csv", ["actuator", *[f"PC{j + 1}" for j in range(k)]],
                  ([names[a], *map(repr, map(float, res.components[a]))] for a in range(len(names))))
    evr = _write(out / "evr.csv", ["component", "evr", "eigenvalue"],
                 ([f"PC{j + 1}", repr(float(res.evr[j])), repr(float(res.eigenvalues[j]))] for j in range(k)))
    return {"pca_components": comp, "loadings": load, "evr": evr}


def write_metrics(summaries, path) -> Path:
    rows = [s.as_row() for s in summaries]
    header = list(rows[0]) if rows else ["controller"]
    return _write(Path(path), header, ([r.get(h, "") for h in header] for r in rows))


def write_mfd_comparison(table: np.ndarray, labels, path) -> Path:
    return _write(Path(path), ["rho", *labels], ([*map(repr, map(float, r))] for r in table))


def analyze_run(rec: RunRecord, out_dir, k: int | None = None, estimates=None, labels=None) -> dict[str, Path]:
    """Write the PCA, metrics and MFD-comparison CSVs for a finished run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    lam = rec.lam.T
    if lam.shape[1] >= 2 and np.ptp(lam, axis=1).max() > 0:
        kk = min(k or lam.shape[0], *lam.shape)
        paths.update(write_pca(pca(lam, kk), out, rec.actuator_names))
    else:
        paths["pca_components"] = _write(out / "pca_components.csv", ["step"], [])
        paths["loadings"] = _write(out / "loadings.csv", ["actuator"], ([a] for a in rec.actuator_names))
    paths["metrics_summary"] = write_metrics([summarize_run(rec)], out / "metrics_summary.csv")
    if estimates:
        table = mfd_comparison(estimates)
        labels = labels or [f"q_{j}" for j in range(len(estimates))]
    else:
        # empirical end-of-cycle scatter, one density/flow column pair per region
        table = np.column_stack([c for i in range(rec.rho.shape[1]) for c in (rec.rho[:, i], rec.phi[:, i])]) \
            if rec.rho.size else np.zeros((0, 1))
        labels = None
    if labels is None:
        names = rec.region_names
        hdr = [h for r in names for h in (f"rho_{r}", f"phi_{r}")]
        paths["mfd_comparison"] = _write(out / "mfd_comparison.csv", hdr,
                                         ([*map(repr, map(float, r))] for r in table))
    else:
        paths["mfd_comparison"] = write_mfd_comparison(table, labels, out / "mfd_comparison.csv")
    return paths
