"""Quartic MFD estimation from (density, flow) scatter."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.polynomial import polynomial as poly
from scipy.optimize import bisect

DEGREE = 4
GRID_POINTS = 10_000
XTOL = 1e-9


class DegenerateFitError(ValueError):
    pass


@dataclass(frozen=True)
class MfdEstimate:
    coefficients: np.ndarray      # ascending: phi = sum c_k rho^k
    rho_cr: float
    rho_max: float | None
    rmse: float
    diagnostic: str = ""

    def __call__(self, rho):
        return poly.polyval(rho, self.coefficients)


def _sign_change_roots(c: np.ndarray, lo: float, hi: float, n: int = GRID_POINTS):
    """Roots of the polynomial ``c`` in ``[lo, hi]`` bracketed on a uniform grid."""
    x = np.linspace(lo, hi, n)
    v = poly.polyval(x, c)
    f = lambda t: poly.polyval(t, c)
    roots = []
    for k in range(n - 1):
        a, b = v[k], v[k + 1]
        if a == 0.0:
            roots.append((x[k], k))
        elif a * b < 0:
            roots.append((bisect(f, x[k], x[k + 1], xtol=XTOL), k))
    if v[-1] == 0.0:
        roots.append((x[-1], n - 1))
    return roots, x, v


def _stationary_points(c: np.ndarray, lo: float, hi: float) -> list[float]:
    return [r for r, _ in _sign_change_roots(poly.polyder(c), lo, hi)[0]]


def _smallest_vanishing_density(c: np.ndarray, hi: float) -> float | None:
    """Smallest positive density where the fitted flow drops to zero.

    Simple crossings are found on the sign grid; tangential zeros (double
    roots) show up as stationary points where the flow is numerically zero.
    """
    lo = hi * 1e-9
    roots, x, v = _sign_change_roots(c, lo, hi)
    scale = max(np.max(np.abs(v)), np.finfo(float).tiny)
    cands = [r for r, k in roots if r > lo and poly.polyval(r - 10 * XTOL, c) > 0]
    for s in _stationary_points(c, lo, hi):
        val = poly.polyval(s, c)
        if abs(val) <= 1e-9 * scale and poly.polyval(s - 1e-3 * (s - lo), c) > 0:
            cands.append(s)
    return min(cands) if cands else None


def fit(points) -> MfdEstimate:
    """Least-squares quartic through ``(rho, phi)`` samples with critical and maximal density.

    Densities are rescaled to ``[0, 1]`` for the solve and the coefficients
    mapped back, which keeps the Vandermonde system well conditioned.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be an (n, 2) array of (density, flow)")
    if pts.shape[0] < 10:
        raise ValueError(f"at least 10 points are required, got {pts.shape[0]}")
    rho, phi = pts[:, 0], pts[:, 1]
    if np.any(rho < 0) or np.any(phi < 0) or not np.all(np.isfinite(pts)):
        raise ValueError("densities and flows must be finite and nonnegative")
    if not np.any(phi > 0):
        raise DegenerateFitError("all flows are zero; the MFD cannot be estimated")
    s = float(np.max(rho))
    if s <= 0:
        raise DegenerateFitError("all densities are zero")
    V = np.vander(rho / s, DEGREE + 1, increasing=True)
    cs, *_ = np.linalg.lstsq(V, phi, rcond=None)
    c = cs / s ** np.arange(DEGREE + 1)
    rmse = float(np.sqrt(np.mean((poly.polyval(rho, c) - phi) ** 2)))

    hi = 3.0 * s
    rho_max = _smallest_vanishing_density(c, hi)
    diag = "" if rho_max is not None else f"no zero-flow density in (0, {hi:g}]"
    top = rho_max if rho_max is not None else hi
    cand = [r for r in _stationary_points(c, top * 1e-9, top) if 0 < r < top]
    if not cand:
        raise DegenerateFitError("fitted MFD has no interior maximum")
    vals = poly.polyval(np.array(cand), c)
    rho_cr = float(cand[int(np.argmax(vals))])
    return MfdEstimate(c, rho_cr, rho_max, rmse, diag)


def critical_reference(estimates, regions=None) -> np.ndarray:
    """Stack per-region critical densities into the tracking reference."""
    if isinstance(estimates, dict):
        keys = list(estimates) if regions is None else list(regions)
        missing = [r for r in keys if estimates.get(r) is None]
        if missing:
            raise KeyError(f"no MFD estimate for region(s) {missing}")
        return np.array([estimates[r].rho_cr for r in keys])
    est = list(estimates)
    if regions is not None and len(est) != len(regions):
        raise KeyError(f"expected {len(regions)} estimates, got {len(est)}")
    if any(e is None for e in est):
        raise KeyError(f"no MFD estimate for region(s) {[i for i, e in enumerate(est) if e is None]}")
    return np.array([e.rho_cr for e in est])


def compare(points_a, points_b) -> tuple[MfdEstimate, MfdEstimate]:
    """Fit two scatter sets (e.g. uncontrolled vs controlled) side by side."""
    return fit(points_a), fit(points_b)


def read_scatter_csv(path) -> np.ndarray:
    rows = []
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["density", "flow"]:
            raise ValueError(f"{path}:1: header must be 'density,flow'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}") from exc
    return np.array(rows).reshape(-1, 2)


def write_scatter_csv(path, points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["density", "flow"])
        for r, f in np.asarray(points, dtype=float):
            w.writerow([repr(float(r)), repr(float(f))])


def write_fit_csv(path, est: MfdEstimate, samples: int = 200, rho_hi: float | None = None) -> None:
    hi = rho_hi or (est.rho_max if est.rho_max is not None else 2.0 * est.rho_cr)
    grid = np.linspace(0.0, hi, samples)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["density", "flow_fit"])
        for r, f in zip(grid, est(grid)):
            w.writerow([f"{r:.9g}", f"{f:.9g}"])


def summary_line(est: MfdEstimate) -> str:
    rmax = "nan" if est.rho_max is None else f"{est.rho_max:.9g}"
    return f"rho_cr,rho_max,rmse\n{est.rho_cr:.9g},{rmax},{est.rmse:.9g}"
