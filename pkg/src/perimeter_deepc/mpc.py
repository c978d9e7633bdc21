"""Linear perimeter-flow MPC on a piecewise-affine MFD.

The controller freezes the destination shares ``alpha[i, j] = n_ij / n_i``
at the current state, replaces each region's trip-completion rate by a
concave min-of-chords envelope and maximises the length-weighted flow over
the horizon with a linear program.  The first step's inter-region flows are
converted back into gate values and then into actuator splits, each actuator
being bound to a single flow.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as poly

from . import qp as qpmod
from .plant import ActuatorMap, PlantState, RegionNetwork

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PwaMfd:
    """Concave min-of-affine approximation ``G(n) = min_l (slope_l n + intercept_l)``."""

    slopes: np.ndarray
    intercepts: np.ndarray
    breakpoints: np.ndarray
    concavified: bool = False

    def __call__(self, n):
        n = np.asarray(n, dtype=float)
        return np.min(np.multiply.outer(n, self.slopes) + self.intercepts, axis=-1)

    @property
    def pieces(self) -> int:
        return len(self.slopes)


def _upper_hull(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Indices of the upper concave hull of points sorted by ``x``."""
    hull: list[int] = []
    for k in range(len(x)):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            cross = (x[b] - x[a]) * (y[k] - y[a]) - (y[b] - y[a]) * (x[k] - x[a])
            if cross >= 0:
                hull.pop()
            else:
                break
        hull.append(k)
    return np.array(hull)


def fit_pwa(coefficients, n_max: float, pieces: int = 10) -> PwaMfd:
    """Chords of a polynomial MFD over ``pieces`` uniform intervals of ``[0, n_max]``.

    Chords whose slopes increase (non-concave stretches) are replaced by the
    upper concave hull of the breakpoints so that the min-of-affine form
    reproduces the interpolant.
    """
    if pieces < 1:
        raise ValueError("at least one affine piece is required")
    x = np.linspace(0.0, float(n_max), pieces + 1)
    y = poly.polyval(x, np.asarray(coefficients, dtype=float))
    keep = _upper_hull(x, y)
    concavified = len(keep) < len(x)
    if concavified:
        logger.info("MFD is not concave on [0, %g]; using its concave hull (%d of %d chords kept)",
                    n_max, len(keep) - 1, pieces)
    xs, ys = x[keep], y[keep]
    slopes = np.diff(ys) / np.diff(xs)
    intercepts = ys[:-1] - slopes * xs[:-1]
    return PwaMfd(slopes, intercepts, xs, concavified)


@dataclass
class LinearMpcConfig:
    horizon: int = 4
    pieces: int = 10
    step_s: float = 90.0
    assignment: list[int] | None = None      # actuator -> index into network.flows()
    rate_limit: np.ndarray | None = None     # per-flow |u - u_prev| bound, disabled when None
    overflow_penalty: float = 100.0
    tikhonov: float = 1e-9
    settings: qpmod.QpSettings = field(default_factory=lambda: qpmod.QpSettings(max_iter=50000))

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("prediction horizon must be positive")


@dataclass
class MpcStep:
    flows_internal: np.ndarray
    flows_transfer: np.ndarray
    gates: np.ndarray          # per flow
    lam: np.ndarray
    predicted_n: np.ndarray    # (horizon, N)
    status: str
    iterations: int
    objective: float


def default_assignment(actuators: ActuatorMap, network: RegionNetwork) -> list[int]:
    """Bind each actuator to the flow carrying its largest weight (lowest index on ties)."""
    flows = network.flows()
    out = []
    for a in range(actuators.l):
        f = int(np.argmax(actuators.weights[a]))
        out.append(flows.index(actuators.flows[f]))
    return out


class LinearMpc:
    def __init__(self, network: RegionNetwork, actuators: ActuatorMap, config: LinearMpcConfig | None = None):
        self.network = network
        self.actuators = actuators
        self.config = config or LinearMpcConfig()
        self.flows = network.flows()
        self.assignment = (self.config.assignment if self.config.assignment is not None
                           else default_assignment(actuators, network))
        if len(self.assignment) != actuators.l:
            raise ValueError("every actuator needs exactly one assigned flow")
        self.pwa = [
            fit_pwa(network.production[i] / network.trip_length_m[i], network.n_max[i], self.config.pieces)
            for i in range(network.N)
        ]
        self.prev_gates = np.ones(len(self.flows))

    def solve_step(self, state: PlantState, demand_forecast) -> MpcStep:
        """One receding-horizon LP from ``state``.

        ``demand_forecast`` holds ``horizon`` OD matrices (veh/s); a single
        matrix is held constant.
        """
        net, cfg = self.network, self.config
        N, F, H, T = net.N, len(self.flows), cfg.horizon, cfg.step_s
        q = np.asarray(demand_forecast, dtype=float)
        if q.ndim == 2:
            q = np.repeat(q[None], H, axis=0)
        q_in = q[:H].sum(axis=2)                     # (H, N) generated in each region
        n0 = state.n.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            alpha = np.where(n0[:, None] > 0, state.n / n0[:, None], 0.0)
        theta_int = np.array([net.routing[i, i, i] * alpha[i, i] for i in range(N)])
        beta = np.array([np.sum(net.routing[i, :, h] * alpha[i]) for i, h in self.flows])
        src = np.array([i for i, _ in self.flows], dtype=int)
        dst = np.array([h for _, h in self.flows], dtype=int)

        # Unknowns in vehicle units scaled by V: per-step moved vehicles and
        # next accumulations, then overflow slacks.
        V = float(np.max(net.n_max))
        nv = N + F + N + N                          # f_int, f_tr, n_next, slack
        nx = H * nv
        off = lambda k: k * nv
        A_eq = np.zeros((H * N, nx))
        b_eq = np.zeros(H * N)
        ineq, b_in = [], []
        lb = np.zeros(nx)
        ub = np.full(nx, np.inf)
        c = np.zeros(nx)
        Lmax = float(np.max(net.trip_length_m))
        m0 = n0 / V
        for k in range(H):
            o = off(k)
            fi, ft, nn, sl = o, o + N, o + N + F, o + 2 * N + F
            c[fi:fi + N] = -net.trip_length_m / Lmax
            c[ft:ft + F] = -net.trip_length_m[src] / Lmax
            c[sl:sl + N] = cfg.overflow_penalty
            for i in range(N):
                r = k * N + i
                A_eq[r, nn + i] = 1.0
                A_eq[r, fi + i] = 1.0
                for f in range(F):
                    if src[f] == i:
                        A_eq[r, ft + f] += 1.0
                    if dst[f] == i:
                        A_eq[r, ft + f] -= 1.0
                b_eq[r] = T * q_in[k, i] / V
                if k == 0:
                    b_eq[r] += m0[i]
                else:
                    A_eq[r, off(k - 1) + N + F + i] = -1.0
            # flow bounds on the PWA envelope of the current-step accumulation
            for i in range(N):
                pw = self.pwa[i]
                rows = [(fi + i, theta_int[i])] + [(ft + f, beta[f]) for f in range(F) if src[f] == i]
                for col, w in rows:
                    if k == 0:
                        ub[col] = max(0.0, w * T * float(pw(n0[i])) / V)
                        continue
                    for s_, b_ in zip(pw.slopes, pw.intercepts):
                        row = np.zeros(nx)
                        row[col] = 1.0
                        row[off(k - 1) + N + F + i] = -w * T * s_
                        # envelope evaluated at the accumulation net of overflow
                        row[off(k - 1) + 2 * N + F + i] = w * T * s_
                        ineq.append(row)
                        b_in.append(w * T * b_ / V)
            for i in range(N):
                row = np.zeros(nx)
                row[nn + i] = 1.0
                row[sl + i] = -1.0
                ineq.append(row)
                b_in.append(net.n_max[i] / V)
            if k == 0 and cfg.rate_limit is not None:
                G0 = np.array([float(self.pwa[i](n0[i])) for i in src]) * beta * T / V
                lo = np.clip(self.prev_gates - cfg.rate_limit, 0.0, 1.0) * G0
                hi = np.clip(self.prev_gates + cfg.rate_limit, 0.0, 1.0) * G0
                lb[ft:ft + F] = np.maximum(lb[ft:ft + F], lo)
                ub[ft:ft + F] = np.minimum(ub[ft:ft + F], hi)
        qp_ = qpmod.QuadraticProgram(
            P=cfg.tikhonov * np.eye(nx), q=c, A_eq=A_eq, b_eq=b_eq, lb=lb, ub=ub,
            A_ineq=np.array(ineq) if ineq else None, b_ineq=np.array(b_in) if b_in else None,
        )
        sol = qpmod.solve(qp_, cfg.settings)
        if sol.status == qpmod.INFEASIBLE:
            logger.warning("linear MPC reported infeasibility; holding previous gates")
        x = np.clip(sol.x, lb, ub)
        f_int, f_tr = x[:N] * V / T, x[N:N + F] * V / T
        cap = np.array([float(self.pwa[i](n0[i])) for i in src]) * beta
        with np.errstate(invalid="ignore", divide="ignore"):
            gates = np.where(cap > 0, f_tr / cap, 0.0)
        gates = np.clip(gates, 0.0, 1.0)
        if sol.status != qpmod.OPTIMAL:
            gates = self.prev_gates.copy()
        self.prev_gates = gates
        lam = self.actuators.default.copy()
        for a, f in enumerate(self.assignment):
            if np.any(state.n.sum(axis=1) > 0):
                lam[a] = gates[f]
        lam = self.actuators.clip(lam)
        pred = V * np.array([x[off(k) + N + F: off(k) + 2 * N + F] for k in range(H)])
        return MpcStep(f_int, f_tr, gates, lam, pred, sol.status, sol.iterations, -sol.objective)
