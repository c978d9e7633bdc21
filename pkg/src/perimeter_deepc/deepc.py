"""Regularized data-enabled predictive control.

The decision vector of the assembled QP is ``col(g, sigma_y, u, y)`` followed
by the l1 epigraph variables added by :func:`qp.reformulate_l1`.  Inputs are
ordered per time step as ``u(k) = col(lambda(k), d(k))``: the ``l`` actuator
splits first, then the exogenous demand channels.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import qp as qpmod
from .lti import RANK_RTOL, HankelBlocks

logger = logging.getLogger(__name__)


@dataclass
class DeePCConfig:
    T_ini: int = 5
    T_f: int = 4
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda_y: float = 0.0
    Q: np.ndarray | None = None
    R: np.ndarray | None = None
    lambda_lb: np.ndarray | float = 0.0
    lambda_ub: np.ndarray | float = 0.95
    duty_cycle_steps: int = 1
    apply_steps: int = 1
    rho_max: np.ndarray | float = np.inf
    y_min: float = 0.0
    n_actuators: int | None = None

    def __post_init__(self):
        if self.T_ini < 1 or self.T_f < 1:
            raise ValueError("horizons must be positive")
        if min(self.lambda1, self.lambda2, self.lambda_y) < 0:
            raise ValueError("regularization weights must be nonnegative")
        if self.duty_cycle_steps < 1 or self.T_f % self.duty_cycle_steps:
            raise ValueError(f"T_f={self.T_f} is not a multiple of duty_cycle_steps={self.duty_cycle_steps}")
        if not 1 <= self.apply_steps <= self.T_f:
            raise ValueError(f"apply_steps must lie in [1, T_f], got {self.apply_steps}")
        lb = np.atleast_1d(np.asarray(self.lambda_lb, dtype=float))
        ub = np.atleast_1d(np.asarray(self.lambda_ub, dtype=float))
        if np.any(lb < 0) or np.any(lb > ub) or np.any(ub >= 1):
            raise ValueError("split bounds must satisfy 0 <= lb <= ub < 1")

    def bounds(self, l: int) -> tuple[np.ndarray, np.ndarray]:
        return (np.broadcast_to(np.asarray(self.lambda_lb, dtype=float), (l,)).copy(),
                np.broadcast_to(np.asarray(self.lambda_ub, dtype=float), (l,)).copy())


@dataclass
class InputConstraintSet:
    """Hold (``M u = 0``) and demand (``D u = d_bar``) constraints over the horizon."""

    M: np.ndarray
    D: np.ndarray
    d_bar: np.ndarray
    lambda_lb: np.ndarray
    lambda_ub: np.ndarray
    n_actuators: int
    n_demand: int

    @property
    def m(self) -> int:
        return self.n_actuators + self.n_demand

    def contains(self, u, tol=1e-8) -> bool:
        u = np.asarray(u, dtype=float)
        U = u.reshape(-1, self.m)
        lam, dem = U[:, : self.n_actuators], U[:, self.n_actuators :]
        return bool(
            np.all(lam >= self.lambda_lb - tol) and np.all(lam <= self.lambda_ub + tol)
            and np.all(dem >= -tol)
            and np.max(np.abs(self.M @ u), initial=0.0) <= tol
            and np.max(np.abs(self.D @ u - self.d_bar), initial=0.0) <= tol
        )


def build_input_constraints(n_actuators: int, n_demand: int, T_f: int, duty_cycle_steps: int,
                            d_bar, lambda_lb, lambda_ub) -> InputConstraintSet:
    m = n_actuators + n_demand
    if T_f % duty_cycle_steps:
        raise ValueError(f"T_f={T_f} is not a multiple of duty_cycle_steps={duty_cycle_steps}")
    M = np.zeros((m * T_f, m * T_f))
    row = 0
    for k in range(T_f):
        if (k + 1) % duty_cycle_steps == 0:
            continue  # last step of a duty cycle: next step may change
        for a in range(n_actuators):
            M[row, k * m + a] = 1.0
            M[row, (k + 1) * m + a] = -1.0
            row += 1
    D = np.zeros((n_demand * T_f, m * T_f))
    for k in range(T_f):
        for j in range(n_demand):
            D[k * n_demand + j, k * m + n_actuators + j] = 1.0
    d_bar = np.asarray(d_bar, dtype=float).reshape(-1)
    if d_bar.shape[0] != n_demand * T_f:
        raise ValueError(f"demand forecast must have {n_demand * T_f} entries, got {d_bar.shape[0]}")
    lb = np.broadcast_to(np.asarray(lambda_lb, dtype=float), (n_actuators,)).copy()
    ub = np.broadcast_to(np.asarray(lambda_ub, dtype=float), (n_actuators,)).copy()
    return InputConstraintSet(M, D, d_bar, lb, ub, n_actuators, n_demand)


@dataclass
class RecentWindow:
    u_ini: np.ndarray
    y_ini: np.ndarray


def build_projection(blocks: HankelBlocks) -> np.ndarray:
    """Orthogonal projector onto the row space of ``col(U_p, Y_p, U_f)``."""
    Z = np.vstack([blocks.U_p, blocks.Y_p, blocks.U_f])
    N = Z.shape[1]
    if not np.any(Z):
        return np.zeros((N, N))
    _, s, Vt = np.linalg.svd(Z, full_matrices=False)
    tol = max(Z.shape) * s[0] * RANK_RTOL
    V = Vt[s > tol].T
    return V @ V.T


@dataclass
class Layout:
    """Index ranges of the blocks inside the decision vector."""

    N: int
    n_sigma: int
    n_u: int
    n_y: int

    @property
    def g(self):
        return slice(0, self.N)

    @property
    def sigma(self):
        return slice(self.N, self.N + self.n_sigma)

    @property
    def u(self):
        s = self.N + self.n_sigma
        return slice(s, s + self.n_u)

    @property
    def y(self):
        s = self.N + self.n_sigma + self.n_u
        return slice(s, s + self.n_y)

    @property
    def size(self):
        return self.N + self.n_sigma + self.n_u + self.n_y


def assemble(config: DeePCConfig, blocks: HankelBlocks, window: RecentWindow, y_ref, u_ref,
             constraints: InputConstraintSet, projection: np.ndarray | None = None):
    """Build the regularized DeePC quadratic program.

    Returns ``(qp, layout)``.  The l1 penalties on ``g`` and ``sigma_y`` are
    already rewritten into linear epigraph form.  With ``lambda_y == 0`` the
    slack is pinned to zero, i.e. the past-output equation is enforced exactly.
    """
    T_ini, T_f = config.T_ini, config.T_f
    if blocks.T_ini != T_ini or blocks.T_f != T_f:
        raise ValueError("Hankel blocks were built for different horizons")
    if T_f % config.duty_cycle_steps:
        raise ValueError("T_f is not a multiple of duty_cycle_steps")
    m, p, N = blocks.m, blocks.p, blocks.n_cols
    if constraints.m != m:
        raise ValueError(f"constraint set is for m={constraints.m}, data has m={m}")
    u_ini = np.asarray(window.u_ini, dtype=float).reshape(-1)
    y_ini = np.asarray(window.y_ini, dtype=float).reshape(-1)
    y_ref = np.asarray(y_ref, dtype=float).reshape(-1)
    u_ref = np.asarray(u_ref, dtype=float).reshape(-1)
    if u_ini.size != m * T_ini or y_ini.size != p * T_ini:
        raise ValueError("recent window does not match T_ini")
    if y_ref.size != p * T_f or u_ref.size != m * T_f:
        raise ValueError("references must cover the prediction horizon")

    Q = np.eye(p) if config.Q is None else np.atleast_2d(np.asarray(config.Q, dtype=float))
    R = np.eye(m) if config.R is None else np.atleast_2d(np.asarray(config.R, dtype=float))
    if Q.shape != (p, p) or R.shape != (m, m):
        raise ValueError(f"Q must be {p}x{p} and R {m}x{m}")

    lay = Layout(N, p * T_ini, m * T_f, p * T_f)
    n = lay.size
    P = np.zeros((n, n))
    q = np.zeros(n)
    if config.lambda1 > 0:
        Pi = build_projection(blocks) if projection is None else projection
        IPi = np.eye(N) - Pi
        P[lay.g, lay.g] = 2.0 * config.lambda1 * (IPi.T @ IPi)
    Qbar = np.kron(np.eye(T_f), Q)
    Rbar = np.kron(np.eye(T_f), R)
    P[lay.y, lay.y] = 2.0 * Qbar
    q[lay.y] = -2.0 * Qbar @ y_ref
    P[lay.u, lay.u] = 2.0 * Rbar
    q[lay.u] = -2.0 * Rbar @ u_ref

    rows = []
    rhs = []
    H = np.zeros((m * T_ini + p * T_ini + m * T_f + p * T_f, n))
    H[:, lay.g] = np.vstack([blocks.U_p, blocks.Y_p, blocks.U_f, blocks.Y_f])
    r0 = m * T_ini
    H[r0 : r0 + p * T_ini, lay.sigma] = -np.eye(p * T_ini)
    r1 = r0 + p * T_ini
    H[r1 : r1 + m * T_f, lay.u] = -np.eye(m * T_f)
    r2 = r1 + m * T_f
    H[r2:, lay.y] = -np.eye(p * T_f)
    rows.append(H)
    rhs.append(np.concatenate([u_ini, y_ini, np.zeros(m * T_f + p * T_f)]))

    Mrows = constraints.M[np.any(constraints.M != 0, axis=1)]
    for C, b in ((Mrows, np.zeros(Mrows.shape[0])), (constraints.D, constraints.d_bar)):
        if C.shape[0]:
            E = np.zeros((C.shape[0], n))
            E[:, lay.u] = C
            rows.append(E)
            rhs.append(b)

    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    ulb = np.tile(np.concatenate([constraints.lambda_lb, np.zeros(constraints.n_demand)]), T_f)
    uub = np.tile(np.concatenate([constraints.lambda_ub, np.full(constraints.n_demand, np.inf)]), T_f)
    lb[lay.u], ub[lay.u] = ulb, uub
    rho_max = np.broadcast_to(np.asarray(config.rho_max, dtype=float), (p,))
    lb[lay.y] = config.y_min
    ub[lay.y] = np.tile(rho_max, T_f)
    if config.lambda_y == 0:
        lb[lay.sigma] = ub[lay.sigma] = 0.0

    base = qpmod.QuadraticProgram(P=P, q=q, A_eq=np.vstack(rows), b_eq=np.concatenate(rhs), lb=lb, ub=ub)
    terms = []
    if config.lambda2 > 0:
        terms.append((config.lambda2, np.arange(N)))
    if config.lambda_y > 0:
        terms.append((config.lambda_y, np.arange(lay.sigma.start, lay.sigma.stop)))
    return qpmod.reformulate_l1(base, terms), lay


@dataclass
class StepResult:
    inputs: np.ndarray          # (j, m) inputs to apply, oldest first
    plan: np.ndarray            # (T_f, m) full optimal input plan U_f g*
    predicted_y: np.ndarray     # (T_f, p)
    status: str
    iterations: int
    degraded: bool
    objective: float = np.nan
    solve: qpmod.QpSolution | None = field(default=None, repr=False)


class DeePCController:
    """Receding-horizon DeePC driven by a fixed offline data set.

    The controller owns the recent input/output window.  Call
    :meth:`receding_horizon_step` to obtain the next ``apply_steps`` inputs,
    then :meth:`update_window` once per applied step with the measurement.
    """

    def __init__(self, config: DeePCConfig, blocks: HankelBlocks, y_ref, lambda_ref,
                 n_demand: int = 0, settings: qpmod.QpSettings | None = None):
        self.config = config
        self.blocks = blocks
        self.m, self.p = blocks.m, blocks.p
        self.n_demand = n_demand
        self.l = self.m - n_demand
        if self.l < 0:
            raise ValueError("more demand channels than inputs")
        self.y_ref = np.broadcast_to(np.asarray(y_ref, dtype=float), (self.p,)).copy()
        self.lambda_ref = np.broadcast_to(np.asarray(lambda_ref, dtype=float), (self.l,)).copy()
        self.lambda_lb, self.lambda_ub = config.bounds(self.l)
        self.settings = settings or qpmod.QpSettings()
        self.projection = build_projection(blocks) if config.lambda1 > 0 else None
        self._u = deque(maxlen=config.T_ini)
        self._y = deque(maxlen=config.T_ini)
        self.degraded_steps = 0

    @property
    def ready(self) -> bool:
        return len(self._u) == self.config.T_ini

    def update_window(self, u, y) -> None:
        self._u.append(np.asarray(u, dtype=float).reshape(self.m).copy())
        self._y.append(np.asarray(y, dtype=float).reshape(self.p).copy())

    def window(self) -> RecentWindow:
        if not self.ready:
            raise RuntimeError("recent window is not full yet")
        return RecentWindow(np.concatenate(self._u), np.concatenate(self._y))

    def reference_input(self, d_bar) -> np.ndarray:
        D = np.asarray(d_bar, dtype=float).reshape(self.config.T_f, self.n_demand)
        return np.hstack([np.tile(self.lambda_ref, (self.config.T_f, 1)), D])

    def build_problem(self, d_bar):
        cfg = self.config
        d_bar = np.asarray(d_bar, dtype=float).reshape(-1)
        cons = build_input_constraints(self.l, self.n_demand, cfg.T_f, cfg.duty_cycle_steps,
                                       d_bar, self.lambda_lb, self.lambda_ub)
        u_ref = self.reference_input(d_bar).reshape(-1)
        y_ref = np.tile(self.y_ref, cfg.T_f)
        return assemble(cfg, self.blocks, self.window(), y_ref, u_ref, cons, self.projection)

    def receding_horizon_step(self, d_bar=None) -> StepResult:
        cfg = self.config
        if d_bar is None:
            d_bar = np.zeros(self.n_demand * cfg.T_f)
        qp, lay = self.build_problem(d_bar)
        sol = qpmod.solve(qp, self.settings)
        j = cfg.apply_steps
        if sol.status != qpmod.OPTIMAL:
            self.degraded_steps += 1
            logger.warning("DeePC solve ended with status %s; applying reference input", sol.status)
            ref = self.reference_input(d_bar)
            return StepResult(ref[:j], ref, np.full((cfg.T_f, self.p), np.nan), sol.status,
                              sol.iterations, True, sol.objective, sol)
        g = sol.x[lay.g]
        plan = (self.blocks.U_f @ g).reshape(cfg.T_f, self.m)
        plan[:, : self.l] = np.clip(plan[:, : self.l], self.lambda_lb, self.lambda_ub)
        if self.n_demand:
            plan[:, self.l :] = np.asarray(d_bar, dtype=float).reshape(cfg.T_f, self.n_demand)
        y_pred = (self.blocks.Y_f @ g).reshape(cfg.T_f, self.p)
        return StepResult(plan[:j].copy(), plan, y_pred, sol.status, sol.iterations, False,
                          sol.objective, sol)
