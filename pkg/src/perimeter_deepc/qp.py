"""Dense convex QP solver and an l1-to-QP reformulation layer.

Problems have the form::

    minimize    1/2 x'Px + q'x
    subject to  A_eq x = b_eq
                A_ineq x <= b_ineq
                lb <= x <= ub

and are solved by an operator-splitting (ADMM) iteration in the style of
OSQP: Ruiz equilibration, a fixed penalty vector, over-relaxation, and a
final active-set polish that solves the reduced KKT system exactly.
"""
from __future__ import annotations

import hashlib
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"

INF = np.inf


@dataclass
class QuadraticProgram:
    P: np.ndarray
    q: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    A_ineq: np.ndarray | None = None
    b_ineq: np.ndarray | None = None

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(-1)
        n = q.shape[0]
        P = np.asarray(self.P, dtype=float).reshape(n, n)
        self.P = 0.5 * (P + P.T)
        self.q = q
        self.A_eq, self.b_eq = _rows(self.A_eq, self.b_eq, n, "equality")
        self.A_ineq, self.b_ineq = _rows(self.A_ineq, self.b_ineq, n, "inequality")
        self.lb = np.full(n, -INF) if self.lb is None else np.asarray(self.lb, dtype=float).reshape(n)
        self.ub = np.full(n, INF) if self.ub is None else np.asarray(self.ub, dtype=float).reshape(n)
        if np.any(self.lb > self.ub):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def n(self) -> int:
        return self.q.shape[0]

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.P @ x + self.q @ x)


def _rows(A, b, n, what):
    if A is None:
        return np.zeros((0, n)), np.zeros(0)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return np.zeros((0, n)), np.zeros(0)
    b = np.asarray(b, dtype=float).reshape(-1)
    if A.shape[1] != n or A.shape[0] != b.shape[0]:
        raise ValueError(f"{what} constraints have shape {A.shape} with rhs {b.shape}, expected (*, {n})")
    return A, b


@dataclass
class QpSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 20000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    scaling_iter: int = 10
    check_every: int = 25
    eps_pinf: float = 1e-6
    polish: bool = True
    polish_delta: float = 1e-9
    polish_refine: int = 5
    adaptive_rho: bool = True
    adapt_every: int = 100


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    primal_residual: float
    dual_residual: float
    iterations: int
    status: str
    complementarity: float = 0.0
    polished: bool = False
    y_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_ineq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_bound: np.ndarray = field(default_factory=lambda: np.zeros(0))


class _Stacked:
    """All constraints as ``l <= A x <= u`` with row bookkeeping."""

    def __init__(self, qp: QuadraticProgram):
        n = qp.n
        bounded = np.where(np.isfinite(qp.lb) | np.isfinite(qp.ub))[0]
        I = np.zeros((bounded.size, n))
        I[np.arange(bounded.size), bounded] = 1.0
        self.A = np.vstack([qp.A_eq, qp.A_ineq, I])
        self.l = np.concatenate([qp.b_eq, np.full(qp.b_ineq.shape[0], -INF), qp.lb[bounded]])
        self.u = np.concatenate([qp.b_eq, qp.b_ineq, qp.ub[bounded]])
        self.n_eq = qp.A_eq.shape[0]
        self.n_ineq = qp.A_ineq.shape[0]
        self.bounded = bounded


def _ruiz(P, q, A, iters):
    n, mc = P.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(mc)
    Ps, As, qs = P.copy(), A.copy(), q.copy()
    for _ in range(iters):
        col = np.maximum(np.abs(Ps).max(axis=0, initial=0.0), np.abs(As).max(axis=0, initial=0.0))
        row = np.abs(As).max(axis=1, initial=0.0)
        dD = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
        dE = 1.0 / np.sqrt(np.clip(row, 1e-4, 1e4))
        Ps = dD[:, None] * Ps * dD[None, :]
        As = dE[:, None] * As * dD[None, :]
        qs = dD * qs
        D *= dD
        E *= dE
    pn = np.abs(Ps).max(axis=0, initial=0.0).mean() if n else 0.0
    qn = np.abs(qs).max(initial=0.0)
    c = 1.0 / np.clip(max(pn, qn), 1e-4, 1e4)
    return Ps * c, qs * c, As, D, E, c


def _residuals(qp: QuadraticProgram, st: _Stacked, x, y):
    """Unscaled KKT residuals: (primal, dual, complementarity)."""
    Ax = st.A @ x
    viol = np.maximum(st.l - Ax, 0.0) + np.maximum(Ax - st.u, 0.0)
    prim = float(np.max(viol, initial=0.0))
    dual = float(np.max(np.abs(qp.P @ x + qp.q + st.A.T @ y), initial=0.0))
    with np.errstate(invalid="ignore"):
        up = np.where(y > 0, y * (st.u - Ax), 0.0)
        lo = np.where(y < 0, -y * (Ax - st.l), 0.0)
    comp = np.nan_to_num(np.abs(up) + np.abs(lo), nan=np.inf)
    # a nonzero multiplier on an infinite side is a sign violation
    sign_bad = ((y > 0) & ~np.isfinite(st.u)) | ((y < 0) & ~np.isfinite(st.l))
    comp = float(np.max(np.where(sign_bad, np.abs(y), comp), initial=0.0))
    return prim, dual, comp


def _polish(qp: QuadraticProgram, st: _Stacked, x, z, y, s: QpSettings, rounds: int = 4):
    """Solve the equality-constrained KKT system of the guessed active set.

    The guess comes from the ADMM iterate; constraints whose multipliers come
    out with the wrong sign are released and violated ones added, for a few
    rounds, before giving up.
    """
    eq = st.l == st.u
    lower = (z - st.l < -y) | eq
    upper = (st.u - z < y) & ~lower
    n = qp.n
    tol = s.eps_abs
    for _ in range(rounds):
        active = lower | upper
        Aa = st.A[active]
        ba = np.where(lower[active], st.l[active], st.u[active])
        k = Aa.shape[0]
        K = np.block([[qp.P, Aa.T], [Aa, np.zeros((k, k))]])
        Kreg = K + np.diag(np.concatenate([np.full(n, s.polish_delta), np.full(k, -s.polish_delta)]))
        rhs = np.concatenate([-qp.q, ba])
        try:
            lu = sla.lu_factor(Kreg, check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            return None
        sol = sla.lu_solve(lu, rhs, check_finite=False)
        for _ in range(s.polish_refine):
            sol = sol + sla.lu_solve(lu, rhs - K @ sol, check_finite=False)
        xp = sol[:n]
        yp = np.zeros(st.A.shape[0])
        yp[active] = sol[n:]
        Ax = st.A @ xp
        wrong = (lower & ~eq & (yp > tol)) | (upper & (yp < -tol))
        below = ~active & (Ax < st.l - tol)
        above = ~active & (Ax > st.u + tol)
        if not (wrong.any() or below.any() or above.any()):
            break
        lower = (lower & ~wrong) | below
        upper = (upper & ~wrong) | above
    return xp, yp


_CACHE_SIZE = 8
_cache: OrderedDict = OrderedDict()
_cache_lock = threading.Lock()


def _factorize(qp: QuadraticProgram, st: _Stacked, s: QpSettings):
    """Scaling and the ADMM linear-system factor, reused across problems that
    differ only in their right-hand sides (receding-horizon solves)."""
    key = hashlib.sha1()
    for arr in (qp.P, qp.q, st.A, st.l == st.u, np.isfinite(st.l) | np.isfinite(st.u)):
        key.update(np.ascontiguousarray(arr).tobytes())
        key.update(str(arr.shape).encode())
    key.update(repr((s.rho, s.sigma, s.scaling_iter)).encode())
    digest = key.digest()
    with _cache_lock:
        hit = _cache.get(digest)
        if hit is not None:
            _cache.move_to_end(digest)
            return hit
    n, mc = qp.n, st.A.shape[0]
    Ps, qs, As, D, E, c = _ruiz(qp.P, qp.q, st.A, s.scaling_iter)
    rho = np.full(mc, s.rho)
    rho[st.l == st.u] *= 1e3
    rho[~np.isfinite(st.l) & ~np.isfinite(st.u)] = 1e-6
    K = Ps + s.sigma * np.eye(n) + As.T @ (rho[:, None] * As)
    out = (Ps, qs, As, D, E, c, rho, sla.cho_factor(K, check_finite=False))
    with _cache_lock:
        _cache[digest] = out
        while len(_cache) > _CACHE_SIZE:
            _cache.popitem(last=False)
    return out


def solve(qp: QuadraticProgram, settings: QpSettings | None = None, x0=None) -> QpSolution:
    """Solve a convex QP; see module docstring for the problem form.

    ``x0`` optionally injects an initial primal iterate.  The iteration is
    fully deterministic for identical inputs.
    """
    s = settings or QpSettings()
    st = _Stacked(qp)
    n, mc = qp.n, st.A.shape[0]
    Ps, qs, As, D, E, c, rho, cho = _factorize(qp, st, s)
    ls = np.where(np.isfinite(st.l), E * st.l, -INF)
    us = np.where(np.isfinite(st.u), E * st.u, INF)

    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float) / D
    z = np.clip(As @ x, ls, us)
    y = np.zeros(mc)
    a = s.alpha
    best = None
    polish_tried_at = -10**9
    status = MAX_ITER
    it = 0

    def unscale(xs, zs, ys):
        return D * xs, zs / E, E * ys / c

    for it in range(1, s.max_iter + 1):
        y_prev = y
        rhs = s.sigma * x - qs + As.T @ (rho * z - y)
        xt = sla.cho_solve(cho, rhs, check_finite=False)
        zt = As @ xt
        x = a * xt + (1 - a) * x
        zr = a * zt + (1 - a) * z
        z_new = np.clip(zr + y / rho, ls, us)
        y = y + rho * (zr - z_new)
        z = z_new

        if it % s.check_every and it != s.max_iter:
            continue
        xu, zu, yu = unscale(x, z, y)
        Ax = st.A @ xu
        prim = float(np.max(np.abs(Ax - zu), initial=0.0))
        Px = qp.P @ xu
        ATy = st.A.T @ yu
        dual = float(np.max(np.abs(Px + qp.q + ATy), initial=0.0))
        prim_tol = s.eps_abs + s.eps_rel * max(np.max(np.abs(Ax), initial=0.0), np.max(np.abs(zu), initial=0.0))
        dual_tol = s.eps_abs + s.eps_rel * max(np.max(np.abs(Px), initial=0.0),
                                               np.max(np.abs(ATy), initial=0.0),
                                               np.max(np.abs(qp.q), initial=0.0))
        admm_done = prim <= prim_tol and dual <= dual_tol
        if s.adaptive_rho and not admm_done and it % s.adapt_every == 0:
            new_rho = _adapted_rho(Ps, qs, As, x, z, y, rho)
            if new_rho is not None:
                rho = new_rho
                K = Ps + s.sigma * np.eye(n) + As.T @ (rho[:, None] * As)
                cho = sla.cho_factor(K, check_finite=False)
        coarse = prim <= 1e3 * prim_tol and dual <= 1e3 * dual_tol

        if s.polish and mc > 0 and (admm_done or (coarse and it - polish_tried_at >= 4 * s.check_every)):
            polish_tried_at = it
            out = _polish(qp, st, xu, zu, yu, s)
            if out is not None:
                xp, yp = out
                r = _residuals(qp, st, xp, yp)
                if max(r) <= s.eps_abs:
                    best = (xp, yp, r, True)
                    status = OPTIMAL
                    break
        if admm_done:
            # the relative stopping rule is necessary but the contract is absolute KKT accuracy
            r = _residuals(qp, st, xu, yu)
            if max(r) <= s.eps_abs:
                best = (xu, yu, r, False)
                status = OPTIMAL
                break
        if _primal_infeasible(As, ls, us, y - y_prev, s.eps_pinf):
            status = INFEASIBLE
            break

    if best is None:
        xu, _, yu = unscale(x, z, y)
        best = (xu, yu, _residuals(qp, st, xu, yu), False)
    xf, yf, (prim, dual, comp), polished = best
    if status == MAX_ITER:
        logger.info("QP hit max_iter=%d (prim=%.2e dual=%.2e)", s.max_iter, prim, dual)
    return QpSolution(
        x=xf, objective=qp.objective(xf), primal_residual=prim, dual_residual=dual,
        iterations=it, status=status, complementarity=comp, polished=polished,
        y_eq=yf[: st.n_eq], y_ineq=yf[st.n_eq : st.n_eq + st.n_ineq],
        y_bound=_expand_bounds(yf[st.n_eq + st.n_ineq :], st.bounded, n),
    )


def _adapted_rho(Ps, qs, As, x, z, y, rho):
    """Rebalance the penalty from the ratio of scaled primal and dual residuals."""
    Ax = As @ x
    Px = Ps @ x
    ATy = As.T @ y
    tiny = 1e-12
    rp = np.max(np.abs(Ax - z), initial=0.0) / max(np.max(np.abs(Ax), initial=0.0), np.max(np.abs(z), initial=0.0), tiny)
    rd = np.max(np.abs(Px + qs + ATy), initial=0.0) / max(np.max(np.abs(Px), initial=0.0),
                                                          np.max(np.abs(ATy), initial=0.0),
                                                          np.max(np.abs(qs), initial=0.0), tiny)
    factor = np.sqrt(max(rp, tiny) / max(rd, tiny))
    factor = float(np.clip(factor, 1e-3, 1e3))
    if 0.2 <= factor <= 5.0:
        return None
    return np.clip(rho * factor, 1e-6, 1e6)


def _expand_bounds(yb, bounded, n):
    out = np.zeros(n)
    out[bounded] = yb
    return out


def _primal_infeasible(As, l, u, dy, eps):
    norm = np.max(np.abs(dy), initial=0.0)
    if norm < 1e-12:
        return False
    dy = np.where(np.abs(dy) > eps * norm, dy, 0.0)
    if np.any((dy > 0) & ~np.isfinite(u)) or np.any((dy < 0) & ~np.isfinite(l)):
        return False
    if np.max(np.abs(As.T @ dy), initial=0.0) > eps * norm:
        return False
    pos, neg = dy > 0, dy < 0
    support = float(u[pos] @ dy[pos] + l[neg] @ dy[neg])
    return support < -eps * norm


def reformulate_l1(qp: QuadraticProgram, l1_terms) -> QuadraticProgram:
    """Replace ``sum_k w_k ||S_k x||_1`` terms by epigraph variables.

    Each selector is an index array or a matrix acting on the original
    variables.  For every row of ``S`` an auxiliary ``t >= 0`` is appended
    together with ``S x - t <= 0`` and ``-S x - t <= 0``; its linear cost is
    the term weight.  Auxiliary variables come after the original ones.
    """
    n = qp.n
    sels = []
    for weight, selector in l1_terms:
        if weight < 0:
            raise ValueError(f"l1 weight must be nonnegative, got {weight}")
        S = np.asarray(selector)
        if S.ndim == 1:
            idx = S.astype(int)
            S = np.zeros((idx.size, n))
            S[np.arange(idx.size), idx] = 1.0
        S = np.atleast_2d(S).astype(float)
        if S.shape[1] != n:
            raise ValueError(f"selector has {S.shape[1]} columns, problem has {n} variables")
        sels.append((float(weight), S))
    k = sum(S.shape[0] for _, S in sels)
    if k == 0:
        return qp
    N = n + k
    P = np.zeros((N, N))
    P[:n, :n] = qp.P
    q = np.concatenate([qp.q, np.concatenate([np.full(S.shape[0], w) for w, S in sels])])
    rows, off = [], n
    for _, S in sels:
        r = S.shape[0]
        T = np.zeros((r, k))
        T[:, off - n : off - n + r] = np.eye(r)
        rows.append(np.hstack([S, -T]))
        rows.append(np.hstack([-S, -T]))
        off += r
    A_new = np.vstack(rows)
    A_ineq = np.vstack([np.hstack([qp.A_ineq, np.zeros((qp.A_ineq.shape[0], k))]), A_new])
    b_ineq = np.concatenate([qp.b_ineq, np.zeros(A_new.shape[0])])
    A_eq = np.hstack([qp.A_eq, np.zeros((qp.A_eq.shape[0], k))])
    return QuadraticProgram(
        P=P, q=q, A_eq=A_eq, b_eq=qp.b_eq,
        lb=np.concatenate([qp.lb, np.zeros(k)]), ub=np.concatenate([qp.ub, np.full(k, INF)]),
        A_ineq=A_ineq, b_ineq=b_ineq,
    )


def l1_objective(qp: QuadraticProgram, l1_terms, x) -> float:
    """Direct evaluation of ``1/2 x'Px + q'x + sum w ||S x||_1``."""
    x = np.asarray(x, dtype=float)
    val = qp.objective(x)
    for weight, selector in l1_terms:
        S = np.asarray(selector)
        Sx = x[S.astype(int)] if S.ndim == 1 else S @ x
        val += weight * float(np.sum(np.abs(Sx)))
    return val


_SECTIONS = ("P", "q", "A_eq", "b_eq", "lb", "ub", "A_ineq", "b_ineq")


def dump_qp(qp: QuadraticProgram, path) -> None:
    """Write a plain-text dump: one ``# name rows cols`` header per dense section."""
    with open(path, "w") as fh:
        for name in _SECTIONS:
            M = np.atleast_2d(getattr(qp, name))
            if name in ("q", "b_eq", "lb", "ub", "b_ineq"):
                M = M.reshape(1, -1)
            fh.write(f"# {name} {M.shape[0]} {M.shape[1]}\n")
            for row in M:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_qp(path) -> QuadraticProgram:
    data = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    i = 0
    while i < len(lines):
        _, name, r, c = lines[i].split()
        r, c = int(r), int(c)
        rows = [[float(v) for v in lines[i + 1 + j].split()] for j in range(r)]
        data[name] = np.array(rows, dtype=float).reshape(r, c)
        i += 1 + r
    vec = {k: data[k].reshape(-1) for k in ("q", "b_eq", "lb", "ub", "b_ineq")}
    return QuadraticProgram(P=data["P"], A_eq=data["A_eq"], A_ineq=data["A_ineq"], **vec)
