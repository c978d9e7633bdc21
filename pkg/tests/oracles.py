"""Independent reference computations used by the test-suite."""
import itertools

import numpy as np


def active_set_qp(P, q, A_eq, b_eq, lb, ub, tol=1e-8):
    """Exhaustive active-set solve of a small box+equality QP.

    Every variable is either free, pinned at its lower bound or at its upper
    bound.  For each pattern the equality-constrained KKT system is solved by
    least squares; consistent, feasible, dual-feasible points are kept and the
    lowest objective wins.
    """
    n = len(q)
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(A_eq)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq)
    best_val, best_x = np.inf, None
    for pattern in itertools.product((0, 1, 2), repeat=n):
        fixed = [i for i, s in enumerate(pattern) if s]
        if any(pattern[i] == 1 and not np.isfinite(lb[i]) for i in fixed):
            continue
        if any(pattern[i] == 2 and not np.isfinite(ub[i]) for i in fixed):
            continue
        k = len(fixed)
        F = np.zeros((k, n))
        vals = np.zeros(k)
        for r, i in enumerate(fixed):
            F[r, i] = 1.0
            vals[r] = lb[i] if pattern[i] == 1 else ub[i]
        C = np.vstack([A_eq, F])
        d = np.concatenate([b_eq, vals])
        mc = C.shape[0]
        K = np.block([[P, C.T], [C, np.zeros((mc, mc))]])
        rhs = np.concatenate([-q, d])
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        if np.max(np.abs(K @ sol - rhs)) > 1e-7 * (1 + np.max(np.abs(rhs))):
            continue
        x = sol[:n]
        if np.any(x < lb - tol) or np.any(x > ub + tol):
            continue
        if A_eq.shape[0] and np.max(np.abs(A_eq @ x - b_eq)) > tol:
            continue
        val = 0.5 * x @ P @ x + q @ x
        if val < best_val - 1e-12:
            best_val, best_x = val, x
    return best_val, best_x


def random_box_qp(rng, n_max=6, eq_max=3):
    n = int(rng.integers(1, n_max + 1))
    r = int(rng.integers(0, n + 1))
    G = rng.standard_normal((r, n))
    P = G.T @ G
    q = rng.standard_normal(n) * 2
    n_eq = int(rng.integers(0, min(eq_max, n - 1) + 1)) if n > 1 else 0
    lb = -rng.uniform(0.5, 2.0, n)
    ub = rng.uniform(0.5, 2.0, n)
    A_eq = rng.standard_normal((n_eq, n))
    # right-hand side from an interior point keeps every instance feasible
    x_in = rng.uniform(lb * 0.5, ub * 0.5)
    b_eq = A_eq @ x_in
    return P, q, A_eq, b_eq, lb, ub


def connected(nodes, neighbors):
    nodes = set(nodes)
    if not nodes:
        return False
    start = min(nodes)
    seen, stack = {start}, [start]
    while stack:
        v = stack.pop()
        for w in neighbors[v]:
            if w in nodes and w not in seen:
                seen.add(w)
                stack.append(w)
    return seen == nodes


def best_connected_bipartition(densities, neighbors):
    """Exhaustive minimum within-region variance over connected 2-partitions.

    Road 0 is fixed in part 0 so every unordered split is visited once.
    Returns (labels, objective).
    """
    rho = np.asarray(densities, dtype=float)
    n = len(rho)
    best, best_labels = np.inf, None
    for mask in range(1 << (n - 1)):
        labels = np.array([0] + [(mask >> (i - 1)) & 1 for i in range(1, n)])
        a = [i for i in range(n) if labels[i] == 0]
        b = [i for i in range(n) if labels[i] == 1]
        if not b or not connected(a, neighbors) or not connected(b, neighbors):
            continue
        val = np.sum((rho[a] - rho[a].mean()) ** 2) + np.sum((rho[b] - rho[b].mean()) ** 2)
        if val < best - 1e-12:
            best, best_labels = val, labels
    return best_labels, best


def _random_connected_graph(rng, n):
    order = rng.permutation(n)
    edges = set()
    for k in range(1, n):
        a, b = int(order[k]), int(order[rng.integers(0, k)])
        edges.add((min(a, b), max(a, b)))
    for _ in range(int(rng.integers(0, n // 2 + 1))):
        a, b = rng.choice(n, 2, replace=False)
        edges.add((int(min(a, b)), int(max(a, b))))
    nbrs = [set() for _ in range(n)]
    for a, b in edges:
        nbrs[a].add(b)
        nbrs[b].add(a)
    return edges, nbrs


def _connected_high_set(rng, n, nbrs, attempts=200):
    for _ in range(attempts):
        size = int(rng.integers(2, n - 1))
        start = int(rng.integers(0, n))
        high, frontier = {start}, [start]
        while len(high) < size and frontier:
            v = frontier.pop(0)
            for w in sorted(nbrs[v]):
                if len(high) < size and w not in high:
                    high.add(w)
                    frontier.append(w)
        if connected(set(range(n)) - high, nbrs):
            return high
    return None


def two_level_fixture(rng, n_roads=None):
    """Random connected road graph with a connected high-density community.

    A random spanning tree is grown over the roads, a few extra edges are
    added, then a connected subset grown by BFS from a random road gets the
    high density level.  Subsets whose complement is disconnected are
    redrawn; graphs admitting no such subset (stars, for instance) are
    replaced.  Both levels carry small uniform jitter.
    """
    n = int(rng.integers(6, 13)) if n_roads is None else n_roads
    high = None
    while high is None:
        edges, nbrs = _random_connected_graph(rng, n)
        high = _connected_high_set(rng, n, nbrs)
    low_level, high_level = 10.0, 40.0
    rho = np.where(np.isin(np.arange(n), list(high)), high_level, low_level) + rng.uniform(-1.0, 1.0, n)
    return rho, sorted(edges)


def recursion_outputs(A, B, C, D, x0, u):
    """Plain-loop state-space recursion written independently of the library."""
    A, B, C, D = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, C, D))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    x = np.array(x0, dtype=float).reshape(-1)
    out = []
    for t in range(u.shape[1]):
        out.append([sum(C[i, k] * x[k] for k in range(len(x))) + sum(D[i, j] * u[j, t] for j in range(u.shape[0]))
                    for i in range(C.shape[0])])
        x = np.array([sum(A[i, k] * x[k] for k in range(len(x))) + sum(B[i, j] * u[j, t] for j in range(u.shape[0]))
                      for i in range(len(x))])
    return np.array(out).T


def hankel_by_windows(w, L):
    """Depth-L Hankel matrix assembled column by column from explicit windows."""
    w = np.atleast_2d(np.asarray(w, dtype=float))
    cols = [np.concatenate([w[:, j + i] for i in range(L)]) for j in range(w.shape[1] - L + 1)]
    return np.array(cols).T


def fundamental_lemma_case(rng, lti):
    """One random instance of the rank/image check.

    Returns ``(rank_ok, image_residual, pe_flag)`` for a random minimal
    system with ``n <= 4, m <= 2, p <= 2`` and a random depth ``L`` in
    ``{lag + 1, lag + 2, lag + 3}``.
    """
    n = int(rng.integers(1, 5))
    m = int(rng.integers(1, 3))
    p = int(rng.integers(1, 3))
    sys_ = lti.random_minimal_system(rng, n, m, p)
    L = sys_.lag() + int(rng.integers(1, 4))
    T = (m + 1) * (L + n) + 20
    u = rng.standard_normal((m, T))
    y = lti.simulate_lti(sys_, rng.standard_normal(n), u)
    H = lti.build_hankel(lti.Trajectory.from_io(u, y), L)
    pe, rank = lti.check_generalized_pe(H, m, n)
    u2 = rng.standard_normal((m, L))
    y2 = lti.simulate_lti(sys_, rng.standard_normal(n), u2)
    w2 = np.vstack([u2, y2]).T.reshape(-1)
    g, *_ = np.linalg.lstsq(H.entries, w2, rcond=None)
    resid = np.linalg.norm(H.entries @ g - w2) / np.linalg.norm(w2)
    return rank == m * L + n, resid, pe


def kkt_residuals(P, q, A_eq, b_eq, lb, ub, x, y_eq, y_bound):
    """Stationarity, primal feasibility and complementarity of a box+equality QP.

    Sign convention: ``P x + q + A_eq' y_eq + y_bound = 0`` with positive
    bound multipliers on upper-active and negative on lower-active variables.
    """
    A_eq = np.zeros((0, len(q))) if A_eq is None else np.atleast_2d(A_eq)
    stat = np.max(np.abs(P @ x + q + A_eq.T @ y_eq + y_bound), initial=0.0)
    feas = max(np.max(np.abs(A_eq @ x - b_eq), initial=0.0),
               np.max(np.maximum(lb - x, 0.0), initial=0.0), np.max(np.maximum(x - ub, 0.0), initial=0.0))
    up = np.maximum(y_bound, 0.0) * np.where(np.isfinite(ub), np.abs(ub - x), 1.0)
    lo = np.maximum(-y_bound, 0.0) * np.where(np.isfinite(lb), np.abs(x - lb), 1.0)
    comp = np.max(np.concatenate([up, lo]), initial=0.0)
    return float(stat), float(feas), float(comp)


def soft_threshold_l1(P, q, w, lb, ub, grid=2001):
    """Brute-force minimiser of ``1/2 x'Px + q'x + w ||x||_1`` over a box.

    Enumerates sign patterns: on each orthant the problem is a smooth QP
    solved by the active-set oracle with the sign-restricted box; the best
    value over all orthants wins.
    """
    n = len(q)
    best = (np.inf, None)
    for signs in itertools.product((-1.0, 1.0), repeat=n):
        s = np.array(signs)
        lo = np.where(s > 0, np.maximum(lb, 0.0), lb)
        hi = np.where(s > 0, ub, np.minimum(ub, 0.0))
        if np.any(lo > hi):
            continue
        val, x = active_set_qp(P, q + w * s, None, None, lo, hi)
        if x is not None:
            true_val = 0.5 * x @ P @ x + q @ x + w * np.sum(np.abs(x))
            if true_val < best[0]:
                best = (true_val, x)
    return best


def skewed_quartic(rho_cr, rho_max, peak, h_frac=0.05):
    """Ascending coefficients of ``k rho (rho_max - rho) ((rho - s)^2 + h^2)`` with its maximum at ``rho_cr``.

    ``s`` is found by bisection on a dense-grid argmax, so the curve peaks
    early and has its first positive root at ``rho_max``.
    """
    from numpy.polynomial import polynomial as P
    from scipy.optimize import brentq

    R, h = float(rho_max), h_frac * float(rho_max)
    grid = np.linspace(0.0, R, 400_001)

    def coeffs(s):
        return P.polymul(P.polymul([0.0, R], [1.0, -1.0 / R]) * 1.0, [s * s + h * h, -2 * s, 1.0])

    def gap(s):
        return grid[np.argmax(P.polyval(grid, coeffs(s)))] - rho_cr

    s = brentq(gap, 0.5 * R, 3.0 * R, xtol=1e-12)
    c = coeffs(s)
    return c * (peak / P.polyval(rho_cr, c))


def model_based_plan(A, B, C, D, x, y_ref, u_ref, Q, R, T_f):
    """Unconstrained finite-horizon tracking plan from the true model.

    Minimises ``sum_k |y_k - y_ref|_Q^2 + |u_k - u_ref|_R^2`` with
    ``y = O x + G u`` built by explicit block products; returns ``(T_f, m)``.
    """
    A, B, C, D = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, C, D))
    n, m, p = A.shape[0], B.shape[1], C.shape[0]
    O = np.vstack([C @ np.linalg.matrix_power(A, k) for k in range(T_f)])
    G = np.zeros((p * T_f, m * T_f))
    for i in range(T_f):
        G[i * p:(i + 1) * p, i * m:(i + 1) * m] = D
        for j in range(i):
            G[i * p:(i + 1) * p, j * m:(j + 1) * m] = C @ np.linalg.matrix_power(A, i - j - 1) @ B
    Qb = np.kron(np.eye(T_f), Q)
    Rb = np.kron(np.eye(T_f), R)
    yr = np.tile(np.asarray(y_ref, dtype=float), T_f)
    ur = np.tile(np.asarray(u_ref, dtype=float), T_f)
    H = G.T @ Qb @ G + Rb
    rhs = G.T @ Qb @ (yr - O @ x) + Rb @ ur
    return np.linalg.solve(H, rhs).reshape(T_f, m)


def interior_tracking_case(rng, lti, steps=50, T_f=6, box=(0.05, 0.9)):
    """Random minimal system whose model-based closed loop keeps every planned input inside ``box``.

    Returns a dict with the model, offline data, references, the warm-up
    inputs and the initial state.  Systems are redrawn until the
    unconstrained oracle never touches the box, so the oracle is also the
    constrained optimum.
    """
    while True:
        n, m, p = int(rng.integers(1, 5)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
        model = lti.random_minimal_system(rng, n, m, p, radius=0.8)
        T_ini = max(model.lag(), 1) + 1
        T = (m + 1) * (T_ini + T_f + n) + 40
        u_d = 0.5 + 0.2 * rng.standard_normal((m, T))
        y_d = lti.simulate_lti(model, 0.1 * rng.standard_normal(n), u_d)
        Q, R = np.eye(p), 0.1 * np.eye(m)
        u_ref = np.full(m, 0.5)
        gain = model.C @ np.linalg.solve(np.eye(n) - model.A, model.B) + model.D
        y_ref = gain @ (u_ref + 0.1 * rng.standard_normal(m))
        x_init = 0.05 * rng.standard_normal(n)
        x = x_init.copy()
        warm = 0.5 + 0.05 * rng.standard_normal((T_ini, m))
        for u in warm:
            x = model.A @ x + model.B @ u
        xs, ok = x.copy(), True
        for _ in range(steps):
            plan = model_based_plan(model.A, model.B, model.C, model.D, xs, y_ref, u_ref, Q, R, T_f)
            if plan.min() < box[0] or plan.max() > box[1]:
                ok = False
                break
            xs = model.A @ xs + model.B @ plan[0]
        if ok:
            return dict(model=model, u_d=u_d, y_d=y_d, Q=Q, R=R, u_ref=u_ref, y_ref=y_ref,
                        T_ini=T_ini, T_f=T_f, warm=warm, x_init=x_init)


def lp_vertex_max(c, A, b, tol=1e-9):
    """Maximise ``c x`` over ``A x <= b`` by enumerating every basic feasible point.

    Returns ``(value, x, unique)`` where ``unique`` is False when two
    distinct optimal vertices exist.
    """
    from itertools import combinations

    A, b, c = np.asarray(A, float), np.asarray(b, float), np.asarray(c, float)
    n = A.shape[1]
    best, arg, others = -np.inf, None, []
    for rows in combinations(range(A.shape[0]), n):
        S = A[list(rows)]
        if abs(np.linalg.det(S)) < 1e-12:
            continue
        x = np.linalg.solve(S, b[list(rows)])
        if np.any(A @ x > b + tol * (1 + np.abs(b))):
            continue
        v = float(c @ x)
        if arg is None or v > best + 1e-9 * (1 + abs(best)):
            best, arg, others = v, x, []
        elif abs(v - best) <= 1e-9 * (1 + abs(best)) and not np.allclose(x, arg, atol=1e-7):
            others.append(x)
    return best, arg, not others
