"""Behavioral-systems toolkit: trajectories, Hankel matrices, excitation checks.

Signals are stored time-major as ``(q, T)`` arrays whose columns are
``w(t) = col(u(t), y(t))``.  Everything here is a pure function of its
arguments and the returned objects are treated as immutable.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RANK_RTOL = 1e-10


@dataclass(frozen=True)
class Trajectory:
    """A finite signal ``w = col(u, y)`` with explicit input/output dimensions."""

    values: np.ndarray
    m: int
    p: int

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        object.__setattr__(self, "values", values)
        q, T = values.shape
        if T < 1 or q < 1:
            raise ValueError("trajectory needs at least one sample and one channel")
        if self.m < 0 or self.p < 0 or self.m + self.p != q:
            raise ValueError(f"m + p must equal q={q}, got m={self.m}, p={self.p}")

    @classmethod
    def from_io(cls, u, y) -> "Trajectory":
        u = _as_signal(u)
        y = _as_signal(y)
        if u.shape[1] != y.shape[1]:
            raise ValueError("input and output lengths differ")
        return cls(np.vstack([u, y]), u.shape[0], y.shape[0])

    @property
    def q(self) -> int:
        return self.m + self.p

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def u(self) -> np.ndarray:
        return self.values[: self.m]

    @property
    def y(self) -> np.ndarray:
        return self.values[self.m :]


@dataclass(frozen=True)
class HankelMatrix:
    entries: np.ndarray
    depth: int
    q: int

    @property
    def shape(self):
        return self.entries.shape


@dataclass(frozen=True)
class HankelBlocks:
    """Past/future data blocks sliced from a depth ``T_ini + T_f`` Hankel matrix."""

    U_p: np.ndarray
    Y_p: np.ndarray
    U_f: np.ndarray
    Y_f: np.ndarray
    T_ini: int
    T_f: int

    @property
    def m(self) -> int:
        return self.U_p.shape[0] // self.T_ini

    @property
    def p(self) -> int:
        return self.Y_p.shape[0] // self.T_ini

    @property
    def n_cols(self) -> int:
        return self.U_p.shape[1]


@dataclass(frozen=True)
class StateSpaceModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A, B, C, D = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (self.A, self.B, self.C, self.D))
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError("A must be square")
        if B.shape[0] != n or C.shape[1] != n:
            raise ValueError("B rows and C columns must match the order of A")
        if D.shape != (C.shape[0], B.shape[1]):
            raise ValueError(f"D must be {C.shape[0]}x{B.shape[1]}, got {D.shape}")
        for name, M in zip("ABCD", (A, B, C, D)):
            object.__setattr__(self, name, M)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def observability(self, lag: int) -> np.ndarray:
        blocks, CA = [], self.C
        for _ in range(lag):
            blocks.append(CA)
            CA = CA @ self.A
        return np.vstack(blocks)

    def lag(self) -> int:
        """Smallest ``l`` with a full-rank observability matrix (assumes observability)."""
        for ell in range(1, self.n + 1):
            if numeric_rank(self.observability(ell)) == self.n:
                return ell
        return self.n


def _as_signal(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :]
    return x


def build_hankel(w, L: int) -> HankelMatrix:
    """Depth-``L`` block Hankel matrix of a signal.

    ``w`` may be a :class:`Trajectory` or a ``(q, T)`` array (1-D arrays are
    read as scalar signals).  Block ``(i, j)`` of the result is ``w(i + j - 1)``.
    """
    values = w.values if isinstance(w, Trajectory) else _as_signal(w)
    q, T = values.shape
    if L < 1:
        raise ValueError(f"Hankel depth must be positive, got {L}")
    if L > T:
        raise ValueError(f"Hankel depth {L} exceeds signal length {T}")
    cols = T - L + 1
    H = np.empty((q * L, cols))
    for i in range(L):
        H[i * q : (i + 1) * q] = values[:, i : i + cols]
    return HankelMatrix(H, L, q)


def split_past_future(u_d, y_d, T_ini: int, T_f: int) -> HankelBlocks:
    u_d, y_d = _as_signal(u_d), _as_signal(y_d)
    if u_d.shape[1] != y_d.shape[1]:
        raise ValueError("input and output data lengths differ")
    if T_ini < 1 or T_f < 1:
        raise ValueError("T_ini and T_f must be positive")
    L = T_ini + T_f
    if L > u_d.shape[1]:
        raise ValueError(f"T_ini + T_f = {L} exceeds data length {u_d.shape[1]}")
    m, p = u_d.shape[0], y_d.shape[0]
    Hu = build_hankel(u_d, L).entries
    Hy = build_hankel(y_d, L).entries
    return HankelBlocks(
        U_p=Hu[: m * T_ini], Y_p=Hy[: p * T_ini],
        U_f=Hu[m * T_ini :], Y_f=Hy[p * T_ini :],
        T_ini=T_ini, T_f=T_f,
    )


def rank_tolerance(M: np.ndarray, s: np.ndarray | None = None) -> float:
    if s is None:
        s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0:
        return 0.0
    return max(M.shape) * s[0] * RANK_RTOL


def numeric_rank(M: np.ndarray) -> int:
    M = np.atleast_2d(M)
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rank_tolerance(M, s)))


def check_generalized_pe(H: HankelMatrix | np.ndarray, m: int, n: int) -> tuple[bool, int]:
    """Generalized persistency of excitation: ``rank H_L == m L + n``.

    Returns the verdict together with the numeric rank, which is always
    computed so callers can report it.
    """
    entries = H.entries if isinstance(H, HankelMatrix) else np.atleast_2d(H)
    if isinstance(H, HankelMatrix):
        L = H.depth
    else:
        raise TypeError("check_generalized_pe needs a HankelMatrix (depth is required)")
    r = numeric_rank(entries)
    return r == m * L + n, r


def simulate_lti(model: StateSpaceModel, x0, u) -> np.ndarray:
    """Outputs of ``x+ = Ax + Bu, y = Cx + Du`` as a ``(p, T)`` array."""
    u = _as_signal(u)
    if u.shape[0] != model.m:
        raise ValueError(f"input has {u.shape[0]} channels, model expects {model.m}")
    x = np.asarray(x0, dtype=float).reshape(-1)
    if x.shape[0] != model.n:
        raise ValueError(f"initial state has length {x.shape[0]}, model order is {model.n}")
    T = u.shape[1]
    y = np.empty((model.p, T))
    for t in range(T):
        y[:, t] = model.C @ x + model.D @ u[:, t]
        x = model.A @ x + model.B @ u[:, t]
    return y


def random_minimal_system(rng: np.random.Generator, n: int, m: int, p: int,
                          radius: float = 0.95) -> StateSpaceModel:
    """Random stable system that is controllable and observable (retries until minimal)."""
    while True:
        A = rng.standard_normal((n, n))
        rho = np.max(np.abs(np.linalg.eigvals(A)))
        A *= rng.uniform(0.3, radius) / rho
        B = rng.standard_normal((n, m))
        C = rng.standard_normal((p, n))
        D = rng.standard_normal((p, m))
        ctrb = np.hstack([np.linalg.matrix_power(A, k) @ B for k in range(n)])
        model = StateSpaceModel(A, B, C, D)
        obsv = model.observability(n)
        if numeric_rank(ctrb) == n and numeric_rank(obsv) == n:
            svc = np.linalg.svd(ctrb, compute_uv=False)
            svo = np.linalg.svd(obsv, compute_uv=False)
            if svc[-1] / svc[0] > 1e-4 and svo[-1] / svo[0] > 1e-4:
                return model


def write_trajectory_csv(path, traj: Trajectory) -> None:
    header = ["t"] + [f"u{i + 1}" for i in range(traj.m)] + [f"y{i + 1}" for i in range(traj.p)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for t in range(traj.T):
            writer.writerow([t + 1] + [repr(float(v)) for v in traj.values[:, t]])


def read_trajectory_csv(path) -> Trajectory:
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "t":
            raise ValueError(f"{path}: first column must be 't'")
        m = sum(1 for h in header[1:] if h.startswith("u"))
        p = sum(1 for h in header[1:] if h.startswith("y"))
        if m + p != len(header) - 1:
            raise ValueError(f"{path}: columns must be u1..um followed by y1..yp")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                t = int(row[0])
                vals = [float(v) for v in row[1:]]
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row") from exc
            if t != len(rows) + 1 or len(vals) != m + p:
                raise ValueError(f"{path}:{lineno}: expected contiguous time index {len(rows) + 1}")
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no samples")
    return Trajectory(np.array(rows).T, m, p)
