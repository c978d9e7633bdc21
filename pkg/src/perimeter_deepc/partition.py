"""Road-network partitioning by snake clustering and symmetric NMF.

Each road seeds a "snake" that greedily absorbs the neighbouring road which
keeps the density variance of the grown set smallest.  Roads whose snakes
share long prefixes are similar; the similarity matrix is factorised as
``W ~ H H^T`` with ``H >= 0`` and each road joins the cluster of its largest
factor entry.  A final pass makes every cluster connected.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RoadGraph:
    densities: np.ndarray
    neighbors: tuple[tuple[int, ...], ...]

    @classmethod
    def from_edges(cls, densities, edges) -> "RoadGraph":
        rho = np.asarray(densities, dtype=float).reshape(-1)
        if np.any(rho < 0):
            raise ValueError("densities must be nonnegative")
        n = rho.size
        adj: list[set[int]] = [set() for _ in range(n)]
        for a, b in edges:
            a, b = int(a), int(b)
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"edge ({a}, {b}) references an unknown road")
            if a != b:
                adj[a].add(b)
                adj[b].add(a)
        return cls(rho, tuple(tuple(sorted(s)) for s in adj))

    @property
    def n(self) -> int:
        return self.densities.size

    def edges(self) -> list[tuple[int, int]]:
        return [(a, b) for a in range(self.n) for b in self.neighbors[a] if a < b]

    def components(self, nodes) -> list[list[int]]:
        """Connected components of the subgraph induced by ``nodes`` (sorted lists)."""
        nodes = set(int(v) for v in nodes)
        seen: set[int] = set()
        out = []
        for start in sorted(nodes):
            if start in seen:
                continue
            comp, stack = [], [start]
            seen.add(start)
            while stack:
                v = stack.pop()
                comp.append(v)
                for w in self.neighbors[v]:
                    if w in nodes and w not in seen:
                        seen.add(w)
                        stack.append(w)
            out.append(sorted(comp))
        return out

    def permuted(self, perm) -> "RoadGraph":
        """Relabel road ``i`` as ``perm[i]``."""
        perm = np.asarray(perm)
        rho = np.empty_like(self.densities)
        rho[perm] = self.densities
        return RoadGraph.from_edges(rho, [(perm[a], perm[b]) for a, b in self.edges()])


@dataclass
class SnakeSet:
    snakes: list[list[int]]
    truncated: list[int] = field(default_factory=list)   # seeds whose snake ran out of roads


def _grow(graph: RoadGraph, seed: int, m: int) -> list[int]:
    rho = graph.densities
    snake = [seed]
    members = {seed}
    frontier = set(graph.neighbors[seed])
    s1, s2 = rho[seed], rho[seed] ** 2
    while len(snake) < m and frontier:
        cand = np.array(sorted(frontier))
        k = len(snake) + 1
        x = rho[cand]
        var = (s2 + x**2) / k - ((s1 + x) / k) ** 2
        pick = int(cand[int(np.argmin(var))])
        snake.append(pick)
        members.add(pick)
        frontier.discard(pick)
        frontier.update(w for w in graph.neighbors[pick] if w not in members)
        s1 += rho[pick]
        s2 += rho[pick] ** 2
    return snake


def run_snakes(graph: RoadGraph, m: int) -> SnakeSet:
    """Grow one snake of length ``m`` from every road (independent per seed)."""
    if m < 1 or m > graph.n:
        raise ValueError(f"snake length must lie in [1, {graph.n}], got {m}")
    snakes, short = [], []
    for seed in range(graph.n):
        s = _grow(graph, seed, m)
        if len(s) < m:
            short.append(seed)
        snakes.append(s)
    if short:
        logger.warning("%d snakes truncated by small components (first seed %d)", len(short), short[0])
    return SnakeSet(snakes, short)


def compute_similarity(snakes: SnakeSet | list, phi: float, m: int | None = None,
                       n: int | None = None) -> np.ndarray:
    """``W[i, j] = sum_k phi**(n - k) * |prefix_k(S_i) & prefix_k(S_j)|`` for ``k = 1..m``.

    ``n`` defaults to the number of roads and ``m`` to the longest snake.
    """
    if not 0.0 < phi < 1.0:
        raise ValueError("decay phi must lie in (0, 1)")
    S = snakes.snakes if isinstance(snakes, SnakeSet) else [list(s) for s in snakes]
    count = len(S)
    m = max(len(s) for s in S) if m is None else m
    n = count if n is None else n
    # membership[i, r] = 1-based position of road r in snake i (0 if absent)
    roads = 1 + max(max(s) for s in S)
    pos = np.zeros((count, roads), dtype=int)
    for i, s in enumerate(S):
        for k, r in enumerate(s[:m]):
            pos[i, r] = k + 1
    W = np.zeros((count, count))
    for k in range(1, m + 1):
        inside = ((pos > 0) & (pos <= k)).astype(float)
        W += phi ** (n - k) * (inside @ inside.T)
    return 0.5 * (W + W.T)


def normalize_similarity(W: np.ndarray, symmetric: bool = True) -> np.ndarray:
    """Degree normalisation ``D^-1/2 W D^-1/2`` (or ``D^-1/2 W D^1/2`` when not symmetric)."""
    d = W.sum(axis=1)
    with np.errstate(divide="ignore"):
        inv = np.where(d > 0, 1.0 / np.sqrt(d), 0.0)
    if symmetric:
        return inv[:, None] * W * inv[None, :]
    return inv[:, None] * W * np.sqrt(d)[None, :]


def symnmf_objective(W: np.ndarray, H: np.ndarray) -> float:
    R = W - H @ H.T
    return float(np.sum(R * R))


@dataclass
class SymNmfResult:
    labels: np.ndarray
    H: np.ndarray
    objective_trace: list[float]
    iterations: int
    repaired: int = 0


def symnmf(W: np.ndarray, k: int, seed: int = 0, max_iter: int = 500, tol: float = 1e-7,
           beta: float = 0.5) -> tuple[np.ndarray, list[float]]:
    """Multiplicative updates ``H <- H * (1 - b + b (W H) / (H H^T H))``.

    The step ``b`` is halved whenever a full step would increase the
    objective, so the trace is nonincreasing.
    """
    n = W.shape[0]
    rng = np.random.default_rng(seed)
    H = rng.uniform(0.0, 1.0, (n, k)) * 2.0 * np.sqrt(max(W.mean(), 1e-12) / k)
    trace = [symnmf_objective(W, H)]
    for _ in range(max_iter):
        WH = W @ H
        HHH = H @ (H.T @ H)
        ratio = WH / np.maximum(HHH, 1e-16)
        b = beta
        while True:
            Hn = H * (1.0 - b + b * ratio)
            f = symnmf_objective(W, Hn)
            if f <= trace[-1] or b < 1e-8:
                break
            b *= 0.5
        if f > trace[-1]:
            break
        H = Hn
        trace.append(f)
        if abs(trace[-2] - f) <= tol * max(trace[-2], 1e-300):
            break
    return H, trace


def repair_connectivity(graph: RoadGraph, labels: np.ndarray) -> tuple[np.ndarray, int]:
    """Reattach disconnected fragments to the adjacent region sharing most edges with them.

    For every region the component holding the most roads (lowest road id on
    ties) stays; other fragments move.  Repeats until all regions are
    connected.  Returns the labels and the number of moved fragments.
    """
    labels = labels.copy()
    moved = 0
    for _ in range(graph.n):
        changed = False
        for r in np.unique(labels):
            comps = graph.components(np.where(labels == r)[0])
            if len(comps) <= 1:
                continue
            comps.sort(key=lambda c: (-len(c), c[0]))
            for frag in comps[1:]:
                votes: dict[int, int] = {}
                for v in frag:
                    for w in graph.neighbors[v]:
                        if labels[w] != r:
                            votes[int(labels[w])] = votes.get(int(labels[w]), 0) + 1
                if not votes:
                    continue
                target = min(votes, key=lambda t: (-votes[t], t))
                labels[frag] = target
                moved += 1
                changed = True
        if not changed:
            break
    # compact labels to 0..K-1 in order of first appearance
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = {int(labels[first[o]]): i for i, o in enumerate(order)}
    return np.array([remap[int(v)] for v in labels]), moved


def symnmf_cluster(W: np.ndarray, n_S: int, seed: int = 0, graph: RoadGraph | None = None,
                   max_iter: int = 500, tol: float = 1e-7, symmetric: bool = True,
                   restarts: int = 1) -> SymNmfResult:
    """Cluster by SymNMF; with ``restarts > 1`` the factorisation is repeated
    from seeds ``seed, seed + 1, ...`` and the lowest final objective is kept."""
    W = np.asarray(W, dtype=float)
    n = W.shape[0]
    if n_S < 1 or n_S > n:
        raise ValueError(f"cluster count must lie in [1, {n}], got {n_S}")
    if not np.allclose(W, W.T) or np.any(W < 0):
        raise ValueError("similarity must be symmetric and nonnegative")
    if n_S == 1:
        return SymNmfResult(np.zeros(n, dtype=int), np.ones((n, 1)), [], 0)
    if restarts < 1:
        raise ValueError("at least one factorisation run is required")
    Wn = normalize_similarity(W, symmetric)
    H, trace = min((symnmf(Wn, n_S, seed + r, max_iter, tol) for r in range(restarts)),
                   key=lambda ht: ht[1][-1])
    labels = np.argmax(H, axis=1)
    moved = 0
    if graph is not None:
        labels, moved = repair_connectivity(graph, labels)
    return SymNmfResult(labels, H, trace, len(trace) - 1, moved)


def partition(graph: RoadGraph, n_S: int, m: int | None = None, phi: float = 0.5,
              seed: int = 0, restarts: int = 5) -> SymNmfResult:
    """Snakes, similarity and clustering in one call; ``m`` defaults to ``n - 1``."""
    m = max(1, graph.n - 1) if m is None else m
    snakes = run_snakes(graph, m)
    W = compute_similarity(snakes, phi, m=m)
    return symnmf_cluster(W, n_S, seed=seed, graph=graph, restarts=restarts)


def within_region_variance(densities, labels) -> float:
    """Total squared deviation of road densities from their region means."""
    rho = np.asarray(densities, dtype=float)
    labels = np.asarray(labels)
    return float(sum(np.sum((rho[labels == r] - rho[labels == r].mean()) ** 2) for r in np.unique(labels)))


def read_roads_csv(road_path, edge_path) -> RoadGraph:
    ids, dens = [], []
    with open(Path(road_path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["road_id", "density"]:
            raise ValueError(f"{road_path}:1: header must be 'road_id,density'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                ids.append(int(row[0]))
                dens.append(float(row[1]))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{road_path}:{lineno}: malformed row {row!r}") from exc
    if sorted(ids) != list(range(len(ids))):
        raise ValueError(f"{road_path}: road ids must be 0..n-1")
    rho = np.empty(len(ids))
    rho[ids] = dens
    edges = []
    with open(Path(edge_path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["road_a", "road_b"]:
            raise ValueError(f"{edge_path}:1: header must be 'road_a,road_b'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                edges.append((int(row[0]), int(row[1])))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{edge_path}:{lineno}: malformed row {row!r}") from exc
    return RoadGraph.from_edges(rho, edges)


def write_roads_csv(road_path, edge_path, graph: RoadGraph) -> None:
    with open(road_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["road_id", "density"])
        for i, r in enumerate(graph.densities):
            w.writerow([i, repr(float(r))])
    with open(edge_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["road_a", "road_b"])
        w.writerows(graph.edges())


def write_assignment_csv(path, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["road_id", "region"])
        for i, r in enumerate(labels):
            w.writerow([i, int(r)])
