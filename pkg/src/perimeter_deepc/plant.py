"""Macroscopic multi-region traffic plant.

Regions exchange vehicles according to accumulation-based MFD dynamics:
``n[i, j]`` counts vehicles currently in region ``i`` whose destination is
region ``j``.  Production ``P_i(n_i)`` [veh m/s] divided by the average trip
length gives the rate at which trips end or leave the region; transfers into a
neighbour are clipped by its receiving capacity and gated by ``u[i, h]``.

Actuators act on the gates through :class:`ActuatorMap`; one actuator may
touch several inter-region flows, which is what makes the flow-level MPC
baseline approximate.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


def cubic_production(free_speed: float, n_max: float) -> np.ndarray:
    """Ascending coefficients of ``P(n) = v n (1 - n/n_max)^2``."""
    v, N = float(free_speed), float(n_max)
    return np.array([0.0, v, -2.0 * v / N, v / N**2])


@dataclass
class RegionNetwork:
    """Static description of the regions and their interactions.

    ``routing[i, j, h]`` is the share of vehicles in ``i`` bound for ``j``
    whose next region is ``h``; ``routing[i, i, i]`` is the internal trip
    completion share.  ``capacity[i, h]`` is the receiving capacity [veh/s]
    of ``h`` towards ``i`` when ``h`` is at or below ``capacity_knee`` of its
    maximal accumulation; above that it decreases linearly to zero at
    ``n_max``.
    """

    names: list[str]
    production: list[np.ndarray]
    trip_length_m: np.ndarray
    n_max: np.ndarray
    lane_km: np.ndarray
    adjacency: np.ndarray
    capacity: np.ndarray
    routing: np.ndarray
    capacity_knee: float = 0.0

    def __post_init__(self):
        N = len(self.names)
        self.trip_length_m = np.asarray(self.trip_length_m, dtype=float).reshape(N)
        self.n_max = np.asarray(self.n_max, dtype=float).reshape(N)
        self.lane_km = np.asarray(self.lane_km, dtype=float).reshape(N)
        self.adjacency = np.asarray(self.adjacency, dtype=bool).reshape(N, N)
        self.capacity = np.asarray(self.capacity, dtype=float).reshape(N, N)
        self.routing = np.asarray(self.routing, dtype=float).reshape(N, N, N)
        self.production = [np.asarray(c, dtype=float) for c in self.production]
        if len(self.production) != N:
            raise ValueError("one production polynomial per region is required")
        if np.any(np.diag(self.adjacency)):
            raise ValueError("a region cannot be its own neighbour")
        if not 0.0 <= self.capacity_knee < 1.0:
            raise ValueError("capacity_knee must lie in [0, 1)")
        for i, c in enumerate(self.production):
            if abs(c[0]) > 1e-12:
                raise ValueError(f"production of region {i} must vanish at n=0")
            grid = np.linspace(0.0, self.n_max[i], 201)
            vals = np.polynomial.polynomial.polyval(grid, c)
            if np.min(vals) < -1e-9 * max(1.0, np.max(np.abs(vals))) or abs(vals[-1]) > 1e-6 * max(1.0, np.max(vals)):
                raise ValueError(f"production of region {i} must be >= 0 on [0, n_max] and vanish at n_max")
        for i in range(N):
            for j in range(N):
                allowed = self.adjacency[i].copy()
                if i == j:
                    allowed[i] = True
                share = self.routing[i, j]
                if np.any(share[~allowed] != 0) or np.any(share < 0):
                    raise ValueError(f"routing[{i},{j}] sends vehicles to a non-neighbour")
                if i != j and abs(share.sum() - 1.0) > 1e-9:
                    raise ValueError(f"routing[{i},{j}] must sum to 1 over next hops")
                if i == j and share.sum() > 1.0 + 1e-9:
                    raise ValueError(f"routing[{i},{i}] must sum to at most 1")

    @property
    def N(self) -> int:
        return len(self.names)

    def flows(self) -> list[tuple[int, int]]:
        """Ordered inter-region flows ``(i, h)`` with ``h`` adjacent to ``i``."""
        return [(i, h) for i in range(self.N) for h in range(self.N) if self.adjacency[i, h]]

    def production_at(self, n) -> np.ndarray:
        n = np.asarray(n, dtype=float)
        out = np.array([np.polynomial.polynomial.polyval(n[i], c) for i, c in enumerate(self.production)])
        return np.maximum(out, 0.0)

    def receiving_capacity(self, n_region) -> np.ndarray:
        """``C[i, h]`` for the current accumulations."""
        n_region = np.asarray(n_region, dtype=float)
        knee = self.capacity_knee * self.n_max
        frac = np.clip((self.n_max - n_region) / (self.n_max - knee), 0.0, 1.0)
        return self.capacity * frac[None, :]

    def critical_accumulation(self, grid: int = 20001) -> np.ndarray:
        out = np.empty(self.N)
        for i, c in enumerate(self.production):
            x = np.linspace(0.0, self.n_max[i], grid)
            out[i] = x[np.argmax(np.polynomial.polynomial.polyval(x, c))]
        return out

    @property
    def rho_max(self) -> np.ndarray:
        return self.n_max / self.lane_km


@dataclass
class ActuatorMap:
    """Maps split fractions ``lambda`` to flow gates ``u[i, h]``.

    ``weights[a, f]`` is the share of actuator ``a`` acting on flow
    ``flows[f]``; rows sum to one and every column sums to at most one.  The
    part of a flow not covered by any actuator passes ungated::

        u_f = (1 - sum_a w[a, f]) + sum_a w[a, f] * lambda_a
    """

    flows: list[tuple[int, int]]
    weights: np.ndarray
    default: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    names: list[str] | None = None

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=float))
        l = self.weights.shape[0]
        if self.weights.shape[1] != len(self.flows):
            raise ValueError("weights must have one column per flow")
        self.default = np.broadcast_to(np.asarray(self.default, dtype=float), (l,)).copy()
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (l,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (l,)).copy()
        if np.any(self.weights < 0):
            raise ValueError("actuator weights must be nonnegative")
        if l and not np.allclose(self.weights.sum(axis=1), 1.0):
            raise ValueError("each actuator's weights must sum to 1")
        if np.any(self.weights.sum(axis=0) > 1.0 + 1e-12):
            raise ValueError("a flow receives more than unit actuator weight")
        if np.any(self.lower < 0) or np.any(self.lower > self.upper) or np.any(self.upper >= 1):
            raise ValueError("split bounds must satisfy 0 <= lower <= upper < 1")
        if not (np.all(self.default >= self.lower) and np.all(self.default <= self.upper)):
            raise ValueError("default splits must respect the bounds")
        if self.names is None:
            self.names = [f"a{k + 1}" for k in range(l)]

    @property
    def l(self) -> int:
        return self.weights.shape[0]

    def gates(self, lam, N: int) -> np.ndarray:
        lam = np.asarray(lam, dtype=float).reshape(self.l)
        cover = self.weights.sum(axis=0)
        per_flow = (1.0 - cover) + self.weights.T @ lam
        u = np.ones((N, N))
        for f, (i, h) in enumerate(self.flows):
            u[i, h] = per_flow[f]
        return np.clip(u, 0.0, 1.0)

    def clip(self, lam) -> np.ndarray:
        return np.clip(np.asarray(lam, dtype=float), self.lower, self.upper)


@dataclass
class DemandProfile:
    """Piecewise-linear OD demand ``q[i, j](t)`` in veh/s, zero outside its support."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None, None]
        if self.times.ndim != 1 or self.values.shape[0] != self.times.shape[0]:
            raise ValueError("one demand matrix per breakpoint is required")
        if np.any(np.diff(self.times) < 0):
            raise ValueError("breakpoints must be sorted")
        if np.any(self.values < 0):
            raise ValueError("demand must be nonnegative")

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @property
    def end(self) -> float:
        return float(self.times[-1])

    def rate(self, t: float) -> np.ndarray:
        flat = self.values.reshape(len(self.times), -1)
        if t < self.times[0] or t > self.times[-1]:
            return np.zeros(self.values.shape[1:])
        out = np.array([np.interp(t, self.times, flat[:, c]) for c in range(flat.shape[1])])
        return out.reshape(self.values.shape[1:])

    def mean_rate(self, t0: float, t1: float, samples: int = 19) -> np.ndarray:
        ts = np.linspace(t0, t1, samples)
        vals = np.array([self.rate(t) for t in ts])
        return np.trapezoid(vals, ts, axis=0) / (t1 - t0)

    def total(self) -> np.ndarray:
        return np.trapezoid(self.values, self.times, axis=0)

    def tiled(self, t: float) -> np.ndarray:
        """Rate of the profile repeated periodically over its support length."""
        span = self.times[-1] - self.times[0]
        return self.rate(self.times[0] + (t - self.times[0]) % span) if span > 0 else self.rate(t)


def make_two_peak_demand(peak_times, peak_widths, peak_heights, total_vehicles=None,
                         od_shares=None, start: float = 0.0, end: float | None = None) -> DemandProfile:
    """Two triangular peaks (half-base ``width`` [s], height [veh/s]).

    When ``total_vehicles`` is given the heights are rescaled, keeping their
    ratio, so that the integral equals the requested total.  ``od_shares``
    (an ``N x N`` matrix summing to 1) splits the scalar profile over OD pairs.
    """
    peak_times = np.asarray(peak_times, dtype=float)
    widths = np.asarray(peak_widths, dtype=float)
    heights = np.asarray(peak_heights, dtype=float)
    if peak_times.shape != (2,) or widths.shape != (2,) or heights.shape != (2,):
        raise ValueError("exactly two peaks are required")
    if np.any(widths <= 0) or np.any(heights < 0):
        raise ValueError("peak widths must be positive and heights nonnegative")
    if np.any(peak_times - widths < start):
        raise ValueError("a peak starts before the profile")
    if total_vehicles is not None:
        if total_vehicles < 0:
            raise ValueError("total vehicles must be nonnegative")
        area = float(np.sum(heights * widths))
        if total_vehicles > 0 and area == 0:
            raise ValueError("cannot rescale an all-zero profile to a positive total")
        heights = heights * (total_vehicles / area) if area > 0 else heights
    last = float(np.max(peak_times + widths))
    end = last if end is None else float(end)
    if end < last:
        raise ValueError("profile ends before the last peak does")
    knots = np.unique(np.concatenate([[start, end], peak_times - widths, peak_times, peak_times + widths]))
    vals = np.zeros_like(knots)
    for t0, w, h in zip(peak_times, widths, heights):
        vals += h * np.clip(1.0 - np.abs(knots - t0) / w, 0.0, None)
    shares = np.ones((1, 1)) if od_shares is None else np.asarray(od_shares, dtype=float)
    if np.any(shares < 0) or abs(shares.sum() - 1.0) > 1e-9:
        raise ValueError("OD shares must be nonnegative and sum to 1")
    return DemandProfile(knots, vals[:, None, None] * shares[None])


@dataclass
class PlantState:
    n: np.ndarray                       # (N, N) vehicles in i bound for j
    queue: np.ndarray                   # (N, N) demand waiting to enter a full region
    k: int = 0
    time_spent: float = 0.0             # veh s, in-network plus entry queues
    trips_completed: float = 0.0        # veh
    saturation_events: int = 0

    def copy(self) -> "PlantState":
        return PlantState(self.n.copy(), self.queue.copy(), self.k, self.time_spent,
                          self.trips_completed, self.saturation_events)

    @property
    def accumulation(self) -> np.ndarray:
        return self.n.sum(axis=1)

    @classmethod
    def empty(cls, N: int) -> "PlantState":
        return cls(np.zeros((N, N)), np.zeros((N, N)))


def transfer_flows(n: np.ndarray, network: RegionNetwork, u: np.ndarray):
    """Instantaneous flows for accumulations ``n``.

    Returns ``(M_internal, M_transfer)`` where ``M_internal[i]`` is the trip
    completion rate of region ``i`` and ``M_transfer[i, j, h]`` the flow of
    ``j``-bound vehicles from ``i`` to ``h`` [veh/s].  Regions with zero
    accumulation send nothing.
    """
    N = network.N
    n = np.asarray(n, dtype=float)
    ni = n.sum(axis=1)
    P = network.production_at(ni)
    with np.errstate(invalid="ignore", divide="ignore"):
        share = np.where(ni[:, None] > 0, n / ni[:, None], 0.0)
    rate = P / network.trip_length_m
    M_int = network.routing[np.arange(N), np.arange(N), np.arange(N)] * np.diag(share) * rate
    C = network.receiving_capacity(ni)
    demand = u[:, None, :] * network.routing * share[:, :, None] * rate[:, None, None]
    M = np.minimum(C[:, None, :], demand) * network.adjacency[:, None, :]
    return np.maximum(M_int, 0.0), np.maximum(M, 0.0)


def step(state: PlantState, network: RegionNetwork, demand: np.ndarray, gates: np.ndarray,
         T_p: float) -> PlantState:
    """Advance the accumulations by one plant period ``T_p`` [s].

    ``gates`` is the ``u[i, h]`` matrix (see :meth:`ActuatorMap.gates`).
    Outflows of a bucket are scaled down if they would empty it below zero,
    inflows into a region (transfers first, then waiting demand) are scaled
    so the region never exceeds ``n_max``.
    """
    if T_p <= 0:
        raise ValueError("plant period must be positive")
    N = network.N
    n = state.n
    M_int, M = transfer_flows(n, network, gates)

    out = M.sum(axis=2) + np.diag(M_int)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(T_p * out > n, n / (T_p * out), 1.0)
    scale = np.nan_to_num(scale, nan=0.0)
    M = M * scale[:, :, None]
    M_int = M_int * np.diag(scale)

    ni = n.sum(axis=1)
    space = np.maximum(network.n_max - ni, 0.0)
    inflow = M.sum(axis=(0, 1)) * T_p
    saturated = inflow > space
    events = int(np.sum(saturated))
    if np.any(saturated):
        f = np.where(saturated, space / np.where(inflow > 0, inflow, 1.0), 1.0)
        M = M * f[None, None, :]
        inflow = M.sum(axis=(0, 1)) * T_p
    space = np.maximum(space - inflow, 0.0)

    waiting = state.queue + np.asarray(demand, dtype=float).reshape(N, N) * T_p
    want = waiting.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        admit_frac = np.where(want > space, space / want, 1.0)
    admit_frac = np.nan_to_num(admit_frac, nan=1.0)
    if np.any(want > space + 1e-12):
        events += 1
    admitted = waiting * admit_frac[:, None]
    queue = waiting - admitted

    moved_out = M.sum(axis=2)                         # (i, j) leaving i
    moved_in = np.einsum("ijh->hj", M)                # (h, j) arriving in h
    new = n + admitted + T_p * (moved_in - moved_out)
    new[np.arange(N), np.arange(N)] -= T_p * M_int
    new = np.maximum(new, 0.0)
    if events:
        logger.debug("step %d: %d saturation events", state.k, events)
    return PlantState(
        n=new, queue=queue, k=state.k + 1,
        time_spent=state.time_spent + T_p * (n.sum() + state.queue.sum()),
        trips_completed=state.trips_completed + T_p * float(M_int.sum()),
        saturation_events=state.saturation_events + events,
    )


@dataclass
class SensorConfig:
    sensors_per_region: int | np.ndarray = 1
    noise: float = 0.0
    seed: int = 0


def read_sensors(state: PlantState, network: RegionNetwork, sensors: SensorConfig | None = None,
                 rng: np.random.Generator | None = None):
    """Regional density [veh/km] and flow [veh/h].

    With several virtual sensors per region every sensor reads the regional
    value times ``1 + noise * N(0, 1)`` and the region reports their average.
    """
    ni = state.accumulation
    rho = ni / network.lane_km
    phi = 3600.0 * network.production_at(ni) / network.trip_length_m
    if sensors is None or (np.all(np.asarray(sensors.sensors_per_region) == 1) and sensors.noise == 0):
        return rho, phi
    rng = rng or np.random.default_rng(sensors.seed)
    counts = np.broadcast_to(np.asarray(sensors.sensors_per_region), (network.N,))
    rho_s, phi_s = np.empty(network.N), np.empty(network.N)
    for i in range(network.N):
        s = int(counts[i])
        eps_r = 1.0 + sensors.noise * rng.standard_normal(s)
        eps_f = 1.0 + sensors.noise * rng.standard_normal(s)
        rho_s[i] = np.mean(rho[i] * eps_r)
        phi_s[i] = np.mean(phi[i] * eps_f)
    return rho_s, phi_s


@dataclass
class Plant:
    """Stateful wrapper that advances the network one duty cycle at a time."""

    network: RegionNetwork
    actuators: ActuatorMap
    demand: DemandProfile
    T_p: float = 5.0
    cycle_s: float = 90.0
    sensors: SensorConfig | None = None
    tile_demand: bool = False
    demand_noise: float = 0.0
    seed: int = 0
    state: PlantState = field(init=False)

    def __post_init__(self):
        self.substeps = int(round(self.cycle_s / self.T_p))
        if abs(self.substeps * self.T_p - self.cycle_s) > 1e-9:
            raise ValueError("the duty cycle must be a whole number of plant periods")
        self.state = PlantState.empty(self.network.N)
        self.rng = np.random.default_rng(self.seed)
        self.sensor_rng = np.random.default_rng(self.seed + 1)

    @property
    def time(self) -> float:
        return self.state.k * self.T_p

    def demand_rate(self, t: float) -> np.ndarray:
        return self.demand.tiled(t) if self.tile_demand else self.demand.rate(t)

    def demand_over_cycle(self, t0: float) -> np.ndarray:
        ts = t0 + self.T_p * np.arange(self.substeps)
        return np.mean([self.demand_rate(t) for t in ts], axis=0)

    def advance_cycle(self, lam, log: list | None = None):
        """Hold ``lam`` for one duty cycle.

        Returns ``(d, rho, phi)``: the OD demand actually injected (mean over
        the cycle, veh/s) and the sensor readings at the end of the cycle.
        If ``log`` is given, ``(accumulation, waiting)`` at the start of every
        plant step is appended to it.
        """
        lam = self.actuators.clip(lam)
        u = self.actuators.gates(lam, self.network.N)
        factor = 1.0
        if self.demand_noise > 0:
            factor = np.clip(1.0 + self.demand_noise * self.rng.standard_normal(self.demand.values.shape[1:]), 0.0, None)
        injected = []
        for _ in range(self.substeps):
            if log is not None:
                log.append((self.state.accumulation.copy(), float(self.state.queue.sum())))
            q = self.demand_rate(self.time) * factor
            injected.append(q)
            self.state = step(self.state, self.network, q, u, self.T_p)
        rho, phi = read_sensors(self.state, self.network, self.sensors, self.sensor_rng)
        return np.mean(injected, axis=0), rho, phi
