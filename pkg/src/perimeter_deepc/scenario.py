"""Scenario configuration: a JSON document with units spelled out in key names."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .plant import (ActuatorMap, DemandProfile, RegionNetwork, SensorConfig, cubic_production,
                    make_two_peak_demand)


def _coerce(typ, value):
    if isinstance(value, typ):
        return value
    if not isinstance(value, dict):
        raise ValueError(f"expected a mapping for {typ.__name__}, got {type(value).__name__}")
    return typ(**value)


@dataclass
class RegionSpec:
    name: str
    n_max_veh: float
    trip_length_m: float
    lane_km: float
    free_speed_mps: float = 10.0
    production_coeffs: list[float] | None = None     # ascending powers of n, veh m/s


@dataclass
class ActuatorSpec:
    name: str
    flows: list[list]                                # [[from, to, weight], ...] region indices
    default_lambda: float = 0.6


@dataclass
class DemandSpec:
    peak_times_s: list[float] = field(default_factory=lambda: [1800.0, 5400.0])
    peak_widths_s: list[float] = field(default_factory=lambda: [1800.0, 1800.0])
    peak_heights_veh_per_s: list[float] = field(default_factory=lambda: [1.0, 0.8])
    total_vehicles: float | None = None
    od_shares: list[list[float]] | None = None
    end_s: float | None = None


@dataclass
class DeePCSpec:
    T_ini: int = 5
    T_f: int = 4
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda_y: float = 0.0
    Q_diag: list[float] | None = None
    R_diag: list[float] | None = None
    duty_cycle_steps: int = 1
    apply_steps: int = 1
    data_file: str | None = None


@dataclass
class MpcSpec:
    horizon: int = 4
    pieces: int = 10


@dataclass
class CollectSpec:
    steps: int = 400
    demand_dither: float = 0.3
    tile_demand: bool = True


@dataclass
class ScenarioConfig:
    name: str
    regions: list[RegionSpec]
    adjacency: list[list[int]]                       # [[i, h], ...] ordered pairs
    capacity_veh_per_s: list[list[float]]            # N x N, only adjacent entries used
    routing: list[list[list[float]]]                 # N x N x N next-hop shares
    actuators: list[ActuatorSpec]
    demand: DemandSpec
    capacity_knee: float = 0.0
    lambda_lb: float = 0.05
    lambda_ub: float = 0.95
    plant_step_s: float = 5.0
    duty_cycle_s: float = 90.0
    horizon_cycles: int = 160
    sensors_per_region: int = 1
    sensor_noise: float = 0.0
    seed: int = 0
    controller: str = "baseline"
    period: int = 1
    deepc: DeePCSpec = field(default_factory=DeePCSpec)
    mpc: MpcSpec = field(default_factory=MpcSpec)
    collect: CollectSpec = field(default_factory=CollectSpec)
    output_dir: str = "out"

    def __post_init__(self):
        N = len(self.regions)
        for pair in self.adjacency:
            if len(pair) != 2 or not all(0 <= v < N for v in pair) or pair[0] == pair[1]:
                raise ValueError(f"adjacency entry {pair} does not name two distinct regions")
        adj = {tuple(p) for p in self.adjacency}
        for a in self.actuators:
            for fl in a.flows:
                if (int(fl[0]), int(fl[1])) not in adj:
                    raise ValueError(f"actuator {a.name} references missing flow {fl[:2]}")
        if self.demand.od_shares is not None and np.shape(self.demand.od_shares) != (N, N):
            raise ValueError("demand OD shares must be an N x N matrix over the configured regions")
        if self.controller not in ("baseline", "mpc", "deepc"):
            raise ValueError(f"unknown controller {self.controller!r}")
        if self.period < 1:
            raise ValueError("period must be a positive number of duty cycles")

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        d["regions"] = [_coerce(RegionSpec, r) for r in d["regions"]]
        d["actuators"] = [_coerce(ActuatorSpec, a) for a in d["actuators"]]
        d["demand"] = _coerce(DemandSpec, d["demand"])
        for key, typ in (("deepc", DeePCSpec), ("mpc", MpcSpec), ("collect", CollectSpec)):
            if key in d:
                d[key] = _coerce(typ, d[key])
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "ScenarioConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        return cls.loads(Path(path).read_text())

    def replace(self, **changes) -> "ScenarioConfig":
        d = self.to_dict()
        d.update(changes)
        return ScenarioConfig.from_dict(d)

    # -- construction ----------------------------------------------------
    @property
    def N(self) -> int:
        return len(self.regions)

    def build_network(self) -> RegionNetwork:
        N = self.N
        adj = np.zeros((N, N), dtype=bool)
        for i, h in self.adjacency:
            adj[i, h] = True
        prod = [np.asarray(r.production_coeffs, dtype=float) if r.production_coeffs is not None
                else cubic_production(r.free_speed_mps, r.n_max_veh) for r in self.regions]
        return RegionNetwork(
            names=[r.name for r in self.regions], production=prod,
            trip_length_m=[r.trip_length_m for r in self.regions],
            n_max=[r.n_max_veh for r in self.regions], lane_km=[r.lane_km for r in self.regions],
            adjacency=adj, capacity=np.asarray(self.capacity_veh_per_s, dtype=float),
            routing=np.asarray(self.routing, dtype=float), capacity_knee=self.capacity_knee,
        )

    def build_actuators(self, network: RegionNetwork | None = None) -> ActuatorMap:
        network = network or self.build_network()
        flows = network.flows()
        W = np.zeros((len(self.actuators), len(flows)))
        for a, spec in enumerate(self.actuators):
            for i, h, w in spec.flows:
                W[a, flows.index((int(i), int(h)))] += float(w)
        return ActuatorMap(flows, W, [a.default_lambda for a in self.actuators],
                           self.lambda_lb, self.lambda_ub, [a.name for a in self.actuators])

    def build_demand(self) -> DemandProfile:
        d = self.demand
        shares = d.od_shares if d.od_shares is not None else np.eye(self.N)[:1].T @ np.eye(self.N)[:1]
        return make_two_peak_demand(d.peak_times_s, d.peak_widths_s, d.peak_heights_veh_per_s,
                                    d.total_vehicles, shares, end=d.end_s)

    def sensor_config(self) -> SensorConfig | None:
        if self.sensors_per_region == 1 and self.sensor_noise == 0:
            return None
        return SensorConfig(self.sensors_per_region, self.sensor_noise, self.seed)

    def demand_pairs(self) -> list[tuple[int, int]]:
        """OD pairs with nonzero demand; these are the demand channels DeePC sees."""
        share = self.build_demand().values.sum(axis=0)
        return [(i, j) for i in range(self.N) for j in range(self.N) if share[i, j] > 0]


def lattice_deepc_defaults() -> DeePCSpec:
    """Horizons and weights used for the small lattice study."""
    return DeePCSpec(T_ini=5, T_f=4, lambda1=1.0, lambda2=1.0, lambda_y=0.0)


def city_deepc_defaults(regions: int = 8) -> DeePCSpec:
    """Heavier regularization used for the eight-region city study."""
    return DeePCSpec(T_ini=5, T_f=4, lambda1=15.0, lambda2=20.0, lambda_y=0.0,
                     Q_diag=[1.0] * regions, R_diag=[2.0] * regions)


def stress_scenario(**overrides) -> ScenarioConfig:
    """Two-region scenario whose inner region jams under the static splits.

    The static plan keeps ``gate_out`` mostly red, so inner-region vehicles
    bound for the outer region pile up and the inner region locks.  Opening
    every gate clears the first peak but leaves the inner region far above
    critical during the second; DeePC weights only the inner density.
    """
    N = 2
    routing = np.zeros((N, N, N))
    routing[0, 0, 0] = 1.0
    routing[1, 1, 1] = 1.0
    routing[0, 1, 1] = 1.0
    routing[1, 0, 0] = 1.0
    cfg = ScenarioConfig(
        name="two-region-stress",
        regions=[
            RegionSpec("outer", n_max_veh=10000.0, trip_length_m=4000.0, lane_km=100.0, free_speed_mps=10.0),
            RegionSpec("inner", n_max_veh=4000.0, trip_length_m=2000.0, lane_km=40.0, free_speed_mps=8.0),
        ],
        adjacency=[[0, 1], [1, 0]],
        capacity_veh_per_s=[[0.0, 4.0], [4.0, 0.0]],
        routing=routing.tolist(),
        actuators=[
            ActuatorSpec("gate_in", [[0, 1, 0.7], [1, 0, 0.3]], default_lambda=0.95),
            ActuatorSpec("gate_out", [[0, 1, 0.3], [1, 0, 0.7]], default_lambda=0.3),
        ],
        demand=DemandSpec(
            peak_times_s=[2400.0, 5400.0], peak_widths_s=[2000.0, 2000.0],
            peak_heights_veh_per_s=[1.0, 0.85], total_vehicles=19200.0,
            od_shares=[[0.2, 0.6], [0.1, 0.1]], end_s=7400.0,
        ),
        lambda_lb=0.2,
        deepc=DeePCSpec(T_ini=5, T_f=4, lambda1=1.0, lambda2=1.0, lambda_y=0.0,
                        Q_diag=[0.0, 1.0], R_diag=[0.02, 0.02]),
    )
    return cfg.replace(**overrides) if overrides else cfg
