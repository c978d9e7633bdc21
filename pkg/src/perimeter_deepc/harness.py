"""Offline data collection and closed-loop runs on the region plant.

One controller step is one duty cycle.  DeePC sees inputs
``u = col(lambda, d)`` (splits followed by the OD demands that are nonzero in
the scenario) and outputs ``y = rho`` (regional densities).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mfd
from .deepc import DeePCConfig, DeePCController
from .lti import Trajectory, build_hankel, check_generalized_pe, read_trajectory_csv, split_past_future
from .mpc import LinearMpc, LinearMpcConfig
from .plant import Plant
from .scenario import ScenarioConfig

logger = logging.getLogger(__name__)


class PersistencyError(RuntimeError):
    def __init__(self, rank: int, required: int, depth: int):
        super().__init__(f"collected data is not persistently exciting: rank {rank} < {required} at depth {depth}")
        self.rank, self.required, self.depth = rank, required, depth


def make_plant(cfg: ScenarioConfig, *, tile_demand=False, demand_noise=0.0, seed=None) -> Plant:
    net = cfg.build_network()
    return Plant(net, cfg.build_actuators(net), cfg.build_demand(), T_p=cfg.plant_step_s,
                 cycle_s=cfg.duty_cycle_s, sensors=cfg.sensor_config(), tile_demand=tile_demand,
                 demand_noise=demand_noise, seed=cfg.seed if seed is None else seed)


@dataclass
class CollectResult:
    trajectory: Trajectory
    pe_ok: bool
    rank: int
    required_rank: int
    depth: int
    scatter: np.ndarray       # (steps * N, 2) density/flow samples per region, region-major
    phi: np.ndarray           # (steps, N)


def collect(cfg: ScenarioConfig, steps: int | None = None, seed: int | None = None,
            n_est: int | None = None) -> CollectResult:
    """Excite the plant with random splits held per duty cycle.

    Splits are drawn uniformly in the bounds for every actuator and cycle.
    The demand follows the scenario profile repeated over the collection
    length and multiplied per cycle by ``1 + dither * N(0, 1)`` so that the
    demand channels are exciting as well.  The returned PE verdict uses
    ``n_est`` (default: ``p * L``, i.e. full row rank of the Hankel matrix).
    """
    steps = cfg.collect.steps if steps is None else steps
    seed = cfg.seed if seed is None else seed
    L = cfg.deepc.T_ini + cfg.deepc.T_f
    if steps < L:
        raise ValueError(f"{steps} steps cannot fill a depth-{L} Hankel matrix")
    plant = make_plant(cfg, tile_demand=cfg.collect.tile_demand, demand_noise=cfg.collect.demand_dither, seed=seed)
    rng = np.random.default_rng([seed, 1])
    pairs = cfg.demand_pairs()
    act = plant.actuators
    U, Y, PHI = [], [], []
    for _ in range(steps):
        lam = rng.uniform(act.lower, act.upper)
        d, rho, phi = plant.advance_cycle(lam)
        U.append(np.concatenate([lam, [d[i, j] for i, j in pairs]]))
        Y.append(rho)
        PHI.append(phi)
    traj = Trajectory.from_io(np.array(U).T, np.array(Y).T)
    m, p = traj.m, traj.p
    n_est = p * L if n_est is None else n_est
    ok, rank = check_generalized_pe(build_hankel(traj, L), m, n_est)
    rho_all, phi_all = np.array(Y), np.array(PHI)
    scatter = np.concatenate([np.c_[rho_all[:, i], phi_all[:, i]] for i in range(p)])
    return CollectResult(traj, ok, rank, m * L + n_est, L, scatter, phi_all)


def fit_region_mfds(scatter: np.ndarray, N: int) -> list[mfd.MfdEstimate]:
    per = scatter.reshape(N, -1, 2)
    return [mfd.fit(per[i]) for i in range(N)]


@dataclass
class RunRecord:
    controller: str
    period: int
    plant_step_s: float
    duty_cycle_s: float
    actuator_names: list[str]
    region_names: list[str]
    rho_max: np.ndarray
    lam: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))       # (K, l)
    demand: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))    # (K, N*N) veh/s
    rho: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))       # (K, N) end of cycle
    phi: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    status: list[str] = field(default_factory=list)
    iterations: list[int] = field(default_factory=list)
    degraded: list[bool] = field(default_factory=list)
    plant_n: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))   # (K*S, N) start of each plant step
    plant_queue: np.ndarray = field(default_factory=lambda: np.zeros(0))    # (K*S,) total waiting
    plant_rho: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    plant_phi: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    time_spent: float = 0.0
    trips_completed: float = 0.0
    demand_total: float = 0.0

    @property
    def steps(self) -> int:
        return self.lam.shape[0]

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"run": out / "run.csv", "state": out / "state.csv",
                 "actuators": out / "actuators.csv", "totals": out / "totals.csv"}
        N, l = len(self.region_names), len(self.actuator_names)
        with open(paths["run"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", *[f"lambda_{a}" for a in self.actuator_names],
                        *[f"d_{i}_{j}" for i in range(N) for j in range(N)],
                        *[f"rho_{r}" for r in self.region_names], *[f"phi_{r}" for r in self.region_names],
                        "status", "iterations", "degraded"])
            for k in range(self.steps):
                w.writerow([k, *map(_fmt, self.lam[k]), *map(_fmt, self.demand[k]), *map(_fmt, self.rho[k]),
                            *map(_fmt, self.phi[k]), self.status[k], self.iterations[k], int(self.degraded[k])])
        with open(paths["state"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "region", "n", "rho", "phi", "queue"])
            for k in range(self.plant_n.shape[0]):
                for i in range(N):
                    w.writerow([k, i, _fmt(self.plant_n[k, i]), _fmt(self.plant_rho[k, i]),
                                _fmt(self.plant_phi[k, i]), _fmt(self.plant_queue[k]) if i == 0 else "0"])
        with open(paths["actuators"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "actuator", "lambda"])
            for k in range(self.steps):
                for a in range(l):
                    w.writerow([k, a, _fmt(self.lam[k, a])])
        with open(paths["totals"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["key", "value"])
            for key in ("controller", "period", "plant_step_s", "duty_cycle_s", "time_spent",
                        "trips_completed", "demand_total"):
                v = getattr(self, key)
                w.writerow([key, _fmt(v) if isinstance(v, float) else v])
            w.writerow(["regions", ";".join(self.region_names)])
            w.writerow(["actuators", ";".join(self.actuator_names)])
            w.writerow(["rho_max", ";".join(_fmt(v) for v in self.rho_max)])
        return paths

    @classmethod
    def read(cls, out_dir) -> "RunRecord":
        out = Path(out_dir)
        tot = {}
        with open(out / "totals.csv", newline="") as fh:
            for row in list(csv.reader(fh))[1:]:
                tot[row[0]] = row[1]
        regions = tot["regions"].split(";")
        actuators = tot["actuators"].split(";") if tot["actuators"] else []
        N, l = len(regions), len(actuators)
        rec = cls(tot["controller"], int(tot["period"]), float(tot["plant_step_s"]), float(tot["duty_cycle_s"]),
                  actuators, regions, np.array([float(v) for v in tot["rho_max"].split(";")]),
                  time_spent=float(tot["time_spent"]), trips_completed=float(tot["trips_completed"]),
                  demand_total=float(tot["demand_total"]))
        rows = _read_rows(out / "run.csv")
        if rows:
            vals = np.array([[float(v) for v in r[1:1 + l + N * N + 2 * N]] for r in rows]).reshape(len(rows), -1)
            rec.lam = vals[:, :l]
            rec.demand = vals[:, l:l + N * N]
            rec.rho = vals[:, l + N * N:l + N * N + N]
            rec.phi = vals[:, l + N * N + N:]
            rec.status = [r[-3] for r in rows]
            rec.iterations = [int(r[-2]) for r in rows]
            rec.degraded = [bool(int(r[-1])) for r in rows]
        st = _read_rows(out / "state.csv")
        K = len(st) // N
        arr = np.array([[float(v) for v in r[2:]] for r in st]).reshape(K, N, 4)
        rec.plant_n, rec.plant_rho, rec.plant_phi = arr[:, :, 0], arr[:, :, 1], arr[:, :, 2]
        rec.plant_queue = arr[:, 0, 3]
        return rec


def _fmt(v) -> str:
    return repr(float(v))


def _read_rows(path: Path) -> list[list[str]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            rows.append(row)
        return rows


def deepc_config(cfg: ScenarioConfig, p: int, m: int, l: int) -> DeePCConfig:
    d = cfg.deepc
    Q = np.diag(d.Q_diag) if d.Q_diag is not None else np.eye(p)
    if d.R_diag is not None:
        R = np.zeros((m, m))
        R[:l, :l] = np.diag(d.R_diag[:l])
    else:
        R = np.zeros((m, m))
        R[:l, :l] = 2.0 * np.eye(l)
    net = cfg.build_network()
    return DeePCConfig(T_ini=d.T_ini, T_f=d.T_f, lambda1=d.lambda1, lambda2=d.lambda2, lambda_y=d.lambda_y,
                       Q=Q, R=R, lambda_lb=cfg.lambda_lb, lambda_ub=cfg.lambda_ub,
                       duty_cycle_steps=d.duty_cycle_steps, apply_steps=d.apply_steps,
                       rho_max=net.rho_max, y_min=0.0, n_actuators=l)


def build_deepc(cfg: ScenarioConfig, data: Trajectory, y_ref) -> DeePCController:
    l = len(cfg.actuators)
    dcfg = deepc_config(cfg, data.p, data.m, l)
    blocks = split_past_future(data.u, data.y, dcfg.T_ini, dcfg.T_f)
    act = cfg.build_actuators()
    return DeePCController(dcfg, blocks, y_ref, act.default, n_demand=data.m - l)


def demand_forecast(plant: Plant, pairs, t0: float, cycles: int) -> np.ndarray:
    """Mean OD demand of the next ``cycles`` duty cycles from the scenario profile."""
    out = []
    for c in range(cycles):
        q = plant.demand_over_cycle(t0 + c * plant.cycle_s)
        out.append([q[i, j] for i, j in pairs])
    return np.array(out)


def run(cfg: ScenarioConfig, controller: str | None = None, data: Trajectory | None = None,
        y_ref=None, period: int | None = None, horizon_cycles: int | None = None) -> RunRecord:
    """Closed loop over the scenario horizon.

    ``period`` is the number of duty cycles between controller updates; the
    split computed at an update is held until the next one.  DeePC applies
    the static splits until its recent window holds ``T_ini`` cycles.
    """
    controller = controller or cfg.controller
    period = period or cfg.period
    K = horizon_cycles or cfg.horizon_cycles
    plant = make_plant(cfg)
    net, act = plant.network, plant.actuators
    pairs = cfg.demand_pairs()
    N, l = net.N, act.l
    ctrl = mpc = None
    if controller == "deepc":
        if data is None:
            if cfg.deepc.data_file is None:
                raise FileNotFoundError("DeePC needs a collected data set")
            data = read_trajectory_csv(cfg.deepc.data_file)
        if y_ref is None:
            raise ValueError("DeePC needs an output reference")
        ctrl = build_deepc(cfg, data, y_ref)
    elif controller == "mpc":
        mpc = LinearMpc(net, act, LinearMpcConfig(horizon=cfg.mpc.horizon, pieces=cfg.mpc.pieces,
                                                  step_s=cfg.duty_cycle_s))
    elif controller != "baseline":
        raise ValueError(f"unknown controller {controller!r}")

    rec = RunRecord(controller, period, cfg.plant_step_s, cfg.duty_cycle_s, list(act.names), list(net.names),
                    net.rho_max)
    lam_hist, d_hist, rho_hist, phi_hist = [], [], [], []
    pn, pq = [], []
    lam = act.default.copy()
    T_f = cfg.deepc.T_f
    for k in range(K):
        t0 = plant.time
        status, iters, degraded = "static", 0, False
        if k % period == 0:
            if ctrl is not None and ctrl.ready:
                d_bar = demand_forecast(plant, pairs, t0, T_f)
                res = ctrl.receding_horizon_step(d_bar.reshape(-1))
                lam = res.inputs[0, :l].copy()
                status, iters, degraded = res.status, res.iterations, res.degraded
            elif mpc is not None:
                fc = np.array([plant.demand_over_cycle(t0 + c * plant.cycle_s) for c in range(cfg.mpc.horizon)])
                st = mpc.solve_step(plant.state, fc)
                lam = st.lam
                status, iters = st.status, st.iterations
            elif ctrl is not None:
                lam = act.default.copy()
                status = "warmup"
        else:
            status = "hold"
        lam = act.clip(lam)
        log: list = []
        d, rho, phi = plant.advance_cycle(lam, log)
        pn.extend(n for n, _ in log)
        pq.extend(w for _, w in log)
        if ctrl is not None:
            ctrl.update_window(np.concatenate([lam, [d[i, j] for i, j in pairs]]), rho)
        lam_hist.append(lam.copy())
        d_hist.append(d.reshape(-1))
        rho_hist.append(rho)
        phi_hist.append(phi)
        rec.status.append(status)
        rec.iterations.append(int(iters))
        rec.degraded.append(bool(degraded))
    rec.lam, rec.demand = np.array(lam_hist), np.array(d_hist)
    rec.rho, rec.phi = np.array(rho_hist), np.array(phi_hist)
    rec.plant_n, rec.plant_queue = np.array(pn), np.array(pq)
    rec.plant_rho = rec.plant_n / net.lane_km
    rec.plant_phi = np.array([3600.0 * net.production_at(n) / net.trip_length_m for n in rec.plant_n])
    rec.time_spent = plant.state.time_spent
    rec.trips_completed = plant.state.trips_completed
    rec.demand_total = float(np.sum(rec.demand) * cfg.duty_cycle_s)
    return rec

