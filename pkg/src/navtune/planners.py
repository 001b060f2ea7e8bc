"""Parameterized local planners behind one interface: DWA and MPPI.

Both consume a PlannerInput and a bounded parameter vector (the meta-action)
and emit a velocity command. Parameter schemas are canonical and versioned so
policies, datasets, and checkpoints agree on dimension and ordering.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import dynamics
from .dynamics import Command, RobotState, state_to_array, step_batch
from .grid import Costmap, LETHAL, OccupancyGrid, inflate
from scipy.spatial import cKDTree

from .sensors import LidarScan

SCHEMA_VERSION = 1

# Rollout cost constants shared by both planners (not part of the tuned
# parameter vector).
LETHAL_ROLLOUT_PENALTY = 1000.0
MPPI_PATH_WEIGHT = 2.0
MPPI_GOAL_WEIGHT = 5.0
MPPI_PROXIMITY_SCALE = 0.1
FOOTPRINT_HALF_LENGTH = 0.255
FOOTPRINT_HALF_WIDTH = 0.215
# clearance_at measures to the nearest occupied cell center; the cell square
# face sits roughly this much closer along the obstacle normal
CELL_FACE_MARGIN = 0.10
MPPI_SMOOTH_WEIGHT = 0.3  # damps turn-rate dithering in the averaged sequence
DWA_SIM_TIME = 1.5
CARROT_LOOKAHEAD = 1.5
# inscribed half-width (0.215) plus the half-diagonal of a grid cell (0.106):
# costmap distances are cell-center based, but collisions are against the full
# cell square, so the lethal band must absorb that offset.
DEFAULT_INFLATION = 0.32


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class ParamEntry:
    name: str
    unit: str
    lower: float
    upper: float
    integer: bool = False

    def __post_init__(self):
        if not self.lower < self.upper:
            raise SchemaError(f"{self.name}: lower must be < upper")


@dataclass(frozen=True)
class ParamSchema:
    planner_id: str
    entries: tuple[ParamEntry, ...]
    version: int = SCHEMA_VERSION

    @property
    def dim(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def to_json_dict(self) -> dict:
        return {
            "planner_id": self.planner_id,
            "version": self.version,
            "entries": [
                {"name": e.name, "unit": e.unit, "lower": e.lower,
                 "upper": e.upper, "integer": e.integer}
                for e in self.entries
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ParamSchema":
        return cls(
            planner_id=d["planner_id"],
            version=d.get("version", SCHEMA_VERSION),
            entries=tuple(ParamEntry(e["name"], e["unit"], e["lower"], e["upper"],
                                     e.get("integer", False)) for e in d["entries"]),
        )


DWA_SCHEMA = ParamSchema("dwa", (
    ParamEntry("max_vel_x", "m/s", 0.1, 2.0),
    ParamEntry("max_vel_theta", "rad/s", 0.3, 3.14),
    ParamEntry("vx_samples", "count", 4, 12, integer=True),
    ParamEntry("vtheta_samples", "count", 8, 40, integer=True),
    ParamEntry("path_distance_bias", "1/m", 0.1, 1.5),
    ParamEntry("goal_distance_bias", "1/m", 0.1, 2.0),
    ParamEntry("occdist_scale", "1", 0.01, 1.0),
    ParamEntry("inflation_radius", "m", 0.05, 0.6),
))

MPPI_SCHEMA = ParamSchema("mppi", (
    ParamEntry("num_samples", "count", 32, 512, integer=True),
    ParamEntry("horizon_steps", "count", 10, 40, integer=True),
    ParamEntry("temperature", "1", 0.01, 1.0),
    ParamEntry("noise_std_v", "m/s", 0.05, 0.5),
    ParamEntry("noise_std_omega", "rad/s", 0.1, 1.0),
    ParamEntry("obstacle_weight", "1", 1.0, 50.0),
    ParamEntry("max_vel_x", "m/s", 0.1, 2.0),
))

SCHEMAS = {s.planner_id: s for s in (DWA_SCHEMA, MPPI_SCHEMA)}


@dataclass
class PlannerParams:
    schema_id: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        schema = SCHEMAS[self.schema_id]
        if self.values.shape != (schema.dim,):
            raise SchemaError(f"expected {schema.dim} values for {self.schema_id}")
        for e, v in zip(schema.entries, self.values):
            if not (e.lower - 1e-9 <= v <= e.upper + 1e-9):
                raise SchemaError(f"{e.name}={v} outside [{e.lower}, {e.upper}]")
            if e.integer and abs(v - round(v)) > 1e-9:
                raise SchemaError(f"{e.name}={v} must be integral")

    def as_dict(self) -> dict[str, float]:
        schema = SCHEMAS[self.schema_id]
        return dict(zip(schema.names(), self.values))

    def __getitem__(self, name: str) -> float:
        return self.as_dict()[name]


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def clamp_params(raw: np.ndarray, schema: ParamSchema) -> PlannerParams:
    """Map normalized values in [-1, 1] onto the schema's physical bounds."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (schema.dim,):
        raise SchemaError(f"expected {schema.dim} raw values, got shape {raw.shape}")
    raw = np.clip(raw, -1.0, 1.0)
    lo = np.array([e.lower for e in schema.entries])
    hi = np.array([e.upper for e in schema.entries])
    vals = lo + (raw + 1.0) * 0.5 * (hi - lo)
    is_int = np.array([e.integer for e in schema.entries])
    vals = np.where(is_int, np.clip(_round_half_away(vals), lo, hi), vals)
    return PlannerParams(schema.planner_id, vals)


def normalize_params(params: PlannerParams) -> np.ndarray:
    """Inverse of clamp_params (up to integer rounding)."""
    schema = SCHEMAS[params.schema_id]
    lo = np.array([e.lower for e in schema.entries])
    hi = np.array([e.upper for e in schema.entries])
    return np.clip(2.0 * (params.values - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def midpoint_params(schema: ParamSchema) -> PlannerParams:
    return clamp_params(np.zeros(schema.dim), schema)


@dataclass
class PlannerInput:
    scan: LidarScan
    state: RobotState
    global_path: np.ndarray  # (N, 2) world waypoints
    costmap: Costmap
    goal: tuple[float, float]

    def __post_init__(self):
        if len(self.global_path) == 0:
            raise ValueError("global_path must be nonempty")
        self._path_tree = None
        self._path_dirs = None

    @property
    def path_tree(self):
        if self._path_tree is None:
            self._path_tree = cKDTree(self.global_path)
        return self._path_tree

    @property
    def path_dirs(self) -> np.ndarray:
        """Per-waypoint tangent angle of the global path (last one repeated)."""
        if self._path_dirs is None:
            p = self.global_path
            if len(p) < 2:
                self._path_dirs = np.zeros(len(p))
            else:
                d = np.diff(p, axis=0)
                ang = np.arctan2(d[:, 1], d[:, 0])
                self._path_dirs = np.append(ang, ang[-1])
        return self._path_dirs


# -- shared rollout machinery ---------------------------------------------


def rollout(x0: RobotState, controls: np.ndarray, dt: float) -> np.ndarray:
    """Iterated dynamics under a (T, 2) control sequence; returns (T+1, 5) states."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    controls = np.asarray(controls, dtype=np.float64).reshape(-1, 2)
    traj = np.empty((len(controls) + 1, 5))
    traj[0] = state_to_array(x0)
    state = traj[0:1]
    for t, cmd in enumerate(controls):
        state = step_batch(state, cmd[None, :], dt)
        traj[t + 1] = state[0]
    return traj


def rollout_batch(x0: RobotState, controls: np.ndarray, dt: float) -> np.ndarray:
    """Vectorized rollouts: controls (K, T, 2) -> states (K, T+1, 5)."""
    K, T, _ = controls.shape
    out = np.empty((K, T + 1, 5))
    out[:, 0] = state_to_array(x0)[None, :]
    states = out[:, 0].copy()
    for t in range(T):
        states = step_batch(states, controls[:, t], dt)
        out[:, t + 1] = states
    return out


def carrot_point(path: np.ndarray, pose: RobotState,
                 lookahead: float = CARROT_LOOKAHEAD) -> np.ndarray:
    """Waypoint ~lookahead meters ahead of the robot along the global path."""
    p = np.array([pose.x, pose.y])
    d = np.linalg.norm(path - p, axis=1)
    i = int(np.argmin(d))
    acc = 0.0
    while i + 1 < len(path) and acc < lookahead:
        acc += float(np.linalg.norm(path[i + 1] - path[i]))
        i += 1
    return path[i]


def _min_path_distance(points: np.ndarray, x: PlannerInput) -> np.ndarray:
    """For each point (..., 2), distance to the nearest global-path waypoint."""
    flat = points.reshape(-1, 2)
    d, _ = x.path_tree.query(flat)
    return d.reshape(points.shape[:-1])


def _costmap_costs(costmap: Costmap, xy: np.ndarray) -> np.ndarray:
    """Costmap cost for an array of (..., 2) world points."""
    res = costmap.grid.resolution
    ix = np.floor((xy[..., 0] - costmap.grid.origin[0]) / res).astype(np.int64)
    iy = np.floor((xy[..., 1] - costmap.grid.origin[1]) / res).astype(np.int64)
    return costmap.cost_at_cells(ix, iy)


# -- DWA -------------------------------------------------------------------


def dwa_window(state: RobotState, phi: PlannerParams, dt_window: float) -> tuple[np.ndarray, np.ndarray]:
    p = phi.as_dict()
    v_lo = max(0.0, state.v - dynamics.ACC_V * dt_window)
    v_hi = min(p["max_vel_x"], state.v + dynamics.ACC_V * dt_window)
    v_hi = max(v_hi, v_lo)
    w_lim = min(p["max_vel_theta"], dynamics.OMEGA_HARD_MAX)
    w_lo = max(-w_lim, state.omega - dynamics.ACC_OMEGA * dt_window)
    w_hi = min(w_lim, state.omega + dynamics.ACC_OMEGA * dt_window)
    w_hi = max(w_hi, w_lo)
    vs = np.linspace(v_lo, v_hi, int(p["vx_samples"]))
    ws = np.linspace(w_lo, w_hi, int(p["vtheta_samples"]))
    return vs, ws


def dwa_score_components(x: PlannerInput, trajs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-rollout (path_dist, goal_dist, max_cost, lethal) for (K, T+1, 5) rollouts."""
    xy = trajs[..., :2]
    costs = _costmap_costs(x.costmap, xy.reshape(-1, 2)).reshape(xy.shape[:-1])
    max_cost = costs.max(axis=1)
    lethal = ((costs >= LETHAL)
              | predicted_footprint_hit(x.costmap, xy, trajs[..., 2])).any(axis=1)
    endpoints = xy[:, -1, :]
    path_dist = _min_path_distance(endpoints, x)
    carrot = carrot_point(x.global_path, x.state)
    goal_dist = np.linalg.norm(endpoints - carrot, axis=1)
    return path_dist, goal_dist, max_cost, lethal


def recovery_command(x: PlannerInput, phi: PlannerParams) -> Command:
    """In-place rotation toward the path carrot when every rollout is lethal."""
    carrot = carrot_point(x.global_path, x.state)
    bearing = math.atan2(carrot[1] - x.state.y, carrot[0] - x.state.x) - x.state.theta
    bearing = dynamics.normalize_angle(bearing)
    w_lim = min(phi["max_vel_theta"] if "max_vel_theta" in phi.as_dict() else 1.0,
                dynamics.OMEGA_HARD_MAX)
    sign = 1.0 if bearing >= 0 else -1.0
    return Command(0.0, sign * min(0.5 * w_lim + 1e-12, w_lim))


def dwa_plan(x: PlannerInput, phi: PlannerParams, dt_rollout: float = 0.1,
             sim_time: float = DWA_SIM_TIME) -> Command:
    """Exhaustive dynamic-window search over constant-velocity rollouts.

    Score = path_distance_bias * d(endpoint, path)
          + goal_distance_bias * d(endpoint, carrot)
          + occdist_scale * max costmap cost along the rollout.
    Rollouts touching lethal cost are discarded; ties prefer smaller |omega|,
    then larger v.
    """
    if phi.schema_id != "dwa":
        raise SchemaError("dwa_plan requires the DWA schema")
    p = phi.as_dict()
    vs, ws = dwa_window(x.state, phi, dt_rollout)
    vv, ww = np.meshgrid(vs, ws, indexing="ij")
    pairs = np.stack([vv.ravel(), ww.ravel()], axis=1)  # (K, 2)
    T = max(1, int(round(sim_time / dt_rollout)))
    controls = np.repeat(pairs[:, None, :], T, axis=1)
    trajs = rollout_batch(x.state, controls, dt_rollout)
    path_dist, goal_dist, max_cost, lethal = dwa_score_components(x, trajs)
    scores = (p["path_distance_bias"] * path_dist
              + p["goal_distance_bias"] * goal_dist
              + p["occdist_scale"] * max_cost)
    if lethal.all():
        return recovery_command(x, phi)
    scores = np.where(lethal, np.inf, scores)
    order = np.lexsort((-pairs[:, 0], np.abs(pairs[:, 1]), scores))
    best = order[0]
    return Command(float(pairs[best, 0]), float(pairs[best, 1]))


# -- MPPI ------------------------------------------------------------------


def resize_warm(warm: np.ndarray, horizon: int) -> np.ndarray:
    warm = np.asarray(warm, dtype=np.float64).reshape(-1, 2)
    if len(warm) >= horizon:
        return warm[:horizon].copy()
    pad = np.zeros((horizon - len(warm), 2))
    return np.concatenate([warm, pad], axis=0)


def predicted_footprint_hit(costmap: Costmap, xy: np.ndarray,
                            theta: np.ndarray) -> np.ndarray:
    """Conservative pose-level collision predictor for rollout points.

    The rectangle at (xy, theta) is predicted to hit an obstacle when its
    support along the direction of the nearest occupied cell exceeds the
    interpolated clearance to that cell (minus the cell face margin). Captures
    the orientation dependence a point-cost lookup misses: an aligned footprint
    threads a gap that a rotated one cannot.
    """
    clear = costmap.clearance_at(xy) - CELL_FACE_MARGIN
    delta = theta - costmap.nearest_obstacle_angle(xy)
    support = (FOOTPRINT_HALF_LENGTH * np.abs(np.cos(delta))
               + FOOTPRINT_HALF_WIDTH * np.abs(np.sin(delta)))
    return support > clear


def mppi_rollout_costs(x: PlannerInput, phi: PlannerParams, trajs: np.ndarray) -> np.ndarray:
    """Per-rollout cost S_i for (K, T+1, 5) rollouts."""
    p = phi.as_dict()
    xy = trajs[..., :2]
    costs = _costmap_costs(x.costmap, xy.reshape(-1, 2)).reshape(xy.shape[:-1])
    lethal_any = (costs >= LETHAL).any(axis=1).astype(np.float64)
    proximity = np.where(costs >= LETHAL, 1.0, costs).mean(axis=1)
    # Lethal contact is penalized independently of obstacle_weight so safety
    # never softens; obstacle_weight shapes only the proximity shaping term.
    hit = predicted_footprint_hit(x.costmap, xy, trajs[..., 2])
    lethal_any = np.maximum(lethal_any, hit.any(axis=1).astype(np.float64))
    obstacle = (LETHAL_ROLLOUT_PENALTY * lethal_any
                + p["obstacle_weight"] * MPPI_PROXIMITY_SCALE * proximity)
    path_term = MPPI_PATH_WEIGHT * _min_path_distance(xy, x).mean(axis=1)
    carrot = carrot_point(x.global_path, x.state)
    goal_term = MPPI_GOAL_WEIGHT * np.linalg.norm(xy[:, -1, :] - carrot, axis=1)
    smooth_term = MPPI_SMOOTH_WEIGHT * np.square(trajs[:, 1:, 4]).mean(axis=1)
    return obstacle + path_term + goal_term + smooth_term


def mppi_weights(costs: np.ndarray, temperature: float) -> np.ndarray:
    beta = costs.min()
    w = np.exp(-(costs - beta) / temperature)
    return w / w.sum()


def mppi_plan(x: PlannerInput, phi: PlannerParams, rng: np.random.Generator,
              warm: np.ndarray, dt_rollout: float = 0.1) -> tuple[Command, np.ndarray]:
    """One MPPI step: weighted average of noisy rollouts around the warm start.

    Returns the first command of the averaged sequence and the shifted
    sequence as the next warm start.
    """
    if phi.schema_id != "mppi":
        raise SchemaError("mppi_plan requires the MPPI schema")
    p = phi.as_dict()
    K, T = int(p["num_samples"]), int(p["horizon_steps"])
    if K < 1 or T < 1:
        raise SchemaError("num_samples and horizon_steps must be >= 1")
    warm = resize_warm(warm, T)
    noise = rng.normal(0.0, 1.0, size=(K, T, 2))
    noise[..., 0] *= p["noise_std_v"]
    noise[..., 1] *= p["noise_std_omega"]
    seqs = warm[None, :, :] + noise
    seqs[..., 0] = np.clip(seqs[..., 0], 0.0, p["max_vel_x"])
    seqs[..., 1] = np.clip(seqs[..., 1], -dynamics.OMEGA_HARD_MAX, dynamics.OMEGA_HARD_MAX)
    trajs = rollout_batch(x.state, seqs, dt_rollout)
    costs = mppi_rollout_costs(x, phi, trajs)
    w = mppi_weights(costs, p["temperature"])
    out_seq = np.einsum("k,ktc->tc", w, seqs)
    # The weighted average of safe rollouts is not itself guaranteed safe:
    # verify it, and hold back (recovery rotation) when it would hit lethal.
    avg_traj = rollout_batch(x.state, out_seq[None, :, :], dt_rollout)[0]
    avg_costs = _costmap_costs(x.costmap, avg_traj[:, :2])
    avg_hit = predicted_footprint_hit(x.costmap, avg_traj[:, :2], avg_traj[:, 2])
    if costs.min() >= LETHAL_ROLLOUT_PENALTY or (avg_costs >= LETHAL).any() \
            or avg_hit.any():
        return recovery_command(x, phi), np.zeros_like(out_seq)
    cmd = Command(float(out_seq[0, 0]), float(out_seq[0, 1]))
    next_warm = np.concatenate([out_seq[1:], out_seq[-1:]], axis=0)
    return cmd, next_warm


# -- planner objects used by the episode loop ------------------------------


class Planner:
    """Stateful wrapper: owns the parameter vector and any warm-start state."""

    schema: ParamSchema

    def __init__(self):
        self.params = midpoint_params(self.schema)
        self._costmap: Costmap | None = None
        self._grid: OccupancyGrid | None = None

    def reset(self, seed: int) -> None:
        pass

    @property
    def inflation_radius(self) -> float:
        return DEFAULT_INFLATION

    def set_params(self, params: PlannerParams, grid: OccupancyGrid) -> None:
        if params.schema_id != self.schema.planner_id:
            raise SchemaError(f"params for {params.schema_id}, planner is {self.schema.planner_id}")
        self.params = params
        r = self.inflation_radius
        if self._costmap is None or self._grid is not grid or \
                abs(r - self._costmap.inflation_radius) > 1e-12:
            self._costmap = inflate(grid, r)
            self._grid = grid

    @property
    def costmap(self) -> Costmap:
        if self._costmap is None:
            raise RuntimeError("set_params must be called before planning")
        return self._costmap

    def plan(self, x: PlannerInput) -> Command:
        raise NotImplementedError


class DWAPlanner(Planner):
    schema = DWA_SCHEMA

    def __init__(self, dt_rollout: float = 0.1, sim_time: float = DWA_SIM_TIME):
        super().__init__()
        self.dt_rollout = dt_rollout
        self.sim_time = sim_time

    @property
    def inflation_radius(self) -> float:
        return float(self.params["inflation_radius"])

    def plan(self, x: PlannerInput) -> Command:
        return dwa_plan(x, self.params, self.dt_rollout, self.sim_time)


class MPPIPlanner(Planner):
    schema = MPPI_SCHEMA

    def __init__(self, dt_rollout: float = 0.1):
        super().__init__()
        self.dt_rollout = dt_rollout
        self._rng = np.random.Generator(np.random.PCG64(0))
        self._warm = np.zeros((int(self.params["horizon_steps"]), 2))

    def reset(self, seed: int) -> None:
        self._rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x4D5049])))
        self._warm = np.zeros((int(self.params["horizon_steps"]), 2))

    def plan(self, x: PlannerInput) -> Command:
        cmd, self._warm = mppi_plan(x, self.params, self._rng, self._warm, self.dt_rollout)
        return cmd


PLANNERS = {"dwa": DWAPlanner, "mppi": MPPIPlanner}


def make_planner(planner_id: str, **kwargs) -> Planner:
    if planner_id not in PLANNERS:
        raise SchemaError(f"unknown planner '{planner_id}'")
    return PLANNERS[planner_id](**kwargs)


def save_schema(schema: ParamSchema, path) -> None:
    with open(path, "w") as f:
        json.dump(schema.to_json_dict(), f, indent=2)
