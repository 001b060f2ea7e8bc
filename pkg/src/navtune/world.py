"""The meta-MDP episode loop: parameter decisions at the meta cadence,
planner commands at the control cadence, dynamics and collision checks at
the physics cadence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import RobotState, Command, step_dynamics
from .grid import OccupancyGrid, UnreachableError, inflate, plan_global
from .obs import HistoryWindow, MetaObs, render_custom_image, vector_obs
from .planners import (DEFAULT_INFLATION, Planner, PlannerInput, SchemaError,
                       clamp_params)
from .reward import RewardConfig, StepSummary, compute_reward
from .sensors import Footprint, check_collision, raycast_lidar


@dataclass
class EpisodeConfig:
    meta_period: float = 0.5
    control_period: float = 0.1
    physics_period: float = 0.02
    timeout: float = 60.0
    goal_tolerance: float = 0.3
    history_frames: int = 4

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if not (self.physics_period <= self.control_period <= self.meta_period):
            raise ValueError("need physics_period <= control_period <= meta_period")
        for a, b, name in ((self.physics_period, self.control_period, "control/physics"),
                           (self.control_period, self.meta_period, "meta/control")):
            ratio = b / a
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError(f"{name} periods must divide evenly (ratio {ratio})")

    @property
    def phys_per_control(self) -> int:
        return int(round(self.control_period / self.physics_period))

    @property
    def control_per_meta(self) -> int:
        return int(round(self.meta_period / self.control_period))


@dataclass
class MetaStepRecord:
    t: float
    obs: MetaObs | None
    phi_norm: np.ndarray
    phi_values: np.ndarray
    reward: float
    reward_components: dict[str, float]
    pose: tuple[float, float, float]


@dataclass
class EpisodeLog:
    outcome: str                      # success | collision | timeout
    traversal_time: float
    steps: list[MetaStepRecord]
    env_id: str
    seed: int

    def __post_init__(self):
        if self.outcome not in ("success", "collision", "timeout"):
            raise ValueError(f"bad outcome '{self.outcome}'")

    @property
    def total_reward(self) -> float:
        return sum(s.reward for s in self.steps)


def _distance(state: RobotState, goal) -> float:
    return math.hypot(goal[0] - state.x, goal[1] - state.y)


def run_episode(grid: OccupancyGrid, planner: Planner, policy, cfg: EpisodeConfig,
                seed: int, reward_cfg: RewardConfig | None = None,
                record_obs: bool = True, footprint: Footprint | None = None,
                env_id: str | None = None) -> EpisodeLog:
    """Run one episode of the meta-MDP.

    Every meta period the policy picks a normalized parameter vector which is
    clamped to the planner schema; every control period the planner converts
    scan/path/parameters into a command; every physics period dynamics are
    integrated and collisions checked. Terminates on goal, collision, or
    timeout.
    """
    if policy.schema_id != planner.schema.planner_id:
        raise SchemaError(f"policy schema '{policy.schema_id}' != planner "
                          f"'{planner.schema.planner_id}'")
    if grid.start is None or grid.goal is None:
        raise ValueError("grid must carry start and goal")
    reward_cfg = reward_cfg or RewardConfig()
    footprint = footprint or Footprint()
    env_id = env_id or (f"seed{grid.seed}" if grid.seed is not None else "env")
    schema = planner.schema

    state = RobotState(*grid.start)
    goal = grid.goal
    if _distance(state, goal) <= cfg.goal_tolerance:
        return EpisodeLog("success", 0.0, [], env_id, seed)

    # Global path on a conservatively inflated costmap; fall back to the raw
    # grid when inflation walls off the passage.
    try:
        global_path = plan_global(inflate(grid, DEFAULT_INFLATION),
                                  (state.x, state.y), goal)
    except UnreachableError:
        global_path = plan_global(inflate(grid, 0.0), (state.x, state.y), goal)

    planner.reset(seed)
    build_images = record_obs or getattr(policy, "needs_image", False)
    history = HistoryWindow(capacity=cfg.history_frames)

    steps: list[MetaStepRecord] = []
    prev_phi_norm = np.zeros(schema.dim)  # schema midpoints
    pending = None            # (record, StepSummary at meta-step start)
    min_scan = math.inf
    outcome = None
    t = 0.0
    cmd = Command(0.0, 0.0)
    scan = None

    n_phys = int(round(cfg.timeout / cfg.physics_period))
    for n in range(n_phys):
        t = n * cfg.physics_period
        at_control = n % cfg.phys_per_control == 0
        at_meta = n % (cfg.phys_per_control * cfg.control_per_meta) == 0

        if at_control:
            scan = raycast_lidar(grid, state)
            min_scan = min(min_scan, float(scan.ranges.min()))

        if at_meta:
            if pending is not None:
                _close_meta(pending, state, goal, min_scan, False, reward_cfg)
            image = None
            if build_images:
                image = render_custom_image(scan, global_path, state, footprint)
                history.push(image, t)
            obs = MetaObs(image=image, history=history.copy() if build_images else None,
                          v=state.v, omega=state.omega, prev_phi=prev_phi_norm.copy(),
                          vector=vector_obs(scan, state, goal))
            phi_norm = np.asarray(policy.predict(obs), dtype=np.float64)
            phi = clamp_params(phi_norm, schema)
            planner.set_params(phi, grid)
            record = MetaStepRecord(t, obs if record_obs else None, phi_norm.copy(),
                                    phi.values.copy(), 0.0, {},
                                    (state.x, state.y, state.theta))
            steps.append(record)
            pending = (record, StepSummary(_distance(state, goal)))
            prev_phi_norm = phi_norm
            min_scan = float(scan.ranges.min())

        if at_control:
            x = PlannerInput(scan=scan, state=state, global_path=global_path,
                             costmap=planner.costmap, goal=goal)
            cmd = planner.plan(x)

        state = step_dynamics(state, cmd, cfg.physics_period)
        t = (n + 1) * cfg.physics_period
        if check := _terminal(grid, state, goal, footprint, cfg):
            outcome = check
            break

    if outcome is None:
        outcome = "timeout"
        t = cfg.timeout
    if pending is not None:
        _close_meta(pending, state, goal, min_scan, outcome == "collision", reward_cfg)
    return EpisodeLog(outcome, t, steps, env_id, seed)


def _terminal(grid, state, goal, footprint, cfg) -> str | None:
    if check_collision(grid, state, footprint):
        return "collision"
    if _distance(state, goal) <= cfg.goal_tolerance:
        return "success"
    return None


def _close_meta(pending, state, goal, min_scan, collided, reward_cfg) -> None:
    record, start_summary = pending
    cur = StepSummary(_distance(state, goal), collided, min_scan)
    r, components = compute_reward(start_summary, cur, reward_cfg)
    record.reward = r
    record.reward_components = components
