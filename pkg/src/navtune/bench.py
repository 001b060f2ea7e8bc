"""BARN-style scoring and Table-I-shaped suite reports.

Score = OT / clamp(AT, 2*OT, 8*OT) on success, 0 otherwise, where OT is the
shortest-path length on the raw grid divided by the hard velocity cap. The
clamp makes 0.5 the ceiling and rewards faster traversal up to 8x optimal.
"""
from __future__ import annotations

import csv
import hashlib
import json
from concurrent import futures
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics
from .grid import OccupancyGrid, UnreachableError, inflate, plan_global
from .planners import make_planner
from .reward import RewardConfig
from .world import EpisodeConfig, run_episode

OUTCOMES = ("success", "collision", "timeout")


@dataclass
class EvalRecord:
    env_id: str
    trial: int
    seed: int
    outcome: str
    traversal_time: float
    optimal_time: float
    score: float

    def __post_init__(self):
        if self.outcome not in OUTCOMES and self.outcome != "error":
            raise ValueError(f"bad outcome '{self.outcome}'")


@dataclass
class SuiteReport:
    method: str
    planner_id: str
    n_envs: int
    trials: int
    seeds: list[int]
    suite_hash: str
    success_pct: float
    avg_time: float
    avg_score: float
    collision_pct: float
    timeout_pct: float
    records: list[EvalRecord] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        d = asdict(self)
        return d


def path_length(path: np.ndarray) -> float:
    if len(path) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(path, axis=0), axis=1).sum())


def optimal_time(grid: OccupancyGrid) -> float:
    """Shortest raw-grid path length over the hard velocity cap."""
    if grid.start is None or grid.goal is None:
        raise ValueError("grid must carry start and goal")
    start = grid.start[:2]
    if np.hypot(grid.goal[0] - start[0], grid.goal[1] - start[1]) < 1e-12:
        return 0.0
    path = plan_global(inflate(grid, 0.0), start, grid.goal, cost_penalty=0.0)
    return path_length(path) / dynamics.V_HARD_MAX


def barn_score(outcome: str, actual_time: float, opt_time: float) -> float:
    if actual_time < 0 or opt_time < 0:
        raise ValueError("times must be >= 0")
    if outcome != "success":
        return 0.0
    if opt_time <= 0:
        raise ValueError("optimal_time must be > 0 for a nonzero path")
    clamped = min(max(actual_time, 2.0 * opt_time), 8.0 * opt_time)
    return opt_time / clamped


def suite_hash(env_ids: list[str], seeds: list[int]) -> str:
    h = hashlib.sha256(json.dumps([env_ids, seeds]).encode())
    return h.hexdigest()[:16]


def _run_one(grid: OccupancyGrid, planner_id: str, policy, env_id: str,
             trial: int, seed: int, cfg: EpisodeConfig,
             reward_cfg: RewardConfig | None) -> EvalRecord:
    try:
        ot = optimal_time(grid)
        planner = make_planner(planner_id)
        log = run_episode(grid, planner, policy, cfg, seed=seed,
                          reward_cfg=reward_cfg, record_obs=False, env_id=env_id)
        return EvalRecord(env_id, trial, seed, log.outcome, log.traversal_time,
                          ot, barn_score(log.outcome, log.traversal_time, ot))
    except (UnreachableError, ValueError) as e:
        return EvalRecord(env_id, trial, seed, "error", 0.0, 0.0, 0.0)


_POOL_STATE: dict = {}


def _pool_init(planner_id, policy, cfg, reward_cfg):
    _POOL_STATE.update(planner_id=planner_id, policy=policy, cfg=cfg,
                       reward_cfg=reward_cfg)


def _pool_task(args):
    grid_json, env_id, trial, seed = args
    grid = OccupancyGrid.from_json_dict(grid_json)
    return _run_one(grid, _POOL_STATE["planner_id"], _POOL_STATE["policy"],
                    env_id, trial, seed, _POOL_STATE["cfg"],
                    _POOL_STATE["reward_cfg"])


def trial_seed(base_seed: int, env_index: int, trial: int) -> int:
    # distinct, deterministic per (env, trial)
    return int(np.random.SeedSequence(
        [base_seed, env_index, trial]).generate_state(1)[0] % (2 ** 31))


def eval_suite(policy, planner_id: str, envs: list[tuple[str, OccupancyGrid]],
               method: str, trials: int = 3, base_seed: int = 0,
               cfg: EpisodeConfig | None = None,
               reward_cfg: RewardConfig | None = None,
               workers: int = 1) -> SuiteReport:
    """Evaluate a policy on a suite: `trials` episodes per env, distinct seeds.

    envs is an ordered list of (env_id, grid); ordering and seeds depend only
    on the suite and base_seed, so different methods see identical trials.
    """
    if not envs:
        raise ValueError("suite must be nonempty")
    cfg = cfg or EpisodeConfig()
    tasks = []
    for i, (env_id, grid) in enumerate(envs):
        for trial in range(trials):
            tasks.append((grid, env_id, i, trial, trial_seed(base_seed, i, trial)))

    if workers > 1:
        args = [(g.to_json_dict(), env_id, trial, seed)
                for g, env_id, _, trial, seed in tasks]
        with futures.ProcessPoolExecutor(
                max_workers=workers, initializer=_pool_init,
                initargs=(planner_id, policy, cfg, reward_cfg)) as ex:
            records = list(ex.map(_pool_task, args))
    else:
        records = [_run_one(g, planner_id, policy, env_id, trial, seed, cfg, reward_cfg)
                   for g, env_id, _, trial, seed in tasks]

    n = len(records)
    succ = [r for r in records if r.outcome == "success"]
    pct = lambda k: 100.0 * sum(r.outcome == k for r in records) / n
    return SuiteReport(
        method=method, planner_id=planner_id, n_envs=len(envs), trials=trials,
        seeds=[t[4] for t in tasks],
        suite_hash=suite_hash([e for e, _ in envs], [t[4] for t in tasks]),
        success_pct=pct("success"),
        avg_time=float(np.mean([r.traversal_time for r in succ])) if succ else 0.0,
        avg_score=float(np.mean([r.score for r in records])),
        collision_pct=pct("collision"),
        timeout_pct=pct("timeout") + pct("error"),
        records=records)


CSV_COLUMNS = ["Method", "Planner", "Success (%)", "Avg. Time (s)", "Avg. Score",
               "Collision (%)", "Timeout (%)"]


def write_report_csv(reports: list[SuiteReport], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow([r.method, r.planner_id, f"{r.success_pct:.1f}",
                        f"{r.avg_time:.2f}", f"{r.avg_score:.3f}",
                        f"{r.collision_pct:.1f}", f"{r.timeout_pct:.1f}"])


def write_report_json(reports: list[SuiteReport], path) -> None:
    with open(path, "w") as f:
        json.dump([r.to_json_dict() for r in reports], f, indent=2)


def load_suite(index_path) -> list[tuple[str, OccupancyGrid]]:
    """Load an env suite from a gen-envs index file."""
    index_path = Path(index_path)
    with open(index_path) as f:
        index = json.load(f)
    out = []
    for entry in index["environments"]:
        with open(index_path.parent / entry["file"]) as f:
            out.append((entry["env_id"], OccupancyGrid.from_json_dict(json.load(f))))
    return out
