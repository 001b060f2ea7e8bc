"""Meta-step reward: progress + collision + time + obstacle proximity."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass
class RewardConfig:
    k_progress: float = 2.0
    collision_penalty: float = -20.0
    time_penalty: float = -0.1          # per meta step
    obstacle_scale: float = 0.5
    obstacle_clearance: float = 0.5     # m

    def __post_init__(self):
        if self.collision_penalty >= 0:
            raise ValueError("collision_penalty must be negative")
        if self.time_penalty >= 0:
            raise ValueError("time_penalty must be negative")


@dataclass
class StepSummary:
    distance_to_goal: float
    collided: bool = False
    min_scan: float = float("inf")


def compute_reward(prev: StepSummary, cur: StepSummary,
                   cfg: RewardConfig) -> tuple[float, dict[str, float]]:
    components = {
        "progress": cfg.k_progress * (prev.distance_to_goal - cur.distance_to_goal),
        "collision": cfg.collision_penalty if cur.collided else 0.0,
        "time": cfg.time_penalty,
        "obstacle": -cfg.obstacle_scale * max(0.0, 1.0 - cur.min_scan / cfg.obstacle_clearance),
    }
    return sum(components.values()), components
