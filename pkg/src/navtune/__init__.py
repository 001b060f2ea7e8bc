"""Learned online adaptation of classical navigation planner parameters.

A desk-scale stack: 2D constrained-navigation simulator, parameterized DWA and
MPPI local planners, rendered robot-centric observations, a from-scratch
reverse-mode autodiff engine, learned parameter policies, behavior cloning and
TD3 fine-tuning, and a BARN-style benchmark harness.
"""
from .dynamics import Command, RobotState, step_dynamics
from .grid import (GenConfig, OccupancyGrid, generate_barn_env, inflate,
                   plan_global)
from .planners import SCHEMAS, PlannerInput, clamp_params, make_planner
from .policy import (HeuristicPolicy, MLPPolicy, StaticPolicy, VisionPolicy,
                     default_rule_table, load_policy, save_policy)
from .sensors import Footprint, LidarScan, check_collision, raycast_lidar
from .world import EpisodeConfig, EpisodeLog, run_episode

__version__ = "0.1.0"

__all__ = [
    "Command", "RobotState", "step_dynamics",
    "GenConfig", "OccupancyGrid", "generate_barn_env", "inflate", "plan_global",
    "SCHEMAS", "PlannerInput", "clamp_params", "make_planner",
    "HeuristicPolicy", "MLPPolicy", "StaticPolicy", "VisionPolicy",
    "default_rule_table", "load_policy", "save_policy",
    "Footprint", "LidarScan", "check_collision", "raycast_lidar",
    "EpisodeConfig", "EpisodeLog", "run_episode",
    "__version__",
]
