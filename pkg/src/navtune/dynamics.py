"""Differential-drive robot state and kinematics.

Velocity commands are tracked under acceleration limits, then the pose is
advanced with exact constant-twist integration, so constant-command arcs
match the closed form without Euler drift.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Simulator hard limits, independent of any planner parameter vector.
V_HARD_MAX = 2.0        # m/s
OMEGA_HARD_MAX = 3.14   # rad/s
ACC_V = 2.0             # m/s^2
ACC_OMEGA = 3.2         # rad/s^2

_TWO_PI = 2.0 * math.pi


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    t = math.remainder(theta, _TWO_PI)
    if t <= -math.pi:
        t += _TWO_PI
    return t


def normalize_angles(theta: np.ndarray) -> np.ndarray:
    t = np.remainder(theta + math.pi, _TWO_PI) - math.pi  # [-pi, pi)
    return np.where(t == -math.pi, math.pi, t)  # flip the closed end to +pi


@dataclass
class Command:
    v: float
    omega: float


@dataclass
class RobotState:
    x: float
    y: float
    theta: float
    v: float = 0.0
    omega: float = 0.0

    def __post_init__(self):
        self.theta = normalize_angle(self.theta)
        if abs(self.v) > V_HARD_MAX + 1e-12 or abs(self.omega) > OMEGA_HARD_MAX + 1e-12:
            raise ValueError("velocity outside simulator hard limits")


def _track_velocity(current: float, commanded: float, accel: float, dt: float,
                    hard_max: float) -> float:
    cmd = min(max(commanded, -hard_max), hard_max)
    lo, hi = current - accel * dt, current + accel * dt
    return min(max(cmd, lo), hi)


def step_dynamics(state: RobotState, cmd: Command, dt: float) -> RobotState:
    """Advance one physics step; commanded velocities clamped to hard limits."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    v = _track_velocity(state.v, cmd.v, ACC_V, dt, V_HARD_MAX)
    w = _track_velocity(state.omega, cmd.omega, ACC_OMEGA, dt, OMEGA_HARD_MAX)
    if abs(w) < 1e-12:
        x = state.x + v * math.cos(state.theta) * dt
        y = state.y + v * math.sin(state.theta) * dt
        theta = state.theta
    else:
        theta = state.theta + w * dt
        x = state.x + (v / w) * (math.sin(theta) - math.sin(state.theta))
        y = state.y - (v / w) * (math.cos(theta) - math.cos(state.theta))
    return RobotState(x, y, normalize_angle(theta), v, w)


def step_batch(states: np.ndarray, cmds: np.ndarray, dt: float) -> np.ndarray:
    """Vectorized step_dynamics over N states.

    states: (N, 5) columns [x, y, theta, v, omega]; cmds: (N, 2) [v, omega].
    """
    x, y, theta, v0, w0 = states.T
    cmd_v = np.clip(cmds[:, 0], -V_HARD_MAX, V_HARD_MAX)
    cmd_w = np.clip(cmds[:, 1], -OMEGA_HARD_MAX, OMEGA_HARD_MAX)
    v = np.clip(cmd_v, v0 - ACC_V * dt, v0 + ACC_V * dt)
    w = np.clip(cmd_w, w0 - ACC_OMEGA * dt, w0 + ACC_OMEGA * dt)
    straight = np.abs(w) < 1e-12
    theta_new = theta + w * dt
    w_safe = np.where(straight, 1.0, w)
    x_new = np.where(straight,
                     x + v * np.cos(theta) * dt,
                     x + (v / w_safe) * (np.sin(theta_new) - np.sin(theta)))
    y_new = np.where(straight,
                     y + v * np.sin(theta) * dt,
                     y - (v / w_safe) * (np.cos(theta_new) - np.cos(theta)))
    theta_new = np.where(straight, theta, theta_new)
    return np.stack([x_new, y_new, normalize_angles(theta_new), v, w], axis=1)


def state_to_array(state: RobotState) -> np.ndarray:
    return np.array([state.x, state.y, state.theta, state.v, state.omega])
