"""Deterministic scene fixtures for the golden-image rendering tests.

Run `python3 tests/golden_scenes.py` from the repo root to regenerate
tests/goldens/obs_scenes.npz after an intentional renderer change.
"""
import math
import pathlib

import numpy as np

from navtune.dynamics import RobotState
from navtune.grid import generate_barn_env, inflate, plan_global
from navtune.obs import render_custom_image
from navtune.sensors import N_RAYS, LidarScan, raycast_lidar

GOLDEN_PATH = pathlib.Path(__file__).parent / "goldens" / "obs_scenes.npz"


def make_scene(i):
    """Scene i -> (scan, path, pose). Scenes 0-2 are synthetic, 3-4 generated."""
    if i == 0:
        # single obstacle 1 m dead ahead, no path
        ranges = np.full(N_RAYS, 10.0)
        ranges[360] = 1.0
        return LidarScan(ranges), np.zeros((0, 2)), RobotState(0.0, 0.0, 0.0)
    if i == 1:
        # clear scan, straight path ahead
        path = np.stack([np.linspace(0.0, 3.0, 40), np.zeros(40)], axis=1)
        return LidarScan(np.full(N_RAYS, 10.0)), path, RobotState(0.0, 0.0, 0.0)
    if i == 2:
        # ring of returns at 1.5 m, rotated robot, curved path
        ranges = np.full(N_RAYS, 1.5)
        t = np.linspace(0.0, math.pi / 2, 30)
        path = np.stack([2.0 * np.sin(t) + 1.0, 2.0 * (1 - np.cos(t)) + 1.0], axis=1)
        return LidarScan(ranges), path, RobotState(1.0, 1.0, math.pi / 4)
    # full simulated scenes from generated environments
    seed = {3: 11, 4: 27}[i]
    grid = generate_barn_env(seed)
    pose = RobotState(*grid.start)
    scan = raycast_lidar(grid, pose)
    path = plan_global(inflate(grid, 0.32), (pose.x, pose.y), grid.goal)
    return scan, path, pose


def render_all():
    return {f"scene_{i}": make_scene(i) for i in range(5)}


if __name__ == "__main__":
    GOLDEN_PATH.parent.mkdir(exist_ok=True)
    out = {}
    for name, (scan, path, pose) in render_all().items():
        out[name] = render_custom_image(scan, path, pose).pixels
    np.savez_compressed(GOLDEN_PATH, **out)
    print(f"wrote {GOLDEN_PATH} ({GOLDEN_PATH.stat().st_size} bytes)")
