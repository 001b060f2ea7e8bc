"""Simulated lidar (grid raycasting) and footprint collision checking."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import RobotState
from .grid import OccupancyGrid

N_RAYS = 720
FOV_DEG = 270.0
DEFAULT_MAX_RANGE = 10.0

_MIN_RANGE = 1e-6


@dataclass
class LidarScan:
    ranges: np.ndarray           # (720,) meters, in (0, max_range]
    fov: float = FOV_DEG         # degrees
    max_range: float = DEFAULT_MAX_RANGE
    angle_min: float = -math.radians(FOV_DEG) / 2.0  # relative to heading
    angle_increment: float = math.radians(FOV_DEG) / N_RAYS

    def __post_init__(self):
        self.ranges = np.asarray(self.ranges, dtype=np.float64)
        if self.ranges.shape != (N_RAYS,):
            raise ValueError(f"expected {N_RAYS} rays, got {self.ranges.shape}")

    def angles(self) -> np.ndarray:
        """Ray angles relative to the robot heading."""
        return self.angle_min + np.arange(N_RAYS) * self.angle_increment


def raycast_lidar(grid: OccupancyGrid, pose: RobotState,
                  max_range: float = DEFAULT_MAX_RANGE) -> LidarScan:
    """Cast 720 rays over a 270 degree FOV by exact grid traversal (DDA).

    Each range is the distance to the first occupied cell boundary along the
    ray, capped at max_range; rays with no hit report max_range.
    """
    res = grid.resolution
    gx = pose.x - grid.origin[0]
    gy = pose.y - grid.origin[1]
    ix0 = int(math.floor(gx / res))
    iy0 = int(math.floor(gy / res))
    if not grid.in_bounds(ix0, iy0):
        raise ValueError(f"pose ({pose.x:.3f}, {pose.y:.3f}) outside grid")

    angles = pose.theta + (-math.radians(FOV_DEG) / 2.0
                           + np.arange(N_RAYS) * (math.radians(FOV_DEG) / N_RAYS))
    dx = np.cos(angles)
    dy = np.sin(angles)

    step_x = np.sign(dx).astype(np.int64)
    step_y = np.sign(dy).astype(np.int64)
    with np.errstate(divide="ignore"):
        t_delta_x = np.where(dx != 0, res / np.abs(dx), np.inf)
        t_delta_y = np.where(dy != 0, res / np.abs(dy), np.inf)
    # Distance along the ray to the first vertical / horizontal cell boundary.
    next_vx = np.where(step_x > 0, (ix0 + 1) * res - gx, gx - ix0 * res)
    next_hy = np.where(step_y > 0, (iy0 + 1) * res - gy, gy - iy0 * res)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_max_x = np.where(dx != 0, next_vx / np.abs(dx), np.inf)
        t_max_y = np.where(dy != 0, next_hy / np.abs(dy), np.inf)

    ix = np.full(N_RAYS, ix0, dtype=np.int64)
    iy = np.full(N_RAYS, iy0, dtype=np.int64)
    hit = np.full(N_RAYS, np.inf)
    active = np.ones(N_RAYS, dtype=bool)
    if grid.cells[iy0, ix0]:
        # Degenerate start inside an obstacle cell: everything is a contact.
        return LidarScan(np.full(N_RAYS, _MIN_RANGE), max_range=max_range)

    max_iters = grid.width + grid.height + 4
    for _ in range(max_iters):
        if not active.any():
            break
        t = np.minimum(t_max_x, t_max_y)
        take_x = active & (t_max_x <= t_max_y)
        take_y = active & ~take_x
        ix[take_x] += step_x[take_x]
        t_max_x[take_x] += t_delta_x[take_x]
        iy[take_y] += step_y[take_y]
        t_max_y[take_y] += t_delta_y[take_y]
        inb = (ix >= 0) & (ix < grid.width) & (iy >= 0) & (iy < grid.height)
        occ = np.zeros(N_RAYS, dtype=bool)
        occ[inb] = grid.cells[iy[inb], ix[inb]] == 1
        newly = active & (occ | ~inb)
        hit[newly] = t[newly]
        active &= ~newly
        active &= t < max_range

    ranges = np.clip(np.minimum(hit, max_range), _MIN_RANGE, max_range)
    return LidarScan(ranges, max_range=max_range)


@dataclass
class Footprint:
    """Rectangular footprint centered on the base link; length along heading."""
    length: float = 0.51
    width: float = 0.43

    def corners(self, pose: RobotState) -> np.ndarray:
        c, s = math.cos(pose.theta), math.sin(pose.theta)
        hl, hw = self.length / 2.0, self.width / 2.0
        local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([pose.x, pose.y])


def check_collision(grid: OccupancyGrid, pose: RobotState, footprint: Footprint) -> bool:
    """True iff the oriented footprint rectangle overlaps any occupied cell.

    Exact separating-axis test between the footprint and each candidate cell
    square; cells outside the grid count as occupied (closed world).
    """
    res = grid.resolution
    half_cell = res / 2.0
    corners = footprint.corners(pose)
    gx = (corners[:, 0] - grid.origin[0]) / res
    gy = (corners[:, 1] - grid.origin[1]) / res
    x0, x1 = int(math.floor(gx.min())), int(math.floor(gx.max()))
    y0, y1 = int(math.floor(gy.min())), int(math.floor(gy.max()))

    xs, ys = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
    xs, ys = xs.ravel(), ys.ravel()
    inb = (xs >= 0) & (xs < grid.width) & (ys >= 0) & (ys < grid.height)
    occ = ~inb  # out-of-grid counts occupied
    occ[inb] = grid.cells[ys[inb], xs[inb]] == 1
    if not occ.any():
        return False
    xs, ys = xs[occ], ys[occ]

    cx = grid.origin[0] + (xs + 0.5) * res
    cy = grid.origin[1] + (ys + 0.5) * res
    dx = cx - pose.x
    dy = cy - pose.y
    ux, uy = math.cos(pose.theta), math.sin(pose.theta)  # footprint long axis
    vx, vy = -uy, ux
    hl, hw = footprint.length / 2.0, footprint.width / 2.0

    # SAT over the 4 candidate axes (cell x/y, footprint u/v).
    sep = np.abs(dx) > half_cell + hl * abs(ux) + hw * abs(vx)
    sep |= np.abs(dy) > half_cell + hl * abs(uy) + hw * abs(vy)
    sep |= np.abs(dx * ux + dy * uy) > hl + half_cell * (abs(ux) + abs(uy))
    sep |= np.abs(dx * vx + dy * vy) > hw + half_cell * (abs(vx) + abs(vy))
    return bool((~sep).any())
