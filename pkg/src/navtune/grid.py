"""Occupancy grids: procedural cave generation, inflation, and global planning.

Grids are stored row-major as uint8 arrays of shape (height, width);
cell (ix, iy) covers the world square with lower corner
(origin + (ix, iy) * resolution). 1 = occupied, 0 = free.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

LETHAL = 1.0


class GenerationError(RuntimeError):
    """No connected environment could be generated for a seed."""

    def __init__(self, seed: int, attempts: int):
        super().__init__(f"no connected environment after {attempts} attempts (seed={seed})")
        self.seed = seed
        self.attempts = attempts


class UnreachableError(RuntimeError):
    """Global planner found no path between start and goal."""


@dataclass
class OccupancyGrid:
    width: int
    height: int
    resolution: float
    cells: np.ndarray  # (height, width) uint8
    origin: tuple[float, float] = (0.0, 0.0)
    start: tuple[float, float, float] | None = None  # x, y, theta
    goal: tuple[float, float] | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("grid dimensions must be >= 1")
        if self.resolution <= 0:
            raise ValueError("resolution must be > 0")
        self.cells = np.asarray(self.cells, dtype=np.uint8)
        if self.cells.shape != (self.height, self.width):
            raise ValueError(f"cells shape {self.cells.shape} != (height={self.height}, width={self.width})")
        if not np.all((self.cells == 0) | (self.cells == 1)):
            raise ValueError("cells must be 0 or 1")

    # -- coordinate helpers ------------------------------------------------

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        ix = int(math.floor((x - self.origin[0]) / self.resolution))
        iy = int(math.floor((y - self.origin[1]) / self.resolution))
        return ix, iy

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (self.origin[0] + (ix + 0.5) * self.resolution,
                self.origin[1] + (iy + 0.5) * self.resolution)

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height

    def occupied(self, ix: int, iy: int) -> bool:
        if not self.in_bounds(ix, iy):
            return True  # outside the closed world counts as occupied
        return bool(self.cells[iy, ix])

    # -- serialization -----------------------------------------------------

    def to_json_dict(self) -> dict:
        d = {
            "width": self.width,
            "height": self.height,
            "resolution": self.resolution,
            "origin": [self.origin[0], self.origin[1]],
            "cells": self.cells.tolist(),
        }
        if self.start is not None:
            d["start"] = list(self.start)
        if self.goal is not None:
            d["goal"] = list(self.goal)
        if self.seed is not None:
            d["seed"] = self.seed
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "OccupancyGrid":
        return cls(
            width=d["width"], height=d["height"], resolution=d["resolution"],
            cells=np.array(d["cells"], dtype=np.uint8),
            origin=tuple(d["origin"]),
            start=tuple(d["start"]) if "start" in d else None,
            goal=tuple(d["goal"]) if "goal" in d else None,
            seed=d.get("seed"),
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f)

    @classmethod
    def load(cls, path) -> "OccupancyGrid":
        with open(path) as f:
            return cls.from_json_dict(json.load(f))


@dataclass
class GenConfig:
    width: int = 30
    height: int = 30
    resolution: float = 0.15
    fill_prob: float = 0.45
    smooth_iters: int = 4
    birth_threshold: int = 5
    survive_threshold: int = 4
    retries: int = 40
    apron_cells: int = 2
    min_clearance: float = 0.36  # m; start-goal connectivity must hold at this clearance

    def __post_init__(self):
        if not 0.0 <= self.fill_prob <= 1.0:
            raise ValueError("fill_prob must be in [0, 1]")
        if self.smooth_iters < 0:
            raise ValueError("smooth_iters must be >= 0")


def _neighbor_counts(cells: np.ndarray) -> np.ndarray:
    """8-neighbor occupancy counts; out-of-grid neighbors count as occupied."""
    padded = np.pad(cells, 1, mode="constant", constant_values=1).astype(np.int32)
    counts = np.zeros_like(cells, dtype=np.int32)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            counts += padded[1 + dy:1 + dy + cells.shape[0], 1 + dx:1 + dx + cells.shape[1]]
    return counts


def ca_step(cells: np.ndarray, birth: int, survive: int) -> np.ndarray:
    """One synchronous cellular-automaton smoothing step (interior only)."""
    counts = _neighbor_counts(cells)
    new = np.where(cells == 1, (counts >= survive), (counts >= birth)).astype(np.uint8)
    new[0, :] = new[-1, :] = 1
    new[:, 0] = new[:, -1] = 1
    return new


def _start_goal_cells(cfg: GenConfig) -> tuple[tuple[int, int], tuple[int, int]]:
    # Opposite ends of the grid along y; x centered. Offset keeps the robot
    # footprint clear of the occupied border.
    off = cfg.apron_cells + 2
    return (cfg.width // 2, off), (cfg.width // 2, cfg.height - 1 - off)


def _clear_apron(cells: np.ndarray, cell: tuple[int, int], apron: int) -> None:
    ix, iy = cell
    h, w = cells.shape
    x0, x1 = max(1, ix - apron), min(w - 1, ix + apron + 1)
    y0, y1 = max(1, iy - apron), min(h - 1, iy + apron + 1)
    cells[y0:y1, x0:x1] = 0


def cells_connected(cells: np.ndarray, a: tuple[int, int], b: tuple[int, int],
                    resolution: float | None = None, clearance: float = 0.0) -> bool:
    """8-connected free-space flood fill between two cells.

    With clearance > 0, free space is first restricted to cells whose
    distance to the nearest obstacle exceeds `clearance` (meters), so the
    connectivity reflects what a robot of that radius can traverse.
    """
    free = cells == 0
    if clearance > 0.0:
        dist = ndimage.distance_transform_edt(free, sampling=resolution)
        free = dist > clearance
    if not free[a[1], a[0]] or not free[b[1], b[0]]:
        return False
    labels, _ = ndimage.label(free, structure=np.ones((3, 3), dtype=int))
    return labels[a[1], a[0]] == labels[b[1], b[0]]


def generate_barn_env(seed: int, gen: GenConfig | None = None) -> OccupancyGrid:
    """Generate one connected constrained environment via cellular automata.

    Deterministic for a given (seed, gen). Retries with perturbed sub-seeds
    up to gen.retries times; raises GenerationError if no attempt yields a
    start-goal-connected map.
    """
    gen = gen or GenConfig()
    start_cell, goal_cell = _start_goal_cells(gen)
    for attempt in range(gen.retries):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, attempt])))
        cells = (rng.random((gen.height, gen.width)) < gen.fill_prob).astype(np.uint8)
        cells[0, :] = cells[-1, :] = 1
        cells[:, 0] = cells[:, -1] = 1
        for _ in range(gen.smooth_iters):
            cells = ca_step(cells, gen.birth_threshold, gen.survive_threshold)
        _clear_apron(cells, start_cell, gen.apron_cells)
        _clear_apron(cells, goal_cell, gen.apron_cells)
        if cells_connected(cells, start_cell, goal_cell,
                           resolution=gen.resolution, clearance=gen.min_clearance):
            grid = OccupancyGrid(gen.width, gen.height, gen.resolution, cells, seed=seed)
            sx, sy = grid.cell_center(*start_cell)
            gx, gy = grid.cell_center(*goal_cell)
            grid.start = (sx, sy, math.pi / 2)  # facing the far end
            grid.goal = (gx, gy)
            return grid
    raise GenerationError(seed, gen.retries)


# -- costmap ---------------------------------------------------------------


@dataclass
class Costmap:
    grid: OccupancyGrid
    cost: np.ndarray  # (height, width) float64 in [0, 1]; 1.0 = lethal
    inflation_radius: float
    decay_scale: float

    def cost_at(self, x: float, y: float) -> float:
        ix, iy = self.grid.world_to_cell(x, y)
        if not self.grid.in_bounds(ix, iy):
            return LETHAL
        return float(self.cost[iy, ix])

    def cost_at_cells(self, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
        """Vectorized lookup; out-of-bounds cells are lethal."""
        ix = np.asarray(ix)
        iy = np.asarray(iy)
        inb = (ix >= 0) & (ix < self.grid.width) & (iy >= 0) & (iy < self.grid.height)
        out = np.full(ix.shape, LETHAL)
        out[inb] = self.cost[iy[inb], ix[inb]]
        return out

    def _edt(self):
        if not hasattr(self, "_edt_cache"):
            occ = self.grid.cells.astype(bool)
            if occ.any():
                dist, (ny, nx) = ndimage.distance_transform_edt(
                    ~occ, sampling=self.grid.resolution, return_indices=True)
            else:
                dist = np.full(self.grid.cells.shape, np.inf)
                ny = nx = np.zeros(self.grid.cells.shape, dtype=np.int64)
            self._edt_cache = (dist, ny, nx)
        return self._edt_cache

    def clearance_at(self, points: np.ndarray) -> np.ndarray:
        """Bilinear clearance (m) to the nearest occupied cell center.

        points: (..., 2) world coordinates. Outside the grid clearance is 0.
        """
        dist, _, _ = self._edt()
        res = self.grid.resolution
        p = np.asarray(points, dtype=np.float64)
        u = (p[..., 0] - self.grid.origin[0]) / res - 0.5
        v = (p[..., 1] - self.grid.origin[1]) / res - 0.5
        inside = ((p[..., 0] >= self.grid.origin[0]) &
                  (p[..., 1] >= self.grid.origin[1]) &
                  (p[..., 0] <= self.grid.origin[0] + self.grid.width * res) &
                  (p[..., 1] <= self.grid.origin[1] + self.grid.height * res))
        u = np.clip(u, 0.0, self.grid.width - 1.0)
        v = np.clip(v, 0.0, self.grid.height - 1.0)
        u0 = np.clip(np.floor(u).astype(np.int64), 0, self.grid.width - 2) \
            if self.grid.width > 1 else np.zeros_like(u, dtype=np.int64)
        v0 = np.clip(np.floor(v).astype(np.int64), 0, self.grid.height - 2) \
            if self.grid.height > 1 else np.zeros_like(v, dtype=np.int64)
        fu, fv = u - u0, v - v0
        u1 = np.minimum(u0 + 1, self.grid.width - 1)
        v1 = np.minimum(v0 + 1, self.grid.height - 1)
        d = (dist[v0, u0] * (1 - fu) * (1 - fv) + dist[v0, u1] * fu * (1 - fv)
             + dist[v1, u0] * (1 - fu) * fv + dist[v1, u1] * fu * fv)
        return np.where(inside, d, 0.0)

    def nearest_obstacle_angle(self, points: np.ndarray) -> np.ndarray:
        """World-frame angle from each point toward its nearest occupied cell."""
        _, ny, nx = self._edt()
        p = np.asarray(points, dtype=np.float64)
        ix = np.clip(((p[..., 0] - self.grid.origin[0]) / self.grid.resolution).astype(np.int64),
                     0, self.grid.width - 1)
        iy = np.clip(((p[..., 1] - self.grid.origin[1]) / self.grid.resolution).astype(np.int64),
                     0, self.grid.height - 1)
        ox = self.grid.origin[0] + (nx[iy, ix] + 0.5) * self.grid.resolution
        oy = self.grid.origin[1] + (ny[iy, ix] + 0.5) * self.grid.resolution
        return np.arctan2(oy - p[..., 1], ox - p[..., 0])


def inflate(grid: OccupancyGrid, radius: float, decay_scale: float = 0.3) -> Costmap:
    """Inflate occupied cells: lethal within `radius`, exponential decay beyond.

    Distances are Euclidean, measured between cell centers via a distance
    transform. decay_scale is the e-folding distance (m) of the tail cost.
    """
    if radius < 0:
        raise ValueError("inflation radius must be >= 0")
    occ = grid.cells.astype(bool)
    if not occ.any():
        cost = np.zeros_like(grid.cells, dtype=np.float64)
        return Costmap(grid, cost, radius, decay_scale)
    dist = ndimage.distance_transform_edt(~occ, sampling=grid.resolution)
    eps = 1e-9  # absorb float error in the EDT at the radius boundary
    cost = np.where(dist <= radius + eps, LETHAL,
                    (1.0 - eps) * np.exp(-(dist - radius) / max(decay_scale, 1e-9)))
    return Costmap(grid, cost, radius, decay_scale)


# -- global planning -------------------------------------------------------

_MOVES = [(1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
          (1, 1, math.sqrt(2)), (1, -1, math.sqrt(2)),
          (-1, 1, math.sqrt(2)), (-1, -1, math.sqrt(2))]


def _edge_weight(step: float, resolution: float, cost: float, penalty: float) -> float:
    return step * resolution * (1.0 + penalty * cost)


def astar_cells(costmap: Costmap, start: tuple[float, float],
                goal: tuple[float, float], cost_penalty: float = 10.0
                ) -> list[tuple[int, int]]:
    """8-connected A* over non-lethal cells; returns the optimal cell path.

    Edge weight: step_length * (1 + cost_penalty * cost(target cell)).
    Raises UnreachableError when no path exists.
    """
    g = costmap.grid
    s = g.world_to_cell(start[0], start[1])
    t = g.world_to_cell(goal[0], goal[1])
    for name, c in (("start", s), ("goal", t)):
        if not g.in_bounds(*c) or costmap.cost[c[1], c[0]] >= LETHAL:
            raise UnreachableError(f"{name} cell {c} is lethal or out of bounds")
    if s == t:
        return [s]

    res = g.resolution
    heuristic = lambda c: math.hypot(c[0] - t[0], c[1] - t[1]) * res
    best = {s: 0.0}
    parent = {}
    pq = [(heuristic(s), 0.0, s)]
    closed = set()
    while pq:
        f, dist, cur = heapq.heappop(pq)
        if cur in closed:
            continue
        closed.add(cur)
        if cur == t:
            break
        for dx, dy, step in _MOVES:
            nxt = (cur[0] + dx, cur[1] + dy)
            if not g.in_bounds(*nxt):
                continue
            c = costmap.cost[nxt[1], nxt[0]]
            if c >= LETHAL:
                continue
            nd = dist + _edge_weight(step, res, c, cost_penalty)
            if nd < best.get(nxt, math.inf):
                best[nxt] = nd
                parent[nxt] = cur
                heapq.heappush(pq, (nd + heuristic(nxt), nd, nxt))
    if t not in closed:
        raise UnreachableError(f"no path from {s} to {t}")

    cells = [t]
    while cells[-1] != s:
        cells.append(parent[cells[-1]])
    cells.reverse()
    return cells


def plan_global(costmap: Costmap, start: tuple[float, float], goal: tuple[float, float],
                cost_penalty: float = 10.0) -> np.ndarray:
    """A* cell path rendered as world waypoints, densified to <= resolution
    spacing. Returns an (N, 2) array from start to goal."""
    cells = astar_cells(costmap, start, goal, cost_penalty)
    if len(cells) == 1:
        return np.array([start, goal], dtype=np.float64)
    pts = np.array([costmap.grid.cell_center(*c) for c in cells], dtype=np.float64)
    return _densify(pts, costmap.grid.resolution)


def path_cost(costmap: Costmap, cells: list[tuple[int, int]], cost_penalty: float = 3.0) -> float:
    """Cost of an explicit cell path under the plan_global edge weights."""
    total = 0.0
    for a, b in zip(cells, cells[1:]):
        step = math.hypot(b[0] - a[0], b[1] - a[1])
        total += _edge_weight(step, costmap.grid.resolution, costmap.cost[b[1], b[0]], cost_penalty)
    return total


def astar_cost(costmap: Costmap, start: tuple[float, float], goal: tuple[float, float],
               cost_penalty: float = 3.0) -> float:
    """Optimal path cost (same weights as plan_global)."""
    return path_cost(costmap, astar_cells(costmap, start, goal, cost_penalty),
                     cost_penalty)


def _densify(pts: np.ndarray, max_spacing: float) -> np.ndarray:
    out = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        seg = np.linalg.norm(b - a)
        n = max(1, int(math.ceil(seg / max_spacing)))
        for k in range(1, n + 1):
            out.append(a + (b - a) * (k / n))
    return np.array(out, dtype=np.float64)


def path_length(pts: np.ndarray) -> float:
    if len(pts) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
