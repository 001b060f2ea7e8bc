import math

import numpy as np
import pytest

from navtune.dynamics import RobotState
from navtune.sensors import (DEFAULT_MAX_RANGE, N_RAYS, Footprint, LidarScan,
                             check_collision, raycast_lidar)

from conftest import empty_grid, make_grid


# -- lidar -----------------------------------------------------------------


def test_scan_angles_layout():
    scan = LidarScan(np.ones(N_RAYS))
    a = scan.angles()
    assert a[0] == pytest.approx(-math.radians(135.0))
    assert a[360] == pytest.approx(0.0, abs=1e-12)  # exact forward ray
    assert a[-1] == pytest.approx(math.radians(135.0) - scan.angle_increment)
    assert scan.angle_increment == pytest.approx(math.radians(270.0) / N_RAYS)


def test_scan_shape_validation():
    with pytest.raises(ValueError):
        LidarScan(np.ones(10))


def test_forward_ray_hits_wall_analytic():
    cells = np.zeros((20, 20), dtype=np.uint8)
    cells[:, 10] = 1  # vertical wall, near face at x = 1.5
    grid = make_grid(cells, resolution=0.15)
    pose = RobotState(0.5, 1.5, 0.0)
    scan = raycast_lidar(grid, pose)
    assert scan.ranges[360] == pytest.approx(1.0, abs=1e-9)
    # angled rays toward the same wall: range = 1.0 / cos(angle)
    for i in (300, 330, 390, 420):
        ang = scan.angles()[i]
        if abs(ang) < math.radians(50):
            expected = 1.0 / math.cos(ang)
            # only rays whose hit point stays on the wall span
            y_hit = 1.5 + expected * math.sin(ang)
            if 0.0 < y_hit < 3.0:
                assert scan.ranges[i] == pytest.approx(expected, abs=1e-9)


def test_open_grid_ranges_reach_boundary():
    grid = empty_grid(20, border=False)  # 3 m square, no walls
    pose = RobotState(1.5, 1.5, 0.0)
    scan = raycast_lidar(grid, pose)
    # forward ray exits at x = 3.0
    assert scan.ranges[360] == pytest.approx(1.5, abs=1e-9)
    assert (scan.ranges <= DEFAULT_MAX_RANGE).all()
    assert (scan.ranges > 0).all()


def test_max_range_caps_all_rays():
    cells = np.zeros((100, 100), dtype=np.uint8)
    grid = make_grid(cells, resolution=0.15)  # 15 m open square
    scan = raycast_lidar(grid, RobotState(7.5, 7.5, 0.3), max_range=2.0)
    np.testing.assert_allclose(scan.ranges, 2.0)


def march_range(grid, pose, angle, max_range, step=0.002):
    """Independent raycast by dense marching; overestimates by at most step."""
    res = grid.resolution
    t = step
    while t <= max_range:
        x = pose.x + t * math.cos(angle) - grid.origin[0]
        y = pose.y + t * math.sin(angle) - grid.origin[1]
        ix, iy = int(math.floor(x / res)), int(math.floor(y / res))
        if not grid.in_bounds(ix, iy) or grid.cells[iy, ix] == 1:
            return t
        t += step
    return max_range


def test_raycast_matches_marching_oracle(rng):
    step = 0.002
    for trial in range(5):
        cells = (rng.random((18, 18)) < 0.15).astype(np.uint8)
        grid = make_grid(cells, resolution=0.15)
        while True:
            pose = RobotState(rng.uniform(0.3, 2.4), rng.uniform(0.3, 2.4),
                              rng.uniform(-math.pi, math.pi))
            ix, iy = grid.world_to_cell(pose.x, pose.y)
            if grid.cells[iy, ix] == 0:
                break
        scan = raycast_lidar(grid, pose, max_range=4.0)
        angles = pose.theta + scan.angles()
        for i in range(0, N_RAYS, 17):
            oracle = march_range(grid, pose, angles[i], 4.0, step)
            assert oracle - step - 1e-9 <= scan.ranges[i] <= oracle + 1e-9, \
                f"trial {trial} ray {i}: dda {scan.ranges[i]} march {oracle}"


def test_raycast_inside_obstacle_returns_contact():
    cells = np.ones((9, 9), dtype=np.uint8)
    grid = make_grid(cells)
    scan = raycast_lidar(grid, RobotState(0.5, 0.5, 0.0))
    assert (scan.ranges == scan.ranges[0]).all()
    assert scan.ranges[0] < 1e-5


def test_raycast_pose_outside_grid_raises():
    with pytest.raises(ValueError):
        raycast_lidar(empty_grid(9), RobotState(-1.0, 0.5, 0.0))


# -- footprint collision ---------------------------------------------------


def clip_polygon(poly, edge_p, edge_n):
    """Keep the part of poly with dot(x - edge_p, edge_n) <= 0."""
    out = []
    for i in range(len(poly)):
        a, b = poly[i], poly[(i + 1) % len(poly)]
        da = np.dot(a - edge_p, edge_n)
        db = np.dot(b - edge_p, edge_n)
        if da <= 0:
            out.append(a)
        if (da < 0) != (db < 0) and da != db:
            out.append(a + (b - a) * (da / (da - db)))
    return out


def poly_area(poly):
    if len(poly) < 3:
        return 0.0
    p = np.array(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def rect_cell_overlap_area(corners, cx, cy, half):
    """Exact footprint/cell intersection area via Sutherland-Hodgman."""
    poly = [np.asarray(c, dtype=float) for c in corners]
    for p, n in [((cx - half, 0), (-1.0, 0.0)), ((cx + half, 0), (1.0, 0.0)),
                 ((0, cy - half), (0.0, -1.0)), ((0, cy + half), (0.0, 1.0))]:
        poly = clip_polygon(poly, np.array(p, dtype=float), np.array(n, dtype=float))
        if not poly:
            return 0.0
    return poly_area(poly)


def collision_oracle(grid, pose, footprint):
    """Independent check: positive overlap area with any occupied/out cell."""
    res = grid.resolution
    corners = footprint.corners(pose)
    x0 = int(math.floor(corners[:, 0].min() / res)) - 1
    x1 = int(math.floor(corners[:, 0].max() / res)) + 1
    y0 = int(math.floor(corners[:, 1].min() / res)) - 1
    y1 = int(math.floor(corners[:, 1].max() / res)) + 1
    for iy in range(y0, y1 + 1):
        for ix in range(x0, x1 + 1):
            occupied = (not grid.in_bounds(ix, iy)) or grid.cells[iy, ix] == 1
            if not occupied:
                continue
            area = rect_cell_overlap_area(corners, (ix + 0.5) * res,
                                          (iy + 0.5) * res, res / 2.0)
            if area > 1e-12:
                return True
    return False


def test_collision_matches_clipping_oracle(rng):
    fp = Footprint()
    checked_hits = 0
    for _ in range(150):
        cells = (rng.random((14, 14)) < 0.2).astype(np.uint8)
        grid = make_grid(cells, resolution=0.15)
        pose = RobotState(rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0),
                          rng.uniform(-math.pi, math.pi))
        got = check_collision(grid, pose, fp)
        want = collision_oracle(grid, pose, fp)
        assert got == want
        checked_hits += want
    assert 10 < checked_hits < 150  # fixture exercises both outcomes


def test_collision_hand_cases():
    cells = np.zeros((9, 9), dtype=np.uint8)
    cells[4, 6] = 1  # occupied cell centered at (0.975, 0.675)
    grid = make_grid(cells, resolution=0.15)
    fp = Footprint()
    # free space well away from the obstacle
    assert not check_collision(grid, RobotState(0.4, 0.4, 0.0), fp)
    # footprint centered on the obstacle
    assert check_collision(grid, RobotState(0.975, 0.675, 0.0), fp)
    # nose just reaches the cell: front face at x = 0.675 + hl = 0.93 > 0.9
    assert check_collision(grid, RobotState(0.675, 0.675, 0.0), fp)
    # rotated 90 degrees, the (shorter) half-width 0.215 stops short of 0.9
    assert not check_collision(grid, RobotState(0.675, 0.675, math.pi / 2), fp)


def test_collision_out_of_grid_counts_occupied():
    grid = empty_grid(9, border=False)
    fp = Footprint()
    assert check_collision(grid, RobotState(0.05, 0.7, 0.0), fp)
    assert not check_collision(grid, RobotState(0.7, 0.7, 0.0), fp)


def test_footprint_corners_geometry():
    fp = Footprint(length=0.51, width=0.43)
    c = fp.corners(RobotState(1.0, 2.0, 0.0))
    np.testing.assert_allclose(sorted(c[:, 0]), [0.745, 0.745, 1.255, 1.255])
    np.testing.assert_allclose(sorted(c[:, 1]), [1.785, 1.785, 2.215, 2.215])
    c90 = fp.corners(RobotState(0.0, 0.0, math.pi / 2))
    np.testing.assert_allclose(sorted(np.abs(c90[:, 0])), [0.215] * 4, atol=1e-12)
    np.testing.assert_allclose(sorted(np.abs(c90[:, 1])), [0.255] * 4, atol=1e-12)
