"""Policy observations: the rendered top-down image, its history window,
and the flat 721-dim vector observation.

Image frame: robot-centric, heading-up. The robot sits at the pixel center;
its forward axis points toward decreasing row, its left toward decreasing
column. Scale is meters_per_pixel (0.015 m/px by default: a 9.0 x 6.0 m
window at 600 x 400).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import RobotState, normalize_angle
from .sensors import Footprint, LidarScan

IMG_W = 600
IMG_H = 400
METERS_PER_PIXEL = 0.015

GRAY = (128, 128, 128)
RED = (255, 0, 0)
BLUE = (0, 0, 255)
FOOTPRINT_COLOR = (0, 200, 0)

SCAN_SPLAT_RADIUS = 2  # px

# Policy-facing resolution; 600x400 is center-cropped to 576x384 first so
# area pooling divides evenly (factor 6).
POLICY_IMG_W = 96
POLICY_IMG_H = 64
CROP_W = 576
CROP_H = 384


@dataclass
class CustomImage:
    pixels: np.ndarray  # (H, W, 3) uint8
    meters_per_pixel: float = METERS_PER_PIXEL

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (IMG_H, IMG_W, 3):
            raise ValueError(f"expected ({IMG_H}, {IMG_W}, 3) pixels, got {self.pixels.shape}")


def world_to_pixel(dx: float, dy: float, pose: RobotState,
                   meters_per_pixel: float = METERS_PER_PIXEL) -> tuple[int, int]:
    """Map a world point (given as offset from the robot) to (col, row).

    Rounding rule: nearest integer, ties away from zero (Python round is not
    used; we pin int(floor(x + 0.5)) on the non-negative pixel offsets).
    """
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    fwd = c * dx + s * dy          # along heading
    left = -s * dx + c * dy        # robot left
    col = IMG_W / 2 - left / meters_per_pixel
    row = IMG_H / 2 - fwd / meters_per_pixel
    return int(math.floor(col + 0.5)), int(math.floor(row + 0.5))


def _splat_disc(pixels: np.ndarray, col: int, row: int, radius: int, color) -> None:
    for r in range(max(0, row - radius), min(IMG_H, row + radius + 1)):
        for c in range(max(0, col - radius), min(IMG_W, col + radius + 1)):
            if (r - row) ** 2 + (c - col) ** 2 <= radius ** 2:
                pixels[r, c] = color


def _draw_segment(pixels: np.ndarray, p0: tuple[int, int], p1: tuple[int, int], color) -> None:
    n = max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1]), 1)
    cols = np.rint(np.linspace(p0[0], p1[0], n + 1)).astype(int)
    rows = np.rint(np.linspace(p0[1], p1[1], n + 1)).astype(int)
    ok = (cols >= 0) & (cols < IMG_W) & (rows >= 0) & (rows < IMG_H)
    pixels[rows[ok], cols[ok]] = color


def render_custom_image(scan: LidarScan, path: np.ndarray, pose: RobotState,
                        footprint: Footprint | None = None,
                        meters_per_pixel: float = METERS_PER_PIXEL) -> CustomImage:
    """Render the robot-centric observation image.

    Draw order (lowest first): gray background, red scan splats, blue global
    path, footprint marker, so footprint > path > scan > background.
    """
    footprint = footprint or Footprint()
    pixels = np.empty((IMG_H, IMG_W, 3), dtype=np.uint8)
    pixels[:] = GRAY

    # Scan endpoints; returns at max_range carry no obstacle and are skipped.
    angles = pose.theta + scan.angles()
    hits = scan.ranges < scan.max_range - 1e-9
    ex = scan.ranges[hits] * np.cos(angles[hits])
    ey = scan.ranges[hits] * np.sin(angles[hits])
    for dx, dy in zip(ex, ey):
        col, row = world_to_pixel(dx, dy, pose, meters_per_pixel)
        if -SCAN_SPLAT_RADIUS <= col < IMG_W + SCAN_SPLAT_RADIUS and \
                -SCAN_SPLAT_RADIUS <= row < IMG_H + SCAN_SPLAT_RADIUS:
            _splat_disc(pixels, col, row, SCAN_SPLAT_RADIUS, RED)

    if len(path) > 0:
        pts = [world_to_pixel(px - pose.x, py - pose.y, pose, meters_per_pixel)
               for px, py in path]
        for p0, p1 in zip(pts[:-1], pts[1:]):
            _draw_segment(pixels, p0, p1, BLUE)

    # Footprint: axis-aligned in the heading-up frame.
    hl_px = footprint.length / 2.0 / meters_per_pixel
    hw_px = footprint.width / 2.0 / meters_per_pixel
    r0 = max(0, int(math.floor(IMG_H / 2 - hl_px)))
    r1 = min(IMG_H, int(math.ceil(IMG_H / 2 + hl_px)))
    c0 = max(0, int(math.floor(IMG_W / 2 - hw_px)))
    c1 = min(IMG_W, int(math.ceil(IMG_W / 2 + hw_px)))
    pixels[r0:r1, c0:c1] = FOOTPRINT_COLOR

    return CustomImage(pixels, meters_per_pixel)


def downsample(img: CustomImage | np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Area-mean pooling to (w, h); returns (h, w, 3) float64 in [0, 1].

    Target must divide the source dimensions in both axes.
    """
    pixels = img.pixels if isinstance(img, CustomImage) else np.asarray(img)
    h, w = pixels.shape[:2]
    tw, th = target
    if w % tw != 0 or h % th != 0:
        raise ValueError(f"target {target} does not divide source ({w}, {h})")
    fx, fy = w // tw, h // th
    out = pixels.reshape(th, fy, tw, fx, 3).astype(np.float64).mean(axis=(1, 3))
    return out / 255.0


def center_crop(img: CustomImage, size: tuple[int, int] = (CROP_W, CROP_H)) -> np.ndarray:
    cw, ch = size
    r0 = (IMG_H - ch) // 2
    c0 = (IMG_W - cw) // 2
    return img.pixels[r0:r0 + ch, c0:c0 + cw]


def policy_image(img: CustomImage) -> np.ndarray:
    """Standard policy-facing tensor: crop to 576x384, pool to 96x64."""
    return downsample(center_crop(img), (POLICY_IMG_W, POLICY_IMG_H))


def vector_obs(scan: LidarScan, pose: RobotState, goal: tuple[float, float]) -> np.ndarray:
    """720 normalized ranges followed by the goal bearing in the robot frame."""
    bearing = normalize_angle(math.atan2(goal[1] - pose.y, goal[0] - pose.x) - pose.theta)
    return np.concatenate([scan.ranges / scan.max_range, [bearing]])


@dataclass
class HistoryWindow:
    """FIFO of the last K observation images, padded by repeating the oldest."""
    capacity: int = 4
    frames: list = field(default_factory=list)
    timestamps: list = field(default_factory=list)

    def push(self, img: CustomImage, t: float) -> None:
        self.frames.append(img)
        self.timestamps.append(t)
        if len(self.frames) > self.capacity:
            self.frames.pop(0)
            self.timestamps.pop(0)

    def read(self) -> list[CustomImage]:
        """Exactly `capacity` frames, oldest first; empty window is an error."""
        if not self.frames:
            raise ValueError("cannot read an empty history window")
        pad = [self.frames[0]] * (self.capacity - len(self.frames))
        return pad + list(self.frames)

    def copy(self) -> "HistoryWindow":
        return HistoryWindow(self.capacity, list(self.frames), list(self.timestamps))


@dataclass
class MetaObs:
    """Everything a parameter policy sees at one meta step."""
    image: CustomImage | None
    history: HistoryWindow | None
    v: float
    omega: float
    prev_phi: np.ndarray          # normalized, schema midpoints at step 0
    vector: np.ndarray            # 721-dim

    def __post_init__(self):
        self.prev_phi = np.asarray(self.prev_phi, dtype=np.float64)
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.shape != (721,):
            raise ValueError("vector observation must have length 721")
