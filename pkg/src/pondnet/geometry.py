"""Rigid snapshot geometry shared by capture, masks, assembly and IoU.

Conventions: canvas pixel ``[row, col]`` has its center at ``(x=col, y=row)``.
A snapshot of ``width x height`` pixels has its pixel ``[r, c]`` at local
offset ``(u, v) = (c - (width-1)/2, r - (height-1)/2)`` from the snapshot
center, and a pose maps that offset to the canvas point
``(x, y) + R(theta) @ (u, v)``.

Forward sampling (capture) rounds half up; inverse sampling (assembly,
coverage) rounds half down.  With that pairing a ``theta == 0`` round trip is
exact even when ``x - (width-1)/2`` lands on a half pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Pose:
    """Snapshot center ``(x, y)`` in canvas pixels and rotation ``theta`` in radians."""

    x: float
    y: float
    theta: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


def poses_to_array(poses: Iterable[Pose]) -> np.ndarray:
    arr = np.array([p.as_tuple() for p in poses], dtype=np.float64)
    return arr.reshape(-1, 3)


def array_to_poses(arr: np.ndarray) -> list[Pose]:
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 3)
    return [Pose(float(x), float(y), float(t)) for x, y, t in arr]


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def placement_margin(width: int, height: int) -> int:
    """Smallest integer inset that keeps any rotation of the footprint on-canvas."""
    return math.ceil(math.hypot(width / 2.0, height / 2.0))


def _round_half_up(t: np.ndarray) -> np.ndarray:
    return np.floor(t + 0.5).astype(np.int64)


def _round_half_down(t: np.ndarray) -> np.ndarray:
    return np.ceil(t - 0.5).astype(np.int64)


def snapshot_offsets(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Local ``(u, v)`` offsets of every snapshot pixel, each shaped ``(height, width)``."""
    u = np.arange(width, dtype=np.float64) - (width - 1) / 2.0
    v = np.arange(height, dtype=np.float64) - (height - 1) / 2.0
    return np.meshgrid(u, v)


def snapshot_to_canvas(pose: Pose, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous canvas coordinates ``(x, y)`` of every snapshot pixel."""
    u, v = snapshot_offsets(width, height)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    return pose.x + c * u - s * v, pose.y + s * u + c * v


def snapshot_sample_indices(pose: Pose, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Nearest canvas ``(rows, cols)`` sampled by each snapshot pixel."""
    xs, ys = snapshot_to_canvas(pose, width, height)
    return _round_half_up(ys), _round_half_up(xs)


def canvas_to_snapshot(
    pose: Pose, xs: np.ndarray, ys: np.ndarray, width: int, height: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse map canvas pixel centers to snapshot pixel indices.

    Returns ``(rows, cols, inside)``; indices are only meaningful where
    ``inside`` is true.
    """
    dx = xs - pose.x
    dy = ys - pose.y
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    cols = _round_half_down(u + (width - 1) / 2.0)
    rows = _round_half_down(v + (height - 1) / 2.0)
    inside = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    return rows, cols, inside


def rectangle_corners(pose: Pose, width: float, height: float) -> np.ndarray:
    """Counter-clockwise (in x/y axes) corners of the rotated footprint, shape ``(4, 2)``."""
    hw, hh = width / 2.0, height / 2.0
    local = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
    return local @ rotation_matrix(pose.theta).T + np.array([pose.x, pose.y])


def footprint_window(
    pose: Pose, width: int, height: int, canvas_shape: tuple[int, int]
) -> tuple[slice, slice] | None:
    """Canvas ``(row_slice, col_slice)`` bounding the footprint, or None if off-canvas."""
    corners = rectangle_corners(pose, width, height)
    rows_max, cols_max = canvas_shape
    x0 = max(int(math.floor(corners[:, 0].min())) - 1, 0)
    x1 = min(int(math.ceil(corners[:, 0].max())) + 2, cols_max)
    y0 = max(int(math.floor(corners[:, 1].min())) - 1, 0)
    y1 = min(int(math.ceil(corners[:, 1].max())) + 2, rows_max)
    if x0 >= x1 or y0 >= y1:
        return None
    return slice(y0, y1), slice(x0, x1)


def footprint_pixels(
    pose: Pose, width: int, height: int, canvas_shape: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None:
    """Canvas pixels inside the footprint and the snapshot pixels they map to.

    Returns ``(canvas_rows, canvas_cols, snap_rows, snap_cols)`` as flat arrays.
    """
    window = footprint_window(pose, width, height, canvas_shape)
    if window is None:
        return None
    rs, cs = window
    ys = np.arange(rs.start, rs.stop, dtype=np.float64)[:, None]
    xs = np.arange(cs.start, cs.stop, dtype=np.float64)[None, :]
    snap_r, snap_c, inside = canvas_to_snapshot(pose, xs, ys, width, height)
    rr, cc = np.nonzero(inside)
    return rr + rs.start, cc + cs.start, snap_r[rr, cc], snap_c[rr, cc]


def footprint_inside(
    pose: Pose, width: int, height: int, canvas_shape: tuple[int, int]
) -> tuple[tuple[slice, slice], np.ndarray] | None:
    """Boolean footprint over its bounding window, without snapshot indices.

    Evaluates the same expressions as ``canvas_to_snapshot``: ``ceil(a) >= 0``
    is ``a > -1`` and ``ceil(a) < n`` is ``a <= n - 1``, so the decisions match
    bit for bit.
    """
    window = footprint_window(pose, width, height, canvas_shape)
    if window is None:
        return None
    rs, cs = window
    dy = np.arange(rs.start, rs.stop, dtype=np.float64)[:, None] - pose.y
    dx = np.arange(cs.start, cs.stop, dtype=np.float64)[None, :] - pose.x
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    a = (c * dx + s * dy + (width - 1) / 2.0) - 0.5
    b = (-s * dx + c * dy + (height - 1) / 2.0) - 0.5
    inside = (a > -1) & (a <= width - 1) & (b > -1) & (b <= height - 1)
    return window, inside


# -- convex polygon clipping -------------------------------------------------


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _orientation(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex polygon ``clip``."""
    if _orientation(clip) < 0:
        clip = clip[::-1]
    output: list[np.ndarray] = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a

        def side(p: np.ndarray) -> float:
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        inputs, output = output, []
        prev = inputs[-1]
        prev_side = side(prev)
        for cur in inputs:
            cur_side = side(cur)
            if cur_side >= 0:
                if prev_side < 0:
                    t = prev_side / (prev_side - cur_side)
                    output.append(prev + t * (cur - prev))
                output.append(cur)
            elif prev_side >= 0:
                t = prev_side / (prev_side - cur_side)
                output.append(prev + t * (cur - prev))
            prev, prev_side = cur, cur_side
    if len(output) < 3:
        return np.zeros((0, 2))
    return np.array(output)


def rectangle_iou(a: Pose, b: Pose, width: float, height: float) -> float:
    """Exact IoU of two rotated ``width x height`` rectangles."""
    pa = rectangle_corners(a, width, height)
    pb = rectangle_corners(b, width, height)
    inter = polygon_area(clip_convex(pa, pb))
    area = float(width) * float(height)
    union = 2.0 * area - inter
    return min(max(inter / union, 0.0), 1.0)


def rotate_poses_rigidly(poses: Sequence[Pose], angle: float, tx: float, ty: float) -> list[Pose]:
    """Apply one rigid motion of the canvas frame to every pose."""
    rot = rotation_matrix(angle)
    out = []
    for p in poses:
        x, y = rot @ np.array([p.x, p.y])
        out.append(Pose(float(x + tx), float(y + ty), p.theta + angle))
    return out
