"""Simulated robot captures: pose sampling, snapshot extraction, drift noise, coverage masks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, GeometryError
from .geometry import (
    Pose,
    footprint_inside,
    placement_margin,
    poses_to_array,
    array_to_poses,
    snapshot_sample_indices,
    snapshot_to_canvas,
)

THETA_LIMIT = 2.5


@dataclass(frozen=True)
class CaptureConfig:
    snapshot_width_px: int = 160
    snapshot_height_px: int = 110
    snapshots_per_scene: int = 221
    theta_max: float = 2.5
    sigma_xy: float = 9.5
    sigma_theta: float = 0.043
    # "noisy" is the only mask a deployed system can build; "true" is diagnostic
    mask_from: str = "noisy"
    interpolation: str = "nearest"

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for name in ("snapshot_width_px", "snapshot_height_px", "snapshots_per_scene"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(name, f"must be a positive integer, got {value!r}")
        if not 0.0 < self.theta_max <= THETA_LIMIT:
            raise ConfigError("theta_max", f"must lie in (0, {THETA_LIMIT}], got {self.theta_max}")
        if self.sigma_xy < 0:
            raise ConfigError("sigma_xy", f"must be >= 0, got {self.sigma_xy}")
        if self.sigma_theta < 0:
            raise ConfigError("sigma_theta", f"must be >= 0, got {self.sigma_theta}")
        if self.mask_from not in ("noisy", "true"):
            raise ConfigError("mask_from", f"must be 'noisy' or 'true', got {self.mask_from!r}")
        if self.interpolation not in ("nearest", "bilinear"):
            raise ConfigError("interpolation", f"must be 'nearest' or 'bilinear', got {self.interpolation!r}")

    @property
    def snapshot_shape(self) -> tuple[int, int]:
        return (self.snapshot_height_px, self.snapshot_width_px)

    @property
    def margin(self) -> int:
        return placement_margin(self.snapshot_width_px, self.snapshot_height_px)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CaptureConfig":
        return cls(**data)


@dataclass
class CoverageMask:
    """Binary canvas; True marks pixels covered by at least one snapshot footprint."""

    grid: np.ndarray

    @property
    def count(self) -> int:
        return int(self.grid.sum())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, CoverageMask) and np.array_equal(self.grid, other.grid)


def placement_region(capture_cfg: CaptureConfig, canvas_dims: tuple[int, int]) -> tuple[float, float, float, float]:
    """``(x_lo, x_hi, y_lo, y_hi)`` of valid snapshot centers for a ``(width, height)`` canvas."""
    width, height = canvas_dims
    m = capture_cfg.margin
    x_lo, x_hi = m, (width - 1) - m
    y_lo, y_hi = m, (height - 1) - m
    if x_lo > x_hi or y_lo > y_hi:
        raise GeometryError(
            f"canvas {width}x{height} too small for {capture_cfg.snapshot_width_px}x"
            f"{capture_cfg.snapshot_height_px} snapshots; need at least {2 * m + 1}x{2 * m + 1}"
        )
    return float(x_lo), float(x_hi), float(y_lo), float(y_hi)


def sample_poses(capture_cfg: CaptureConfig, canvas_dims: tuple[int, int], seed: int) -> list[Pose]:
    """Draw ``snapshots_per_scene`` i.i.d. uniform poses inside the placement region."""
    x_lo, x_hi, y_lo, y_hi = placement_region(capture_cfg, canvas_dims)
    rng = np.random.default_rng(seed)
    k = capture_cfg.snapshots_per_scene
    arr = np.empty((0, 3))
    while len(arr) < k:
        n = k - len(arr)
        draw = np.column_stack(
            [
                rng.uniform(x_lo, x_hi, n),
                rng.uniform(y_lo, y_hi, n),
                rng.uniform(0.0, capture_cfg.theta_max, n),
            ]
        )
        arr = np.concatenate([arr, draw])
        # keep first occurrence only; duplicates are astronomically rare
        _, first = np.unique(arr, axis=0, return_index=True)
        arr = arr[np.sort(first)]
    return array_to_poses(arr)


def check_pose_in_region(pose: Pose, capture_cfg: CaptureConfig, canvas_dims: tuple[int, int]) -> None:
    x_lo, x_hi, y_lo, y_hi = placement_region(capture_cfg, canvas_dims)
    if not (x_lo <= pose.x <= x_hi and y_lo <= pose.y <= y_hi):
        raise GeometryError(
            f"pose ({pose.x:.2f}, {pose.y:.2f}) outside placement region "
            f"[{x_lo}, {x_hi}] x [{y_lo}, {y_hi}]"
        )


def extract_snapshot(base_image: np.ndarray, pose: Pose, capture_cfg: CaptureConfig) -> np.ndarray:
    """Sample the rotated ``height x width`` view of ``base_image`` centered at ``pose``."""
    rows, cols = base_image.shape
    check_pose_in_region(pose, capture_cfg, (cols, rows))
    w, h = capture_cfg.snapshot_width_px, capture_cfg.snapshot_height_px
    if capture_cfg.interpolation == "nearest":
        r, c = snapshot_sample_indices(pose, w, h)
        return base_image[r, c]
    xs, ys = snapshot_to_canvas(pose, w, h)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, cols - 1)
    y1 = np.minimum(y0 + 1, rows - 1)
    img = base_image.astype(np.float64)
    out = (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x1] * fx * (1 - fy)
        + img[y1, x0] * (1 - fx) * fy
        + img[y1, x1] * fx * fy
    )
    return out.astype(base_image.dtype)


def extract_snapshots(base_image: np.ndarray, poses: Sequence[Pose], capture_cfg: CaptureConfig) -> np.ndarray:
    """Stack of snapshots shaped ``(K, height, width)``."""
    h, w = capture_cfg.snapshot_shape
    out = np.empty((len(poses), h, w), dtype=base_image.dtype)
    for k, pose in enumerate(poses):
        out[k] = extract_snapshot(base_image, pose, capture_cfg)
    return out


def perturb_poses(poses: Sequence[Pose], sigma_xy: float, sigma_theta: float, seed: int) -> list[Pose]:
    """Add independent zero-mean Gaussian drift to every coordinate; no clamping."""
    if sigma_xy < 0 or sigma_theta < 0:
        raise ValueError(f"noise scales must be non-negative, got sigma_xy={sigma_xy}, sigma_theta={sigma_theta}")
    arr = poses_to_array(poses)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(arr.shape) * np.array([sigma_xy, sigma_xy, sigma_theta])
    return array_to_poses(arr + noise)


def render_coverage_mask(
    poses: Sequence[Pose], capture_cfg: CaptureConfig, canvas_dims: tuple[int, int]
) -> CoverageMask:
    """Union of rotated snapshot footprints on a ``(width, height)`` canvas, clipped to it."""
    width, height = canvas_dims
    grid = np.zeros((height, width), dtype=bool)
    w, h = capture_cfg.snapshot_width_px, capture_cfg.snapshot_height_px
    for pose in poses:
        if not all(math.isfinite(v) for v in pose.as_tuple()):
            continue
        hit = footprint_inside(pose, w, h, (height, width))
        if hit is not None:
            (rs, cs), inside = hit
            grid[rs, cs] |= inside
    return CoverageMask(grid)
