"""Pick the drift magnitude that yields a target mean per-snapshot IoU."""

from __future__ import annotations

import numpy as np

from .capture import CaptureConfig, sample_poses
from .errors import CalibrationError
from .geometry import poses_to_array
from .metrics import mean_pose_iou

DEFAULT_THETA_PER_PX = 1.0 / 220.0


def _reference_poses(capture_cfg: CaptureConfig, canvas_dims: tuple[int, int], n_poses: int, seed: int):
    cfg = CaptureConfig(**{**capture_cfg.to_dict(), "snapshots_per_scene": n_poses})
    true = poses_to_array(sample_poses(cfg, canvas_dims, seed))
    z = np.random.default_rng([seed, 1]).standard_normal(true.shape)
    return true, z


def _iou_at(true: np.ndarray, z: np.ndarray, sigma_xy: float, sigma_theta: float, dims: tuple[int, int]) -> float:
    noisy = true + z * np.array([sigma_xy, sigma_xy, sigma_theta])
    return mean_pose_iou(noisy, true, dims)


def measure_noise_iou(
    capture_cfg: CaptureConfig,
    sigma_xy: float,
    sigma_theta: float,
    canvas_dims: tuple[int, int] = (750, 520),
    n_poses: int = 2000,
    seed: int = 0,
) -> float:
    """Monte-Carlo mean IoU between true poses and their noisy copies."""
    true, z = _reference_poses(capture_cfg, canvas_dims, n_poses, seed)
    dims = (capture_cfg.snapshot_width_px, capture_cfg.snapshot_height_px)
    return _iou_at(true, z, sigma_xy, sigma_theta, dims)


def calibrate_noise(
    capture_cfg: CaptureConfig,
    target_iou: float = 0.80,
    tolerance: float = 0.02,
    canvas_dims: tuple[int, int] = (750, 520),
    n_poses: int = 2000,
    seed: int = 0,
    theta_per_px: float = DEFAULT_THETA_PER_PX,
    max_iter: int = 60,
) -> tuple[float, float]:
    """Bisection on ``sigma_xy`` with ``sigma_theta = theta_per_px * sigma_xy``.

    The same noise draws are reused at every trial scale, so the measured IoU
    is a deterministic, monotone function of the scale.
    """
    if not 0.0 < target_iou < 1.0:
        raise CalibrationError(f"target IoU {target_iou} is unreachable; it must lie strictly between 0 and 1")
    if n_poses < 1:
        raise CalibrationError("need at least one pose")
    true, z = _reference_poses(capture_cfg, canvas_dims, n_poses, seed)
    dims = (capture_cfg.snapshot_width_px, capture_cfg.snapshot_height_px)

    def f(scale: float) -> float:
        return _iou_at(true, z, scale, theta_per_px * scale, dims)

    lo, hi = 0.0, 1.0
    it = 0
    while f(hi) > target_iou:
        lo, hi = hi, hi * 2
        it += 1
        if it >= max_iter:
            raise CalibrationError(f"IoU never fell to {target_iou} within {max_iter} doublings")
    best = None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        val = f(mid)
        if best is None or abs(val - target_iou) < abs(best[1] - target_iou):
            best = (mid, val)
        if val > target_iou:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-4 * hi:
            break
    scale, val = best
    if abs(val - target_iou) > tolerance:
        raise CalibrationError(f"best scale {scale:.4f} gives IoU {val:.4f}, outside {target_iou} +/- {tolerance}")
    return scale, theta_per_px * scale
