"""Regression metrics per pose component and per-snapshot rectangle IoU.

All regression metrics are pooled over every snapshot of every sample and are
computed in normalized units: ``x / canvas_width``, ``y / canvas_height``,
theta in radians.  Angles are never wrapped; true rotations stay below
``THETA_LIMIT`` radians, so the plain difference is the rotation error.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .capture import THETA_LIMIT
from .errors import ContractError, MetricError
from .geometry import Pose, poses_to_array, rectangle_corners, rectangle_iou

COMPONENTS = ("x", "y", "theta")


def normalize_poses(poses: np.ndarray, canvas_dims: tuple[int, int]) -> np.ndarray:
    """Pixel poses ``(..., 3)`` to model units."""
    width, height = canvas_dims
    return np.asarray(poses, dtype=np.float64) / np.array([width, height, 1.0])


def denormalize_poses(poses: np.ndarray, canvas_dims: tuple[int, int]) -> np.ndarray:
    width, height = canvas_dims
    return np.asarray(poses, dtype=np.float64) * np.array([width, height, 1.0])


@dataclass
class MetricsReport:
    mse: tuple[float, float, float]
    mae: tuple[float, float, float]
    r2: tuple[float, float, float]
    mean_iou: float
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(
            mse=tuple(data["mse"]),
            mae=tuple(data["mae"]),
            r2=tuple(data["r2"]),
            mean_iou=float(data["mean_iou"]),
            n_samples=int(data["n_samples"]),
        )


def _check_theta(true: np.ndarray) -> None:
    theta = true[..., 2]
    if np.any(theta < 0) or np.any(theta >= THETA_LIMIT):
        warnings.warn(
            f"true rotations outside [0, {THETA_LIMIT}) rad; unwrapped angle errors may be misleading",
            RuntimeWarning,
            stacklevel=3,
        )


def regression_metrics(
    predicted: np.ndarray, true: np.ndarray
) -> tuple[tuple[float, float, float], tuple[float, float, float], tuple[float, float, float]]:
    """Per-component ``(mse, mae, r2)`` pooled over all leading axes."""
    predicted = np.asarray(predicted, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if predicted.shape != true.shape or predicted.shape[-1] != 3:
        raise ContractError(f"predicted {predicted.shape} and true {true.shape} must match and end in 3")
    p = predicted.reshape(-1, 3)
    t = true.reshape(-1, 3)
    if len(t) < 2:
        raise ContractError("need at least two snapshots to compute R^2")
    _check_theta(t)
    err = p - t
    mse = np.mean(err**2, axis=0)
    mae = np.mean(np.abs(err), axis=0)
    ss_res = np.sum(err**2, axis=0)
    ss_tot = np.sum((t - t.mean(axis=0)) ** 2, axis=0)
    r2 = []
    for c, (res, tot) in enumerate(zip(ss_res, ss_tot)):
        if tot == 0:
            raise MetricError(f"R^2 undefined for component {COMPONENTS[c]}: true values have zero variance")
        r2.append(1.0 - res / tot)
    return tuple(map(float, mse)), tuple(map(float, mae)), tuple(r2)


def pose_iou(pose_a: Pose, pose_b: Pose, snapshot_dims: tuple[int, int]) -> float:
    """Exact IoU of two rotated snapshot footprints; ``snapshot_dims`` is ``(width, height)``."""
    width, height = snapshot_dims
    if width <= 0 or height <= 0:
        raise ContractError(f"snapshot dims must be positive, got {snapshot_dims}")
    return rectangle_iou(pose_a, pose_b, width, height)


def raster_pose_iou(pose_a: Pose, pose_b: Pose, snapshot_dims: tuple[int, int], supersample: int = 4) -> float:
    """IoU estimated by point-in-rectangle tests on a ``supersample``-times finer grid."""
    width, height = snapshot_dims
    corners = np.vstack([rectangle_corners(pose_a, width, height), rectangle_corners(pose_b, width, height)])
    lo = np.floor(corners.min(axis=0)) - 1
    hi = np.ceil(corners.max(axis=0)) + 1
    step = 1.0 / supersample
    xs = np.arange(lo[0] + step / 2, hi[0], step)
    ys = np.arange(lo[1] + step / 2, hi[1], step)
    gx, gy = np.meshgrid(xs, ys)

    def inside(p: Pose) -> np.ndarray:
        c, s = np.cos(p.theta), np.sin(p.theta)
        dx, dy = gx - p.x, gy - p.y
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (np.abs(u) <= width / 2) & (np.abs(v) <= height / 2)

    a, b = inside(pose_a), inside(pose_b)
    union = np.count_nonzero(a | b)
    return float(np.count_nonzero(a & b) / union) if union else 0.0


def _as_pose_array(poses: np.ndarray | Sequence) -> np.ndarray:
    if isinstance(poses, np.ndarray):
        return poses.reshape(-1, 3)
    flat: list[Pose] = []
    for item in poses:
        if isinstance(item, Pose):
            flat.append(item)
        else:
            flat.extend(item)
    return poses_to_array(flat)


def mean_pose_iou(predicted, true, snapshot_dims: tuple[int, int]) -> float:
    """Mean per-snapshot IoU; inputs are pixel-unit pose arrays ``(..., 3)`` or nested Pose lists."""
    p = _as_pose_array(predicted)
    t = _as_pose_array(true)
    if p.shape != t.shape:
        raise ContractError(f"predicted {p.shape} and true {t.shape} differ")
    if len(p) == 0:
        return 1.0
    width, height = snapshot_dims
    total = 0.0
    for a, b in zip(p, t):
        total += rectangle_iou(Pose(*a), Pose(*b), width, height)
    return total / len(p)


def evaluate_poses(
    predicted_px: np.ndarray,
    true_px: np.ndarray,
    canvas_dims: tuple[int, int],
    snapshot_dims: tuple[int, int],
) -> MetricsReport:
    """Table-I row for pixel-unit pose arrays shaped ``(N, K, 3)``."""
    predicted_px = np.asarray(predicted_px, dtype=np.float64)
    true_px = np.asarray(true_px, dtype=np.float64)
    mse, mae, r2 = regression_metrics(
        normalize_poses(predicted_px, canvas_dims), normalize_poses(true_px, canvas_dims)
    )
    n = predicted_px.shape[0] if predicted_px.ndim == 3 else 1
    return MetricsReport(mse=mse, mae=mae, r2=r2, mean_iou=mean_pose_iou(predicted_px, true_px, snapshot_dims), n_samples=n)


# -- Table I formatting -------------------------------------------------------

VARIANT_COMPONENTS = {
    "net_a": (True, False, False, False),
    "net_b": (True, True, False, False),
    "net_c": (True, True, False, True),
    "ours": (True, True, True, False),
}
VARIANT_LABELS = {"net_a": "(a)", "net_b": "(b)", "net_c": "(c)", "ours": "Ours"}

TABLE_COLUMNS = [
    "net",
    "coor",
    "snapshots",
    "mask",
    "noisy_stitched_image",
    "mse_x",
    "mse_y",
    "mse_theta",
    "mae_x",
    "mae_y",
    "mae_theta",
    "r2_x",
    "r2_y",
    "r2_theta",
    "iou",
]


def _triple(values: Sequence[float]) -> str:
    return " / ".join(f"{v:.4f}" for v in values)


def format_report_row(label: str, report: MetricsReport) -> str:
    return (
        f"{label:<6} | MSE {_triple(report.mse)} | MAE {_triple(report.mae)} "
        f"| R2 {_triple(report.r2)} | IoU {100 * report.mean_iou:.2f}%"
    )


def table1_text(rows: Sequence[tuple[str, MetricsReport]]) -> str:
    header = "Net    | Coor Snap Mask Noisy | MSE (x / y / theta) | MAE (x / y / theta) | R2 (x / y / theta) | IoU"
    lines = [header, "-" * len(header)]
    for variant, rep in rows:
        marks = " ".join(f"{'x' if on else '.':^4}" for on in VARIANT_COMPONENTS.get(variant, (False,) * 4))
        lines.append(
            f"{VARIANT_LABELS.get(variant, variant):<6} | {marks} | {_triple(rep.mse)} | {_triple(rep.mae)} "
            f"| {_triple(rep.r2)} | {100 * rep.mean_iou:.2f}%"
        )
    return "\n".join(lines) + "\n"


def table1_csv(rows: Sequence[tuple[str, MetricsReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for variant, rep in rows:
        comps = [int(c) for c in VARIANT_COMPONENTS.get(variant, (0, 0, 0, 0))]
        w.writerow([variant, *comps, *(f"{v:.6g}" for v in (*rep.mse, *rep.mae, *rep.r2)), f"{rep.mean_iou:.6g}"])
    return buf.getvalue()
