"""Rigid reassembly of snapshots onto a canvas and reconstruction scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .capture import CoverageMask
from .errors import ContractError, MetricError
from .geometry import Pose, footprint_pixels

SENTINEL = 0.5


@dataclass
class Mosaic:
    image: np.ndarray
    coverage: CoverageMask
    poses_used: list[Pose] = field(default_factory=list)
    source: str = "true"


def assemble(
    snapshots: Sequence[np.ndarray] | np.ndarray,
    poses: Sequence[Pose],
    canvas_dims: tuple[int, int],
    source: str = "true",
    blend: str = "last",
) -> Mosaic:
    """Paint each snapshot at its pose through the inverse capture transform.

    ``blend="last"`` lets later snapshots overwrite earlier ones;
    ``blend="mean"`` averages all snapshots covering a pixel.
    """
    if len(snapshots) != len(poses):
        raise ContractError(f"got {len(snapshots)} snapshots but {len(poses)} poses")
    if blend not in ("last", "mean"):
        raise ValueError(f"unknown blend mode {blend!r}")
    width, height = canvas_dims
    image = np.full((height, width), SENTINEL, dtype=np.float32)
    covered = np.zeros((height, width), dtype=bool)
    if blend == "mean":
        acc = np.zeros((height, width), dtype=np.float64)
        cnt = np.zeros((height, width), dtype=np.int64)
    for snap, pose in zip(snapshots, poses):
        snap = np.asarray(snap)
        if snap.ndim != 2:
            raise ContractError(f"snapshot must be 2-D, got shape {snap.shape}")
        if not all(math.isfinite(v) for v in pose.as_tuple()):
            continue
        h, w = snap.shape
        hit = footprint_pixels(pose, w, h, (height, width))
        if hit is None:
            continue
        cr, cc, sr, sc = hit
        covered[cr, cc] = True
        if blend == "last":
            image[cr, cc] = snap[sr, sc]
        else:
            np.add.at(acc, (cr, cc), snap[sr, sc])
            np.add.at(cnt, (cr, cc), 1)
    if blend == "mean":
        nz = cnt > 0
        image[nz] = (acc[nz] / cnt[nz]).astype(np.float32)
    return Mosaic(image=image, coverage=CoverageMask(covered), poses_used=list(poses), source=source)


@dataclass(frozen=True)
class ReconstructionScore:
    covered_fraction: float
    exact_match_fraction: float
    psnr_on_covered: float


def reconstruction_score(mosaic: Mosaic, base_image: np.ndarray) -> ReconstructionScore:
    if mosaic.image.shape != base_image.shape:
        raise ContractError(f"mosaic shape {mosaic.image.shape} != base image shape {base_image.shape}")
    cov = mosaic.coverage.grid
    n = int(cov.sum())
    if n == 0:
        raise MetricError("PSNR undefined: mosaic covers no pixels")
    got = mosaic.image[cov].astype(np.float64)
    want = base_image[cov].astype(np.float64)
    exact = float(np.mean(got == want))
    mse = float(np.mean((got - want) ** 2))
    psnr = math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)
    return ReconstructionScore(covered_fraction=n / cov.size, exact_match_fraction=exact, psnr_on_covered=psnr)
