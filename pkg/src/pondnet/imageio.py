"""PNG and CSV helpers for exported artifacts."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .geometry import Pose


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def encode_gray_png(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image), mode="L").save(buf, format="PNG", compress_level=1)
    return buf.getvalue()


def save_gray_png(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_gray_png(image))


def load_gray_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return (arr / 255.0).astype(np.float32)


def save_mask_png(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool)).save(path, compress_level=1)


def load_mask_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("1"), dtype=bool)


def write_pose_csv(path: str | Path, poses: Sequence[Pose]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["snapshot_id", "x", "y", "theta"])
        for k, p in enumerate(poses):
            writer.writerow([k, repr(p.x), repr(p.y), repr(p.theta)])


def read_pose_csv(path: str | Path) -> list[Pose]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: int(r["snapshot_id"]))
    return [Pose(float(r["x"]), float(r["y"]), float(r["theta"])) for r in rows]
