"""Seed-addressed SFP10-style dataset: manifest, lazy regeneration, materialized export."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .capture import (
    CaptureConfig,
    CoverageMask,
    extract_snapshots,
    perturb_poses,
    render_coverage_mask,
    sample_poses,
)
from .errors import ConfigError, PondnetError
from .geometry import Pose, poses_to_array
from .imageio import encode_gray_png, load_gray_png, load_mask_png, save_mask_png
from .scene import PondScene, SceneConfig, export_scene, generate_scene, scene_seed
from .seeding import derive_seed

FORMAT_VERSION = 1


@dataclass(frozen=True)
class SampleRecord:
    sample_id: int
    scene_id: int
    pose_seed: int
    noise_seed: int
    split: str

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "scene_id": self.scene_id,
            "pose_seed": self.pose_seed,
            "noise_seed": self.noise_seed,
            "split": self.split,
        }


@dataclass
class DatasetManifest:
    scene_config: SceneConfig
    capture_config: CaptureConfig
    master_seed: int
    n_scenes: int
    noise_instances_train_per_scene: int
    noise_instances_test_per_scene: int
    records: list[SampleRecord]
    holdout_scenes: bool = False
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "scene_config": self.scene_config.to_dict(),
            "capture_config": self.capture_config.to_dict(),
            "master_seed": self.master_seed,
            "n_scenes": self.n_scenes,
            "noise_instances_train_per_scene": self.noise_instances_train_per_scene,
            "noise_instances_test_per_scene": self.noise_instances_test_per_scene,
            "holdout_scenes": self.holdout_scenes,
            "records": [r.to_dict() for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        if data.get("format_version") != FORMAT_VERSION:
            raise ConfigError("format_version", f"unsupported manifest format {data.get('format_version')!r}")
        return cls(
            scene_config=SceneConfig.from_dict(data["scene_config"]),
            capture_config=CaptureConfig.from_dict(data["capture_config"]),
            master_seed=data["master_seed"],
            n_scenes=data["n_scenes"],
            noise_instances_train_per_scene=data["noise_instances_train_per_scene"],
            noise_instances_test_per_scene=data["noise_instances_test_per_scene"],
            holdout_scenes=data.get("holdout_scenes", False),
            records=[SampleRecord(**r) for r in data["records"]],
        )

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]

    def record(self, sample_id: int) -> SampleRecord:
        if 0 <= sample_id < len(self.records) and self.records[sample_id].sample_id == sample_id:
            return self.records[sample_id]
        for r in self.records:
            if r.sample_id == sample_id:
                return r
        raise KeyError(f"sample_id {sample_id} not in manifest")

    @property
    def canvas_dims(self) -> tuple[int, int]:
        return (self.scene_config.canvas_width_px, self.scene_config.canvas_height_px)

    @property
    def scene_ids(self) -> list[int]:
        return sorted({r.scene_id for r in self.records})


def build_manifest(
    scene_cfg: SceneConfig,
    capture_cfg: CaptureConfig,
    n_scenes: int,
    train_instances: int,
    test_instances: int,
    master_seed: int,
    holdout_scenes: bool = False,
) -> DatasetManifest:
    """Enumerate every sample as seeds only.

    All noise instances of a scene share one ``pose_seed`` (the captures do not
    change, only the drift). With ``holdout_scenes`` the test instances of scene
    slot ``s`` use the unseen scene ``n_scenes + s``.
    """
    for name, value in (("n_scenes", n_scenes), ("train_instances", train_instances), ("test_instances", test_instances)):
        if value < 1:
            raise ConfigError(name, f"must be >= 1, got {value}")
    records: list[SampleRecord] = []
    for s in range(n_scenes):
        for i in range(train_instances + test_instances):
            split = "train" if i < train_instances else "test"
            scene_id = n_scenes + s if (holdout_scenes and split == "test") else s
            records.append(
                SampleRecord(
                    sample_id=len(records),
                    scene_id=scene_id,
                    pose_seed=derive_seed(master_seed, "poses", scene_id),
                    noise_seed=derive_seed(master_seed, "noise", s, i),
                    split=split,
                )
            )
    keys = {(r.scene_id, r.pose_seed, r.noise_seed) for r in records}
    if len(keys) != len(records) or len({r.noise_seed for r in records}) != len(records):
        raise PondnetError("internal error: seed collision while building manifest")
    return DatasetManifest(
        scene_config=scene_cfg,
        capture_config=capture_cfg,
        master_seed=master_seed,
        n_scenes=n_scenes,
        noise_instances_train_per_scene=train_instances,
        noise_instances_test_per_scene=test_instances,
        records=records,
        holdout_scenes=holdout_scenes,
    )


@dataclass
class Sample:
    sample_id: int
    scene_id: int
    snapshots: np.ndarray  # (K, H, W) float32
    noisy_poses: list[Pose]
    mask: CoverageMask
    true_poses: list[Pose] | None = None
    split: str = "train"

    @property
    def K(self) -> int:
        return len(self.noisy_poses)

    def noisy_array(self) -> np.ndarray:
        return poses_to_array(self.noisy_poses)

    def true_array(self) -> np.ndarray:
        if self.true_poses is None:
            raise PondnetError("sample has no ground-truth poses (deployment mode)")
        return poses_to_array(self.true_poses)

    def equals(self, other: "Sample") -> bool:
        return (
            self.scene_id == other.scene_id
            and np.array_equal(self.snapshots, other.snapshots)
            and np.array_equal(self.noisy_array(), other.noisy_array())
            and self.mask == other.mask
            and (
                (self.true_poses is None and other.true_poses is None)
                or np.array_equal(self.true_array(), other.true_array())
            )
        )


class DatasetReader:
    """Regenerates samples from a manifest, caching per-scene work.

    Scenes and their snapshots are shared by every noise instance of a scene,
    so memory grows with the number of scenes, not samples.
    """

    def __init__(self, manifest: DatasetManifest, cache_scenes: int = 128):
        self.manifest = manifest
        self._scene = lru_cache(maxsize=cache_scenes)(self._make_scene)
        self._captures = lru_cache(maxsize=cache_scenes)(self._make_captures)

    def _make_scene(self, scene_id: int) -> PondScene:
        m = self.manifest
        return generate_scene(m.scene_config, scene_seed(m.master_seed, scene_id), scene_id=scene_id)

    def _make_captures(self, scene_id: int, pose_seed: int) -> tuple[list[Pose], np.ndarray]:
        m = self.manifest
        true_poses = sample_poses(m.capture_config, m.canvas_dims, pose_seed)
        snaps = extract_snapshots(self.scene(scene_id).image, true_poses, m.capture_config)
        snaps.setflags(write=False)
        return true_poses, snaps

    def scene(self, scene_id: int) -> PondScene:
        return self._scene(scene_id)

    def sample(self, sample_id: int, with_truth: bool = True) -> Sample:
        m = self.manifest
        rec = m.record(sample_id)
        cfg = m.capture_config
        true_poses, snaps = self._captures(rec.scene_id, rec.pose_seed)
        noisy = perturb_poses(true_poses, cfg.sigma_xy, cfg.sigma_theta, rec.noise_seed)
        mask_poses = noisy if cfg.mask_from == "noisy" else true_poses
        mask = render_coverage_mask(mask_poses, cfg, m.canvas_dims)
        return Sample(
            sample_id=rec.sample_id,
            scene_id=rec.scene_id,
            snapshots=snaps,
            noisy_poses=noisy,
            mask=mask,
            true_poses=list(true_poses) if with_truth else None,
            split=rec.split,
        )


def load_sample(
    manifest: DatasetManifest,
    sample_id: int,
    mode: str = "lazy",
    root: str | Path | None = None,
    reader: DatasetReader | None = None,
) -> Sample:
    """Fetch one sample, either regenerated from seeds or read from an export under ``root``."""
    rec = manifest.record(sample_id)
    if mode == "lazy":
        return (reader or DatasetReader(manifest)).sample(sample_id)
    if mode != "materialized":
        raise ValueError(f"mode must be 'lazy' or 'materialized', got {mode!r}")
    if root is None:
        raise ValueError("materialized mode needs the export root")
    return _read_materialized(manifest, rec, Path(root))


def _sample_paths(root: Path, sample_id: int, k: int) -> tuple[list[Path], Path, Path]:
    d = root / "samples" / str(sample_id)
    return [d / f"snap_{i}.png" for i in range(k)], d / "poses.csv", d / "mask.png"


def _read_materialized(manifest: DatasetManifest, rec: SampleRecord, root: Path) -> Sample:
    k = manifest.capture_config.snapshots_per_scene
    snap_paths, pose_path, mask_path = _sample_paths(root, rec.sample_id, k)
    missing = [str(p) for p in [*snap_paths, pose_path, mask_path] if not p.exists()]
    if missing:
        raise FileNotFoundError(f"materialized sample {rec.sample_id} is missing files: {', '.join(missing)}")
    snaps = np.stack([load_gray_png(p) for p in snap_paths])
    true_poses: list[Pose] = []
    noisy_poses: list[Pose] = []
    with open(pose_path, newline="") as fh:
        rows = sorted(csv.DictReader(fh), key=lambda r: int(r["snapshot_id"]))
    for r in rows:
        true_poses.append(Pose(float(r["x_true"]), float(r["y_true"]), float(r["theta_true"])))
        noisy_poses.append(Pose(float(r["x_noisy"]), float(r["y_noisy"]), float(r["theta_noisy"])))
    return Sample(
        sample_id=rec.sample_id,
        scene_id=rec.scene_id,
        snapshots=snaps,
        noisy_poses=noisy_poses,
        mask=CoverageMask(load_mask_png(mask_path)),
        true_poses=true_poses,
        split=rec.split,
    )


def write_sample(sample: Sample, root: str | Path, encoded_snapshots: Sequence[bytes] | None = None) -> None:
    """Write one sample; ``encoded_snapshots`` lets callers reuse PNG bytes shared across noise instances."""
    root = Path(root)
    snap_paths, pose_path, mask_path = _sample_paths(root, sample.sample_id, sample.K)
    pose_path.parent.mkdir(parents=True, exist_ok=True)
    if encoded_snapshots is None:
        encoded_snapshots = [encode_gray_png(snap) for snap in sample.snapshots]
    for p, data in zip(snap_paths, encoded_snapshots):
        p.write_bytes(data)
    with open(pose_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["snapshot_id", "x_true", "y_true", "theta_true", "x_noisy", "y_noisy", "theta_noisy"])
        for k, (t, n) in enumerate(zip(sample.true_poses or [], sample.noisy_poses)):
            w.writerow([k, repr(t.x), repr(t.y), repr(t.theta), repr(n.x), repr(n.y), repr(n.theta)])
    save_mask_png(mask_path, sample.mask.grid)


def materialize(manifest: DatasetManifest, root: str | Path, sample_ids: Iterable[int] | None = None) -> Path:
    """Export scenes and samples to the on-disk layout; returns ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest.save(root / "manifest.json")
    reader = DatasetReader(manifest)
    for scene_id in manifest.scene_ids:
        export_scene(reader.scene(scene_id), root / "scenes")
    ids = [r.sample_id for r in manifest.records] if sample_ids is None else list(sample_ids)
    # records are scene-major, so remembering the last capture's PNG bytes suffices
    last_key, encoded = None, []
    for sid in ids:
        rec = manifest.record(sid)
        sample = reader.sample(sid)
        if (rec.scene_id, rec.pose_seed) != last_key:
            last_key = (rec.scene_id, rec.pose_seed)
            encoded = [encode_gray_png(snap) for snap in sample.snapshots]
        write_sample(sample, root, encoded)
    return root


def tree_checksums(root: str | Path) -> dict[str, str]:
    """SHA-256 of every file under ``root``, keyed by relative path."""
    root = Path(root)
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def dataset_digest(manifest: DatasetManifest, sample_ids: Sequence[int] | None = None) -> str:
    """Hash of the regenerated content of the given samples (all by default)."""
    reader = DatasetReader(manifest)
    h = hashlib.sha256()
    ids = [r.sample_id for r in manifest.records] if sample_ids is None else sample_ids
    for sid in ids:
        s = reader.sample(sid)
        h.update(np.ascontiguousarray(s.snapshots).tobytes())
        h.update(s.noisy_array().tobytes())
        h.update(s.true_array().tobytes())
        h.update(np.packbits(s.mask.grid).tobytes())
    return h.hexdigest()
