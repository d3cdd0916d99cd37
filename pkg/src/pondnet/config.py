"""Run configuration: one JSON document that fixes every knob of a run."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .capture import CaptureConfig
from .dataset import DatasetManifest, build_manifest
from .errors import ConfigError
from .model import ArchConfig
from .scene import SceneConfig
from .train import TrainConfig

# arch fields that are dictated by the data and filled in automatically
DERIVED_ARCH_FIELDS = ("K", "snapshot_height", "snapshot_width", "canvas_width", "canvas_height")


@dataclass(frozen=True)
class DatasetSize:
    n_scenes: int = 10
    train_instances: int = 100
    test_instances: int = 10
    holdout_scenes: bool = False

    def __post_init__(self) -> None:
        for name in ("n_scenes", "train_instances", "test_instances"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(name, f"must be a positive integer, got {v!r}")
        if not isinstance(self.holdout_scenes, bool):
            raise ConfigError("holdout_scenes", "must be true or false")


def _arch_overrides(arch: ArchConfig) -> dict:
    d = arch.to_dict()
    for k in DERIVED_ARCH_FIELDS:
        d.pop(k)
    return d


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    capture: CaptureConfig = field(default_factory=CaptureConfig)
    dataset: DatasetSize = field(default_factory=DatasetSize)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    master_seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.master_seed, bool) or not isinstance(self.master_seed, int) or self.master_seed < 0:
            raise ConfigError("master_seed", f"must be a non-negative integer, got {self.master_seed!r}")
        want = {
            "K": self.capture.snapshots_per_scene,
            "snapshot_height": self.capture.snapshot_height_px,
            "snapshot_width": self.capture.snapshot_width_px,
            "canvas_width": self.scene.canvas_width_px,
            "canvas_height": self.scene.canvas_height_px,
        }
        for k, v in want.items():
            if getattr(self.arch, k) != v:
                raise ConfigError(f"arch.{k}", f"is {getattr(self.arch, k)} but the data implies {v}")

    # -- construction ----------------------------------------------------------

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        """Validate ``data`` completely; unknown keys and bad values name the offending field."""
        if not isinstance(data, Mapping):
            raise ConfigError("<root>", "configuration must be a JSON object")
        sections = {"scene": SceneConfig, "capture": CaptureConfig, "dataset": DatasetSize, "train": TrainConfig}
        allowed = set(sections) | {"arch", "master_seed"}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ConfigError(unknown[0], f"unknown key (allowed: {', '.join(sorted(allowed))})")
        built: dict[str, Any] = {}
        for name, klass in sections.items():
            built[name] = _build_section(name, klass, data.get(name, {}))
        arch_data = dict(data.get("arch", {}))
        if not isinstance(data.get("arch", {}), Mapping):
            raise ConfigError("arch", "must be an object")
        for k in DERIVED_ARCH_FIELDS:
            if k in arch_data:
                raise ConfigError(f"arch.{k}", "is derived from the scene and capture sections; remove it")
        cap, scene = built["capture"], built["scene"]
        arch_data.update(
            K=cap.snapshots_per_scene,
            snapshot_height=cap.snapshot_height_px,
            snapshot_width=cap.snapshot_width_px,
            canvas_width=scene.canvas_width_px,
            canvas_height=scene.canvas_height_px,
        )
        built["arch"] = _build_section("arch", ArchConfig, arch_data)
        seed = data.get("master_seed", 0)
        return cls(master_seed=seed, **built)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "scene": self.scene.to_dict(),
            "capture": self.capture.to_dict(),
            "dataset": asdict(self.dataset),
            "arch": _arch_overrides(self.arch),
            "train": self.train.to_dict(),
            "master_seed": self.master_seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, master_seed=seed)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Deep-merge ``overrides`` into this config and re-validate."""
        merged = copy.deepcopy(self.to_dict())
        _merge(merged, overrides)
        return RunConfig.from_dict(merged)

    def manifest(self) -> DatasetManifest:
        d = self.dataset
        return build_manifest(
            self.scene,
            self.capture,
            d.n_scenes,
            d.train_instances,
            d.test_instances,
            master_seed=self.master_seed,
            holdout_scenes=d.holdout_scenes,
        )


def _merge(base: dict, extra: Mapping) -> None:
    for k, v in extra.items():
        if isinstance(v, Mapping) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


def _build_section(name: str, klass, data: Any):
    if not isinstance(data, Mapping):
        raise ConfigError(name, "must be an object")
    known = {f.name for f in fields(klass)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{name}.{key}", f"unknown key (allowed: {', '.join(sorted(known))})")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return klass(**values)
    except ConfigError as exc:
        raise ConfigError(f"{name}.{exc.field}", str(exc).split(": ", 1)[-1]) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from exc


# -- presets ---------------------------------------------------------------------

PRESETS: dict[str, dict] = {
    "desk": {
        "capture": {"snapshots_per_scene": 32},
        "dataset": {"n_scenes": 10, "train_instances": 100, "test_instances": 10},
        # ~1.9k optimizer steps in 50 epochs: a larger, annealed step replaces the
        # paper-scale budget (see README)
        "train": {"epochs": 50, "learning_rate": 1e-3, "lr_schedule": "cosine"},
    },
    "paper": {
        "capture": {"snapshots_per_scene": 221},
        "dataset": {"n_scenes": 100, "train_instances": 100, "test_instances": 10},
        "train": {"epochs": 200},
    },
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return RunConfig.from_dict(copy.deepcopy(PRESETS[name]))
