"""Parametric pond-floor scenes: a hexagonal lattice of fuel rods.

Each rod is drawn as a ring (the rod wall) between ``rod_inner_radius_px`` and
``rod_outer_radius_px``; its inner disc is either filled (a full rod) or left
at background intensity (an empty rod).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .seeding import derive_seed


def quantize_intensity(value: float) -> float:
    """Snap an intensity onto the 8-bit grid so PNG export round-trips exactly."""
    return round(float(value) * 255.0) / 255.0


@dataclass(frozen=True)
class SceneConfig:
    canvas_width_px: int = 750
    canvas_height_px: int = 520
    rod_pitch_px: int = 48
    rod_outer_radius_px: int = 18
    rod_inner_radius_px: int = 10
    fill_probability: float = 0.5
    outline_intensity: float = 0.0
    background_intensity: float = 1.0
    fill_intensity: float = 0.0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for name in ("canvas_width_px", "canvas_height_px", "rod_pitch_px", "rod_outer_radius_px", "rod_inner_radius_px"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise ConfigError(name, f"must be an integer, got {value!r}")
            if value <= 0:
                raise ConfigError(name, f"must be positive, got {value}")
        if not self.rod_inner_radius_px < self.rod_outer_radius_px:
            raise ConfigError("rod_inner_radius_px", "must be smaller than rod_outer_radius_px")
        if not self.rod_outer_radius_px < self.rod_pitch_px / 2:
            raise ConfigError("rod_outer_radius_px", "must be smaller than rod_pitch_px / 2")
        for name in ("fill_probability", "outline_intensity", "background_intensity", "fill_intensity"):
            value = getattr(self, name)
            if not 0.0 <= float(value) <= 1.0:
                raise ConfigError(name, f"must lie in [0, 1], got {value}")
        if 2 * self.rod_outer_radius_px >= min(self.canvas_width_px, self.canvas_height_px):
            raise ConfigError("canvas_width_px", "canvas cannot hold a single rod")

    @property
    def canvas_shape(self) -> tuple[int, int]:
        """``(rows, cols)`` of the rendered image."""
        return (self.canvas_height_px, self.canvas_width_px)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        return cls(**data)


@dataclass
class PondScene:
    scene_id: int
    config: SceneConfig
    rod_states: np.ndarray
    image: np.ndarray = field(repr=False)
    seed: int | None = None

    @property
    def n_rods(self) -> int:
        return int(self.rod_states.size)


def lattice_shape(config: SceneConfig) -> tuple[int, int]:
    """``(n_rows, n_cols)`` of the clipped lattice; depends on config only."""
    r = config.rod_outer_radius_px
    dy = config.rod_pitch_px * math.sqrt(3) / 2
    usable_w = (config.canvas_width_px - 1) - 2 * r
    usable_h = (config.canvas_height_px - 1) - 2 * r
    # odd rows are shifted by half a pitch, so reserve that much width
    n_cols = int(math.floor((usable_w - config.rod_pitch_px / 2) / config.rod_pitch_px)) + 1
    n_rows = int(math.floor(usable_h / dy)) + 1
    if n_cols < 1 or n_rows < 1:
        raise ConfigError("canvas_width_px", "canvas too small for the rod lattice")
    return n_rows, n_cols


def rod_centers(config: SceneConfig) -> np.ndarray:
    """Rod centers ``(x, y)`` shaped ``(n_rows, n_cols, 2)``, lattice centered on the canvas."""
    n_rows, n_cols = lattice_shape(config)
    pitch = config.rod_pitch_px
    dy = pitch * math.sqrt(3) / 2
    span_x = (n_cols - 1) * pitch + (pitch / 2 if n_rows > 1 else 0)
    span_y = (n_rows - 1) * dy
    x0 = ((config.canvas_width_px - 1) - span_x) / 2
    y0 = ((config.canvas_height_px - 1) - span_y) / 2
    rows = np.arange(n_rows)
    cols = np.arange(n_cols)
    xs = x0 + cols[None, :] * pitch + (rows[:, None] % 2) * (pitch / 2)
    ys = y0 + rows[:, None] * dy + 0 * cols[None, :]
    return np.stack([xs, ys], axis=-1)


def render_scene(config: SceneConfig, rod_states: np.ndarray) -> np.ndarray:
    """Rasterize the lattice with hard edges; pure in ``(config, rod_states)``."""
    rod_states = np.asarray(rod_states, dtype=bool)
    if rod_states.shape != lattice_shape(config):
        raise ConfigError("rod_states", f"expected shape {lattice_shape(config)}, got {rod_states.shape}")
    background = quantize_intensity(config.background_intensity)
    outline = quantize_intensity(config.outline_intensity)
    fill = quantize_intensity(config.fill_intensity)

    image = np.full(config.canvas_shape, background, dtype=np.float32)
    r_out = config.rod_outer_radius_px
    r_in = config.rod_inner_radius_px
    offs = np.arange(-r_out - 1, r_out + 2)
    centers = rod_centers(config)
    for (i, j), solid in np.ndenumerate(rod_states):
        cx, cy = centers[i, j]
        xs = np.round(cx).astype(int) + offs
        ys = np.round(cy).astype(int) + offs
        xs = xs[(xs >= 0) & (xs < config.canvas_width_px)]
        ys = ys[(ys >= 0) & (ys < config.canvas_height_px)]
        d2 = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2
        patch = image[ys[0] : ys[-1] + 1, xs[0] : xs[-1] + 1]
        patch[d2 <= r_out * r_out] = outline
        patch[d2 <= r_in * r_in] = fill if solid else background
    return image


def generate_scene(config: SceneConfig, seed: int, scene_id: int = 0) -> PondScene:
    """Draw each rod's full/empty state with ``fill_probability`` and render the scene."""
    config.validate()
    rng = np.random.default_rng(seed)
    shape = lattice_shape(config)
    rod_states = rng.random(shape) < config.fill_probability
    return PondScene(scene_id=scene_id, config=config, rod_states=rod_states, image=render_scene(config, rod_states), seed=seed)


def scene_seed(master_seed: int, scene_id: int) -> int:
    return derive_seed(master_seed, "scene", scene_id)


def generate_scene_batch(config: SceneConfig, count: int, master_seed: int) -> list[PondScene]:
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    return [generate_scene(config, scene_seed(master_seed, i), scene_id=i) for i in range(count)]


def export_scene(scene: PondScene, out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``<id>.png`` and a ``<id>.json`` sidecar; returns both paths."""
    from .imageio import save_gray_png

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    png = out_dir / f"{scene.scene_id}.png"
    sidecar = out_dir / f"{scene.scene_id}.json"
    save_gray_png(png, scene.image)
    sidecar.write_text(
        json.dumps(
            {
                "scene_id": scene.scene_id,
                "seed": scene.seed,
                "config": scene.config.to_dict(),
                "rod_states": scene.rod_states.astype(int).tolist(),
            },
            indent=2,
        )
    )
    return png, sidecar
