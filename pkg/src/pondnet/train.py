"""Training, evaluation and the four-way ablation."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import DatasetManifest, DatasetReader
from .errors import ConfigError, ContractError, NumericError
from .metrics import MetricsReport, denormalize_poses, evaluate_poses, normalize_poses
from .model import VARIANTS, ArchConfig, ModelWeights, global_image, init_model, pose_loss_torch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 24
    epochs: int = 50
    shuffle_seed: int = 0
    init_seed: int = 0
    checkpoint_every: int = 0
    validation_fraction: float = 0.1
    patience: int = 20
    grad_clip: float | None = None
    theta_weight: float = 0.05
    restore_best: bool = True
    lr_schedule: str = "constant"
    min_lr_factor: float = 0.01

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", f"must be > 0, got {self.learning_rate}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(name, f"must lie in [0, 1), got {getattr(self, name)}")
        if self.adam_epsilon <= 0:
            raise ConfigError("adam_epsilon", "must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError("epochs", f"must be >= 0, got {self.epochs}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction", "must lie in [0, 1)")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every", "must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule", f"must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if not 0.0 <= self.min_lr_factor <= 1.0:
            raise ConfigError("min_lr_factor", "must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    initial_train_loss: float | None = None
    best_epoch: int | None = None
    stopped_early: bool = False

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), f"{e.seconds:.3f}"])


class TrainingDiverged(NumericError):
    def __init__(self, epoch: int, batch: int, checkpoint: Path | None):
        self.epoch, self.batch, self.checkpoint = epoch, batch, checkpoint
        where = f"; last checkpoint {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}{where}")


# -- in-memory tensors -------------------------------------------------------------


@dataclass
class SplitTensors:
    """Model-ready arrays for a set of samples.

    Snapshot stacks are stored once per distinct capture (scene + pose seed)
    and referenced through ``stack_index``.
    """

    sample_ids: np.ndarray
    noisy: torch.Tensor  # (N, K, 3) normalized
    true: torch.Tensor  # (N, K, 3) normalized
    stack_index: np.ndarray  # (N,)
    stacks: torch.Tensor | None  # (U, K, H, W)
    global_images: torch.Tensor | None  # (N, 1, h, w)

    def __len__(self) -> int:
        return len(self.sample_ids)

    def batch(self, rows: np.ndarray) -> tuple:
        rows = np.asarray(rows)
        snaps = index = None
        if self.stacks is not None:
            uniq, inv = np.unique(self.stack_index[rows], return_inverse=True)
            snaps = self.stacks[torch.as_tensor(uniq)]
            index = torch.as_tensor(inv.reshape(-1))
        g = None if self.global_images is None else self.global_images[torch.as_tensor(rows)]
        r = torch.as_tensor(rows)
        return self.noisy[r], snaps, g, index, self.true[r]


def build_tensors(
    manifest: DatasetManifest,
    arch: ArchConfig,
    sample_ids: Sequence[int],
    reader: DatasetReader | None = None,
    dtype: torch.dtype = torch.float32,
) -> SplitTensors:
    if manifest.capture_config.snapshots_per_scene != arch.K:
        raise ContractError(f"manifest has K={manifest.capture_config.snapshots_per_scene}, arch expects K={arch.K}")
    if manifest.canvas_dims != (arch.canvas_width, arch.canvas_height):
        raise ContractError(f"manifest canvas {manifest.canvas_dims} != arch canvas {(arch.canvas_width, arch.canvas_height)}")
    reader = reader or DatasetReader(manifest)
    dims = manifest.canvas_dims
    noisy, true, stack_idx, globals_ = [], [], [], []
    stack_keys: dict[tuple[int, int], int] = {}
    stacks: list[np.ndarray] = []
    for sid in sample_ids:
        rec = manifest.record(sid)
        s = reader.sample(sid)
        noisy.append(normalize_poses(s.noisy_array(), dims))
        true.append(normalize_poses(s.true_array(), dims))
        key = (rec.scene_id, rec.pose_seed)
        if key not in stack_keys:
            stack_keys[key] = len(stacks)
            if arch.uses_snapshots:
                stacks.append(np.asarray(s.snapshots))
        stack_idx.append(stack_keys[key])
        if arch.global_input:
            globals_.append(global_image(s, arch))
    return SplitTensors(
        sample_ids=np.asarray(list(sample_ids), dtype=np.int64),
        noisy=torch.as_tensor(np.array(noisy), dtype=dtype),
        true=torch.as_tensor(np.array(true), dtype=dtype),
        stack_index=np.asarray(stack_idx, dtype=np.int64),
        stacks=torch.as_tensor(np.array(stacks), dtype=dtype) if stacks else None,
        global_images=torch.as_tensor(np.array(globals_), dtype=dtype)[:, None] if globals_ else None,
    )


def split_train_validation(train_ids: Sequence[int], fraction: float, seed: int) -> tuple[list[int], list[int]]:
    ids = np.array(sorted(train_ids))
    n_val = int(math.ceil(fraction * len(ids))) if fraction > 0 else 0
    if n_val >= len(ids):
        n_val = len(ids) - 1
    perm = np.random.default_rng(seed).permutation(len(ids))
    val = sorted(ids[perm[:n_val]].tolist())
    train = sorted(ids[perm[n_val:]].tolist())
    return train, val


def epoch_order(n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    """Seeded permutation of ``range(n)`` for one epoch."""
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def _mean_loss(net, data: SplitTensors, batch_size: int, theta_weight: float) -> float:
    if len(data) == 0:
        return float("nan")
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            rows = np.arange(start, min(start + batch_size, len(data)))
            coords, snaps, g, idx, true = data.batch(rows)
            pred = net(coords, snaps, g, idx)
            total += float(pose_loss_torch(pred, true, theta_weight)) * len(rows)
    return total / len(data)


def train(
    manifest: DatasetManifest,
    arch: ArchConfig,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    train_data: SplitTensors | None = None,
    val_data: SplitTensors | None = None,
    progress: Callable[[EpochRecord], None] | None = None,
) -> tuple[ModelWeights, TrainHistory]:
    """Adam on the pose loss over shuffled mini-batches of the train split.

    Deterministic given ``(manifest, arch, cfg)``.  With ``restore_best`` the
    returned weights are those of the epoch with the lowest validation loss.
    """
    torch.manual_seed(cfg.init_seed)
    train_ids = [r.sample_id for r in manifest.split("train")]
    if not train_ids:
        raise ContractError("manifest has no train records")
    fit_ids, val_ids = split_train_validation(train_ids, cfg.validation_fraction, cfg.shuffle_seed)
    reader = DatasetReader(manifest)
    if train_data is None:
        train_data = build_tensors(manifest, arch, fit_ids, reader)
    if val_data is None:
        val_data = build_tensors(manifest, arch, val_ids, reader)

    weights = init_model(arch, cfg.init_seed)
    history = TrainHistory()
    if cfg.epochs == 0:
        return weights, history

    net = weights.module()
    opt = torch.optim.Adam(
        net.parameters(), lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_epsilon
    )
    sched = None
    if cfg.lr_schedule == "cosine":
        # annealed once per epoch from learning_rate down to min_lr_factor * learning_rate
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(
            opt, T_max=max(cfg.epochs - 1, 1), eta_min=cfg.learning_rate * cfg.min_lr_factor
        )
    out = Path(out_dir) if out_dir is not None else None
    last_ckpt: Path | None = None
    best_val, best_state, since_best = math.inf, None, 0
    history.initial_train_loss = _mean_loss(net, train_data, cfg.batch_size, cfg.theta_weight)

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = epoch_order(len(train_data), cfg.shuffle_seed, epoch)
        running, seen = 0.0, 0
        net.train()
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            rows = order[start : start + cfg.batch_size]
            coords, snaps, g, idx, true = train_data.batch(rows)
            pred = net(coords, snaps, g, idx)
            loss = pose_loss_torch(pred, true, cfg.theta_weight)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, b, last_ckpt)
            opt.zero_grad(set_to_none=False)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
            opt.step()
            running += loss.item() * len(rows)
            seen += len(rows)
        if sched is not None:
            sched.step()
        net.eval()
        val_loss = _mean_loss(net, val_data, cfg.batch_size, cfg.theta_weight)
        rec = EpochRecord(epoch, running / seen, val_loss, time.perf_counter() - t0)
        history.epochs.append(rec)
        log.info("epoch %d train %.6g val %.6g (%.1fs)", epoch, rec.train_loss, rec.val_loss, rec.seconds)
        if progress:
            progress(rec)

        score = val_loss if math.isfinite(val_loss) else rec.train_loss
        if score < best_val:
            best_val, since_best, history.best_epoch = score, 0, epoch
            best_state = copy.deepcopy(net.state_dict())
        else:
            since_best += 1
        if out is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            out.mkdir(parents=True, exist_ok=True)
            last_ckpt = out / f"checkpoint_epoch{epoch:04d}.npz"
            ModelWeights(arch, _detached(net.state_dict()), cfg.init_seed).save(last_ckpt)
        if cfg.patience and since_best >= cfg.patience:
            history.stopped_early = True
            break

    state = best_state if (cfg.restore_best and best_state is not None) else net.state_dict()
    return ModelWeights(arch, _detached(state), cfg.init_seed), history


def _detached(state) -> "dict[str, torch.Tensor]":
    from collections import OrderedDict

    return OrderedDict((k, v.detach().clone()) for k, v in state.items())


# -- evaluation --------------------------------------------------------------------


def predict(weights: ModelWeights, data: SplitTensors, batch_size: int = 64) -> np.ndarray:
    """Normalized predictions ``(N, K, 3)``."""
    net = weights.module()
    net.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            rows = np.arange(start, min(start + batch_size, len(data)))
            coords, snaps, g, idx, _ = data.batch(rows)
            outs.append(net(coords, snaps, g, idx).double().numpy())
    return np.concatenate(outs) if outs else np.zeros((0, weights.arch.K, 3))


def report_from_normalized(pred: np.ndarray, true: np.ndarray, manifest: DatasetManifest) -> MetricsReport:
    dims = manifest.canvas_dims
    cap = manifest.capture_config
    return evaluate_poses(
        denormalize_poses(pred, dims),
        denormalize_poses(true, dims),
        dims,
        (cap.snapshot_width_px, cap.snapshot_height_px),
    )


def evaluate(
    weights: ModelWeights, manifest: DatasetManifest, split: str = "test", data: SplitTensors | None = None
) -> MetricsReport:
    if data is None:
        data = build_tensors(manifest, weights.arch, [r.sample_id for r in manifest.split(split)])
    pred = predict(weights, data)
    return report_from_normalized(pred, data.true.double().numpy(), manifest)


def identity_report(manifest: DatasetManifest, split: str = "test") -> MetricsReport:
    """Metrics of the do-nothing predictor that returns the noisy poses."""
    reader = DatasetReader(manifest)
    samples = [reader.sample(r.sample_id) for r in manifest.split(split)]
    noisy = np.stack([s.noisy_array() for s in samples])
    true = np.stack([s.true_array() for s in samples])
    cap = manifest.capture_config
    return evaluate_poses(noisy, true, manifest.canvas_dims, (cap.snapshot_width_px, cap.snapshot_height_px))


def run_ablation(
    manifest: DatasetManifest,
    base_arch: ArchConfig,
    cfg: TrainConfig,
    variants: Sequence[str] = VARIANTS,
    out_dir: str | Path | None = None,
) -> list[tuple[str, ModelWeights, MetricsReport]]:
    """Train every variant with identical seeds and budget, then score each on the test split."""
    results = []
    for variant in variants:
        arch = base_arch.with_variant(variant)
        sub = Path(out_dir) / variant if out_dir is not None else None
        weights, history = train(manifest, arch, cfg, out_dir=sub)
        report = evaluate(weights, manifest, "test")
        log.info("%s: %s", variant, report)
        if sub is not None:
            sub.mkdir(parents=True, exist_ok=True)
            weights.save(sub / "weights.npz")
            history.write_csv(sub / "history.csv")
            (sub / "metrics.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n")
        results.append((variant, weights, report))
    return results
