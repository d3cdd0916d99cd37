"""Fixtures shared by the model tests and the acceptance suite."""

from collections import OrderedDict

import numpy as np
import torch

from pondnet.capture import CoverageMask
from pondnet.dataset import Sample
from pondnet.geometry import array_to_poses
from pondnet.metrics import normalize_poses
from pondnet.model import ArchConfig, ModelWeights, init_model, loss_gradient, pose_loss_torch, sample_tensors

TINY = ArchConfig(
    variant="ours",
    K=2,
    snapshot_height=8,
    snapshot_width=8,
    canvas_width=24,
    canvas_height=16,
    global_downsample=2,
    depthwise_channel_multiplier=2,
    encl_downsample_stages=1,
    encg_channels=(2, 3, 3),
    coord_embed_widths=(10, 10, 10, 10),
    fusion_widths=(16, 12),
)


def make_sample(arch: ArchConfig, seed: int = 0, sigma: float = 1.0) -> Sample:
    rng = np.random.default_rng(seed)
    w, h = arch.canvas_width, arch.canvas_height
    true = np.column_stack(
        [rng.uniform(0.2, 0.8, arch.K) * w, rng.uniform(0.2, 0.8, arch.K) * h, rng.uniform(0, 2.4, arch.K)]
    )
    noisy = true + sigma * rng.normal(size=true.shape) * np.array([w / 20, h / 20, 0.1])
    return Sample(
        sample_id=0,
        scene_id=0,
        snapshots=rng.random((arch.K, arch.snapshot_height, arch.snapshot_width)).astype(np.float32),
        noisy_poses=array_to_poses(noisy),
        mask=CoverageMask(rng.random((h, w)) < 0.5),
        true_poses=array_to_poses(true),
    )


def as_double(weights: ModelWeights) -> ModelWeights:
    return ModelWeights(weights.arch, OrderedDict((k, v.double()) for k, v in weights.params.items()), weights.init_seed)


def _loss_at(weights: ModelWeights, sample: Sample) -> float:
    net = weights.module()
    coords, snaps, g = sample_tensors(sample, weights.arch, torch.float64)
    dims = (weights.arch.canvas_width, weights.arch.canvas_height)
    true = torch.as_tensor(normalize_poses(sample.true_array(), dims))[None]
    with torch.no_grad():
        return float(pose_loss_torch(net(coords, snaps, g), true))


def finite_difference_check(arch: ArchConfig, seed: int, step: float = 1e-4) -> float:
    weights = as_double(init_model(arch, seed))
    for k, v in weights.params.items():
        if k.endswith("bias"):
            # non-zero biases so no unit sits exactly on a ReLU kink
            weights.params[k] = torch.as_tensor(np.random.default_rng(len(k)).normal(0, 0.1, v.shape))
    sample = make_sample(arch, seed)
    analytic = loss_gradient(weights, sample)
    worst = 0.0
    for name, tensor in weights.params.items():
        flat = tensor.view(-1)
        g = analytic[name].view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + step
            up = _loss_at(weights, sample)
            flat[i] = orig - step
            down = _loss_at(weights, sample)
            flat[i] = orig
            fd = (up - down) / (2 * step)
            a = float(g[i])
            scale = max(abs(a), abs(fd))
            # below ~1e-9 both values are dominated by round-off of the difference quotient
            if scale > 1e-9:
                worst = max(worst, abs(a - fd) / scale)
    return worst
