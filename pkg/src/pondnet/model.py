"""Multi-modal pose denoiser and its ablation variants.

The network maps noisy poses ``C``, the snapshot stack ``S`` and a global
canvas image ``G`` to corrected poses:

* ``Enc_l``: depthwise conv + ReLU over the K-channel snapshot stack, a few
  stride-2 depthwise stages, global average pooling -> ``f_l``
* ``Enc_g``: three Conv-ReLU blocks (strides 1, 2, 2), global average pooling -> ``f_g``
* coordinate embedder: four Linear+ReLU layers on the flattened K x 3 poses -> ``f_c``
* fusion: concatenation, Linear+ReLU, Linear+ReLU, Linear -> K x 3

Which of ``S`` and ``G`` are used, and what ``G`` is, depends on the variant:

========  ======  =========  =============================
variant   coords  snapshots  global image
========  ======  =========  =============================
net_a     yes     no         none
net_b     yes     yes        none
net_c     yes     yes        noisy assembled mosaic
ours      yes     yes        coverage mask
========  ======  =========  =============================
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, NumericError

VARIANTS = ("net_a", "net_b", "net_c", "ours")
THETA_LOSS_WEIGHT = 0.05


@dataclass(frozen=True)
class ArchConfig:
    variant: str = "ours"
    K: int = 32
    snapshot_height: int = 110
    snapshot_width: int = 160
    canvas_width: int = 750
    canvas_height: int = 520
    # the global image enters Enc_g area-downsampled by this factor
    global_downsample: int = 4
    depthwise_channel_multiplier: int = 4
    encl_downsample_stages: int = 2
    encl_kernel: int = 3
    encg_channels: tuple[int, int, int] = (16, 32, 64)
    coord_embed_widths: tuple[int, int, int, int] = (256, 256, 256, 256)
    fusion_widths: tuple[int, int] = (512, 256)
    residual_output: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "encg_channels", tuple(self.encg_channels))
        object.__setattr__(self, "coord_embed_widths", tuple(self.coord_embed_widths))
        fw = tuple(self.fusion_widths)
        # a trailing K*3 entry is accepted and dropped: the output width is fixed
        if len(fw) == 3 and fw[-1] == self.K * 3:
            fw = fw[:2]
        object.__setattr__(self, "fusion_widths", fw)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"must be one of {VARIANTS}, got {self.variant!r}")
        for name in (
            "K",
            "snapshot_height",
            "snapshot_width",
            "canvas_width",
            "canvas_height",
            "global_downsample",
            "depthwise_channel_multiplier",
            "encl_kernel",
        ):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, f"must be positive, got {getattr(self, name)}")
        if self.encl_downsample_stages < 0:
            raise ConfigError("encl_downsample_stages", "must be >= 0")
        for name, n in (("encg_channels", 3), ("coord_embed_widths", 4), ("fusion_widths", 2)):
            widths = getattr(self, name)
            if len(widths) != n or any(int(w) < 1 for w in widths):
                raise ConfigError(name, f"needs {n} positive widths, got {widths}")
        if self.global_height < 1 or self.global_width < 1:
            raise ConfigError("global_downsample", "downsampled global image would be empty")

    @property
    def uses_snapshots(self) -> bool:
        return self.variant != "net_a"

    @property
    def global_input(self) -> str | None:
        return {"net_c": "mosaic", "ours": "mask"}.get(self.variant)

    @property
    def global_height(self) -> int:
        return self.canvas_height // self.global_downsample

    @property
    def global_width(self) -> int:
        return self.canvas_width // self.global_downsample

    @property
    def encl_channels(self) -> int:
        return self.K * self.depthwise_channel_multiplier

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "ArchConfig":
        return cls(**dict(data))

    def with_variant(self, variant: str) -> "ArchConfig":
        return replace(self, variant=variant)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class FeatureBundle:
    f_l: torch.Tensor
    f_g: torch.Tensor
    f_c: torch.Tensor
    f_combined: torch.Tensor


class SnapshotEncoder(nn.Module):
    """Per-snapshot features; no layer ever mixes two snapshot channels."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        k, ks = arch.K, arch.encl_kernel
        c = arch.encl_channels
        self.embed = nn.Conv2d(k, c, ks, padding=ks // 2, groups=k)
        self.down = nn.ModuleList(
            nn.Conv2d(c, c, 3, stride=2, padding=1, groups=c) for _ in range(arch.encl_downsample_stages)
        )

    def first_layer(self, snapshots: torch.Tensor) -> torch.Tensor:
        return F.relu(self.embed(snapshots))

    def forward(self, snapshots: torch.Tensor) -> torch.Tensor:
        h = self.first_layer(snapshots)
        for conv in self.down:
            h = F.relu(conv(h))
        return h.mean(dim=(2, 3))


class GlobalEncoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        c1, c2, c3 = arch.encg_channels
        self.block1 = nn.Conv2d(1, c1, 3, stride=1, padding=1)
        self.block2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.block3 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.block1(image))
        h = F.relu(self.block2(h))
        h = F.relu(self.block3(h))
        return h.mean(dim=(2, 3))


class PoseDenoiser(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.enc_l = SnapshotEncoder(arch) if arch.uses_snapshots else None
        self.enc_g = GlobalEncoder(arch) if arch.global_input else None
        widths = (arch.K * 3, *arch.coord_embed_widths)
        self.coord = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        d_l = arch.encl_channels if arch.uses_snapshots else 0
        d_g = arch.encg_channels[-1] if arch.global_input else 0
        d_in = d_l + d_g + arch.coord_embed_widths[-1]
        f1, f2 = arch.fusion_widths
        self.fuse1 = nn.Linear(d_in, f1)
        self.fuse2 = nn.Linear(f1, f2)
        self.head = nn.Linear(f2, arch.K * 3)

    def _check(self, name: str, tensor: torch.Tensor | None, expected: tuple[int, ...]) -> None:
        if tensor is None:
            raise ContractError(f"{name} is required by variant {self.arch.variant}")
        if tuple(tensor.shape[1:]) != expected:
            raise ContractError(f"{name} has shape {tuple(tensor.shape)}, expected (batch, {', '.join(map(str, expected))})")

    def features(
        self,
        coords: torch.Tensor,
        snapshots: torch.Tensor | None = None,
        global_image: torch.Tensor | None = None,
        snapshot_index: torch.Tensor | None = None,
    ) -> FeatureBundle:
        """Branch features.

        ``snapshot_index`` lets several batch rows share one snapshot stack:
        row ``b`` uses ``snapshots[snapshot_index[b]]``.
        """
        arch = self.arch
        self._check("coords", coords, (arch.K, 3))
        batch = coords.shape[0]
        empty = coords.new_zeros((batch, 0))
        if self.enc_l is not None:
            self._check("snapshots", snapshots, (arch.K, arch.snapshot_height, arch.snapshot_width))
            f_l = self.enc_l(snapshots)
            if snapshot_index is not None:
                f_l = f_l[snapshot_index]
        else:
            f_l = empty
        if self.enc_g is not None:
            self._check("global_image", global_image, (1, arch.global_height, arch.global_width))
            f_g = self.enc_g(global_image)
        else:
            f_g = empty
        h = coords.reshape(batch, -1)
        for layer in self.coord:
            h = F.relu(layer(h))
        return FeatureBundle(f_l=f_l, f_g=f_g, f_c=h, f_combined=torch.cat([f_l, f_g, h], dim=1))

    def forward(
        self,
        coords: torch.Tensor,
        snapshots: torch.Tensor | None = None,
        global_image: torch.Tensor | None = None,
        snapshot_index: torch.Tensor | None = None,
    ) -> torch.Tensor:
        f = self.features(coords, snapshots, global_image, snapshot_index).f_combined
        out = self.head(F.relu(self.fuse2(F.relu(self.fuse1(f)))))
        out = out.reshape(coords.shape[0], self.arch.K, 3)
        if self.arch.residual_output:
            out = out + coords
        return out


# -- weights -------------------------------------------------------------------


@dataclass
class ModelWeights:
    """Parameters keyed by layer name, tied to the architecture they were built for."""

    arch: ArchConfig
    params: "OrderedDict[str, torch.Tensor]"
    init_seed: int | None = None

    def module(self, dtype: torch.dtype | None = None) -> PoseDenoiser:
        own = next(iter(self.params.values())).dtype
        net = PoseDenoiser(self.arch).to(own)
        net.load_state_dict(self.params)
        if dtype is not None:
            net = net.to(dtype)
        return net

    def n_parameters(self) -> int:
        return int(sum(p.numel() for p in self.params.values()))

    def equals(self, other: "ModelWeights") -> bool:
        return self.params.keys() == other.params.keys() and all(
            torch.equal(self.params[k], other.params[k]) for k in self.params
        )

    def save(self, path: str | Path) -> None:
        meta = {
            "arch": self.arch.to_dict(),
            "fingerprint": self.arch.fingerprint(),
            "init_seed": self.init_seed,
            "shapes": {k: list(v.shape) for k, v in self.params.items()},
        }
        arrays = {k: v.detach().cpu().numpy() for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path: str | Path, expected_arch: ArchConfig | None = None) -> "ModelWeights":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            arch = ArchConfig.from_dict(meta["arch"])
            if arch.fingerprint() != meta["fingerprint"]:
                raise ConfigError("fingerprint", "checkpoint metadata is inconsistent with its architecture")
            if expected_arch is not None and expected_arch.fingerprint() != meta["fingerprint"]:
                raise ConfigError(
                    "fingerprint",
                    f"checkpoint built for arch {meta['fingerprint']}, expected {expected_arch.fingerprint()}",
                )
            params = OrderedDict((k, torch.from_numpy(data[k].copy())) for k in meta["shapes"])
        for k, shape in meta["shapes"].items():
            if list(params[k].shape) != shape:
                raise ContractError(f"parameter {k} has shape {list(params[k].shape)}, metadata says {shape}")
        return cls(arch=arch, params=params, init_seed=meta.get("init_seed"))


def init_model(arch: ArchConfig, seed: int, zero_head: bool | None = None) -> ModelWeights:
    """Seeded He-uniform weights with zero biases.

    ``zero_head`` zeroes the final projection; it defaults to
    ``arch.residual_output`` so residual models start as the identity.
    """
    arch.validate()
    if zero_head is None:
        zero_head = arch.residual_output
    net = PoseDenoiser(arch)
    gen = torch.Generator().manual_seed(int(seed))
    params: OrderedDict[str, torch.Tensor] = OrderedDict()
    for name, p in net.state_dict().items():
        if name.endswith("bias") or (zero_head and name.startswith("head.")):
            params[name] = torch.zeros_like(p)
            continue
        fan_in = p[0].numel()
        bound = math.sqrt(6.0 / fan_in)
        if name.startswith("head."):
            bound = math.sqrt(3.0 / fan_in)
        params[name] = (torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 - 1) * bound
    return ModelWeights(arch=arch, params=params, init_seed=int(seed))


def parameter_count(arch: ArchConfig) -> int:
    return init_model(arch, 0).n_parameters()


# -- loss ------------------------------------------------------------------------


def pose_loss_torch(predicted: torch.Tensor, true: torch.Tensor, theta_weight: float = THETA_LOSS_WEIGHT) -> torch.Tensor:
    if predicted.shape != true.shape:
        raise ContractError(f"predicted {tuple(predicted.shape)} vs true {tuple(true.shape)}")
    err = (predicted - true) ** 2
    return err[..., :2].mean() + theta_weight * err[..., 2].mean()


def pose_loss(predicted: np.ndarray, true: np.ndarray, theta_weight: float = THETA_LOSS_WEIGHT) -> float:
    """Joint MSE over x and y plus ``theta_weight`` times the theta MSE."""
    predicted = np.asarray(predicted, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if predicted.shape != true.shape or predicted.shape[-1] != 3:
        raise ContractError(f"predicted {predicted.shape} vs true {true.shape}")
    err = (predicted - true) ** 2
    return float(err[..., :2].mean() + theta_weight * err[..., 2].mean())


# -- sample -> tensors -------------------------------------------------------------


def downsample_area(image: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsampling; trailing rows/cols that do not fill a block are dropped."""
    h, w = image.shape
    h2, w2 = h // factor, w // factor
    blocks = np.asarray(image, dtype=np.float32)[: h2 * factor, : w2 * factor]
    return blocks.reshape(h2, factor, w2, factor).mean(axis=(1, 3))


def global_image(sample, arch: ArchConfig) -> np.ndarray | None:
    """The Enc_g input for ``sample`` at model resolution, or None for variants without one."""
    kind = arch.global_input
    if kind is None:
        return None
    if kind == "mask":
        full = sample.mask.grid.astype(np.float32)
    else:
        from .assembly import assemble

        full = assemble(sample.snapshots, sample.noisy_poses, (arch.canvas_width, arch.canvas_height), source="noisy").image
    return downsample_area(full, arch.global_downsample)


def sample_tensors(
    sample, arch: ArchConfig, dtype: torch.dtype = torch.float32
) -> tuple[torch.Tensor, torch.Tensor | None, torch.Tensor | None]:
    """Batch-of-one ``(coords, snapshots, global_image)`` in normalized model units."""
    from .metrics import normalize_poses

    if sample.K != arch.K:
        raise ContractError(f"sample has K={sample.K} snapshots, arch expects K={arch.K}")
    coords = torch.as_tensor(normalize_poses(sample.noisy_array(), (arch.canvas_width, arch.canvas_height)), dtype=dtype)[None]
    snaps = None
    if arch.uses_snapshots:
        snaps = torch.tensor(np.asarray(sample.snapshots), dtype=dtype)[None]
    g = global_image(sample, arch)
    g_t = None if g is None else torch.as_tensor(g, dtype=dtype)[None, None]
    return coords, snaps, g_t


def forward(weights: ModelWeights, sample, arch: ArchConfig | None = None) -> np.ndarray:
    """Predicted poses for one sample, ``(K, 3)`` in normalized units."""
    arch = arch or weights.arch
    if arch.fingerprint() != weights.arch.fingerprint():
        raise ContractError("weights were built for a different architecture")
    dtype = next(iter(weights.params.values())).dtype
    net = weights.module()
    with torch.no_grad():
        out = net(*sample_tensors(sample, arch, dtype))
    return out[0].numpy().astype(np.float64)


def loss_gradient(
    weights: ModelWeights, sample, arch: ArchConfig | None = None, theta_weight: float = THETA_LOSS_WEIGHT
) -> "OrderedDict[str, torch.Tensor]":
    """Exact gradient of the pose loss on ``sample`` for every parameter."""
    from .metrics import normalize_poses

    arch = arch or weights.arch
    dtype = next(iter(weights.params.values())).dtype
    net = weights.module()
    coords, snaps, g = sample_tensors(sample, arch, dtype)
    true = torch.as_tensor(normalize_poses(sample.true_array(), (arch.canvas_width, arch.canvas_height)), dtype=dtype)[None]
    pred = net(coords, snaps, g)
    if not torch.isfinite(pred).all():
        raise NumericError("forward pass produced non-finite values")
    loss = pose_loss_torch(pred, true, theta_weight)
    names = [n for n, _ in net.named_parameters()]
    grads = torch.autograd.grad(loss, [p for _, p in net.named_parameters()], allow_unused=True)
    out: OrderedDict[str, torch.Tensor] = OrderedDict()
    for n, gr in zip(names, grads):
        out[n] = torch.zeros_like(weights.params[n]) if gr is None else gr.detach()
    return out
