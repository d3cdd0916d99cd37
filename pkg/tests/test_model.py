from dataclasses import replace

import numpy as np
import pytest
import torch

from pondnet.capture import CoverageMask
from pondnet.dataset import Sample
from pondnet.errors import ConfigError, ContractError
from pondnet.geometry import array_to_poses
from pondnet.metrics import normalize_poses
from pondnet.model import (
    ArchConfig,
    ModelWeights,
    PoseDenoiser,
    forward,
    init_model,
    loss_gradient,
    pose_loss,
    pose_loss_torch,
    sample_tensors,
)

from helpers import TINY, finite_difference_check, make_sample

# -- init ------------------------------------------------------------------------


def test_init_deterministic_and_clean():
    a = init_model(ArchConfig(), 3)
    b = init_model(ArchConfig(), 3)
    assert a.equals(b)
    assert not a.equals(init_model(ArchConfig(), 4))
    for name, p in a.params.items():
        assert torch.isfinite(p).all()
        if name.endswith("bias"):
            assert torch.count_nonzero(p) == 0


def test_net_a_has_no_encoders():
    names = init_model(ArchConfig(variant="net_a"), 0).params.keys()
    assert not any(n.startswith(("enc_l", "enc_g")) for n in names)
    names_b = init_model(ArchConfig(variant="net_b"), 0).params.keys()
    assert any(n.startswith("enc_l") for n in names_b) and not any(n.startswith("enc_g") for n in names_b)


def closed_form_count(a: ArchConfig) -> int:
    k, m = a.K, a.depthwise_channel_multiplier
    c = k * m
    n = 0
    if a.variant != "net_a":
        n += c * a.encl_kernel**2 + c  # grouped embed: each output channel sees one input
        n += a.encl_downsample_stages * (c * 9 + c)
    g = 0
    if a.variant in ("net_c", "ours"):
        c1, c2, c3 = a.encg_channels
        n += (1 * 9 + 1) * c1 + (c1 * 9 + 1) * c2 + (c2 * 9 + 1) * c3
        g = c3
    widths = [3 * k, *a.coord_embed_widths]
    n += sum((i + 1) * o for i, o in zip(widths[:-1], widths[1:]))
    f1, f2 = a.fusion_widths
    d_in = (c if a.variant != "net_a" else 0) + g + a.coord_embed_widths[-1]
    n += (d_in + 1) * f1 + (f1 + 1) * f2 + (f2 + 1) * 3 * k
    return n


@pytest.mark.parametrize("variant", ["net_a", "net_b", "net_c", "ours"])
def test_parameter_count_closed_form(variant):
    arch = ArchConfig(variant=variant)
    assert init_model(arch, 0).n_parameters() == closed_form_count(arch)


def test_default_ours_parameter_count_value():
    # 128*9+128 + 2*(128*9+128) + 160+4640+18496 + 96*256+256 + 3*(256*256+256) + 449*512... evaluated:
    assert closed_form_count(ArchConfig()) == 635232


def test_bad_arch():
    with pytest.raises(ConfigError):
        ArchConfig(variant="net_z")
    with pytest.raises(ConfigError):
        ArchConfig(coord_embed_widths=(4, 4, 4))


# -- forward ---------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["net_a", "net_b", "net_c", "ours"])
def test_forward_shape(variant):
    arch = replace(TINY, variant=variant)
    out = forward(init_model(arch, 1), make_sample(arch), arch)
    assert out.shape == (2, 3)
    assert np.isfinite(out).all()


def _with(sample: Sample, snapshots=None, mask=None) -> Sample:
    return replace(
        sample,
        snapshots=sample.snapshots if snapshots is None else snapshots,
        mask=sample.mask if mask is None else mask,
    )


def test_variant_input_sensitivity():
    s = make_sample(TINY, 3)
    rng = np.random.default_rng(9)
    other_snaps = rng.random(s.snapshots.shape).astype(np.float32)
    other_mask = CoverageMask(~s.mask.grid)
    zero_snaps = np.zeros_like(s.snapshots)
    zero_mask = CoverageMask(np.zeros_like(s.mask.grid))

    w_a = init_model(replace(TINY, variant="net_a"), 0)
    base = forward(w_a, s)
    assert np.array_equal(base, forward(w_a, _with(s, zero_snaps, zero_mask)))
    assert np.array_equal(base, forward(w_a, _with(s, other_snaps, other_mask)))

    w_b = init_model(replace(TINY, variant="net_b"), 0)
    base = forward(w_b, s)
    assert np.array_equal(base, forward(w_b, _with(s, mask=other_mask)))
    assert not np.array_equal(base, forward(w_b, _with(s, snapshots=other_snaps)))

    w_o = init_model(TINY, 0)
    base = forward(w_o, s)
    assert not np.array_equal(base, forward(w_o, _with(s, snapshots=other_snaps)))
    assert not np.array_equal(base, forward(w_o, _with(s, mask=other_mask)))
    moved = replace(s, noisy_poses=array_to_poses(s.noisy_array() + 1.0))
    assert not np.array_equal(base, forward(w_o, moved))


def test_residual_zero_head_is_identity():
    arch = replace(TINY, residual_output=True)
    s = make_sample(arch, 4)
    out = forward(init_model(arch, 0), s)
    expected = normalize_poses(s.noisy_array(), (arch.canvas_width, arch.canvas_height)).astype(np.float32)
    assert np.array_equal(out, expected.astype(np.float64))


def test_depthwise_first_layer_keeps_channels_apart():
    arch = replace(TINY, K=4)
    net = init_model(arch, 0).module()
    x = torch.rand(1, 4, 8, 8)
    base = net.enc_l.first_layer(x)
    m = arch.depthwise_channel_multiplier
    for k in range(4):
        y = x.clone()
        y[0, k] += torch.rand(8, 8)
        diff = (net.enc_l.first_layer(y) - base).abs().sum(dim=(0, 2, 3))
        changed = set(torch.nonzero(diff).flatten().tolist())
        assert changed <= set(range(k * m, (k + 1) * m))
        assert changed


def test_forward_shape_errors():
    s = make_sample(TINY)
    bad = _with(s, snapshots=np.zeros((2, 9, 8), np.float32))
    with pytest.raises(ContractError, match="snapshots"):
        forward(init_model(TINY, 0), bad)
    net = PoseDenoiser(TINY)
    with pytest.raises(ContractError, match="coords"):
        net(torch.zeros(1, 3, 3), torch.zeros(1, 2, 8, 8), torch.zeros(1, 1, 8, 12))
    other = replace(TINY, K=3)
    with pytest.raises(ContractError):
        sample_tensors(s, other)


def test_forward_deterministic_and_serialization_roundtrip(tmp_path):
    w = init_model(TINY, 5)
    s = make_sample(TINY, 5)
    out = forward(w, s)
    assert np.array_equal(out, forward(w, s))
    w.save(tmp_path / "w.npz")
    back = ModelWeights.load(tmp_path / "w.npz", expected_arch=TINY)
    assert back.equals(w) and back.init_seed == 5
    assert np.array_equal(forward(back, s), out)


def test_fingerprint_mismatch_refused(tmp_path):
    init_model(TINY, 0).save(tmp_path / "w.npz")
    with pytest.raises(ConfigError, match="fingerprint"):
        ModelWeights.load(tmp_path / "w.npz", expected_arch=replace(TINY, variant="net_b"))


# -- loss ------------------------------------------------------------------------


def test_loss_cases():
    t = np.random.default_rng(0).random((5, 3))
    assert pose_loss(t, t) == 0.0
    assert pose_loss(t + 1.0, t) == pytest.approx(1.05)
    off = t.copy()
    off[:, 2] += 0.2
    assert pose_loss(off, t) == pytest.approx(0.002)
    assert float(pose_loss_torch(torch.tensor(t + 1.0), torch.tensor(t))) == pytest.approx(1.05)
    with pytest.raises(ContractError):
        pose_loss(t, t[:4])


def test_loss_positive_unless_equal():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.random((4, 3)), rng.random((4, 3))
        assert pose_loss(a, b) > 0


# -- gradients -------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["ours", "net_c", "net_b", "net_a"])
def test_gradient_matches_finite_differences(variant):
    assert finite_difference_check(replace(TINY, variant=variant), seed=1) < 1e-4


def test_zero_loss_has_zero_gradient():
    arch = replace(TINY, residual_output=True)
    s = make_sample(arch, 2, sigma=0.0)
    grads = loss_gradient(init_model(arch, 0), s)
    assert all(torch.count_nonzero(g) == 0 for g in grads.values())


def test_theta_weight_scales_theta_gradient():
    torch.manual_seed(0)
    probe = torch.nn.Linear(6, 6, dtype=torch.float64)
    x = torch.randn(8, 6, dtype=torch.float64)
    target = torch.randn(8, 2, 3, dtype=torch.float64)

    def grads(theta_weight):
        probe.zero_grad()
        pose_loss_torch(probe(x).view(8, 2, 3), target, theta_weight).backward()
        return probe.weight.grad.clone()

    theta_rows = [2, 5]
    xy_rows = [0, 1, 3, 4]
    g1 = grads(0.05)
    g2 = grads(0.10)
    assert torch.allclose(g2[theta_rows], 2 * g1[theta_rows], rtol=1e-12, atol=0)
    assert torch.allclose(g2[xy_rows], g1[xy_rows], rtol=1e-12, atol=0)
