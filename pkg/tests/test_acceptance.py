"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``CRITERION <n> PASS|FAIL`` line with the measured
numbers, so ``pytest -v -s`` doubles as a readable report.  The training
criteria (7 and 8) share one desk-scale ablation run.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from helpers import TINY, finite_difference_check, make_sample
from pondnet.assembly import assemble, reconstruction_score
from pondnet.capture import CaptureConfig, extract_snapshots, perturb_poses, render_coverage_mask, sample_poses
from pondnet.cli import EXIT_OK, main
from pondnet.config import preset
from pondnet.dataset import DatasetManifest, DatasetReader, tree_checksums
from pondnet.geometry import Pose, poses_to_array, rotate_poses_rigidly
from pondnet.metrics import MetricsReport, mean_pose_iou, pose_iou, regression_metrics
from pondnet.model import forward, init_model, pose_loss
from pondnet.train import identity_report


CRITERIA: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}"
    CRITERIA[n] = line
    print("\n" + line)


# 1 ------------------------------------------------------------------------------


def test_criterion_1_desk_dataset_reproducible(tmp_path):
    t0 = time.perf_counter()
    for run in ("a", "b"):
        args = ["gen-dataset", "--preset", "desk", "--seed", "11", "--materialize", "--out", str(tmp_path / run)]
        assert main(args) == EXIT_OK
    elapsed = time.perf_counter() - t0
    same_manifest = (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    sums_a, sums_b = tree_checksums(tmp_path / "a"), tree_checksums(tmp_path / "b")
    n_png = sum(1 for k in sums_a if k.endswith(".png"))
    ok = same_manifest and sums_a == sums_b and n_png > 1000 and elapsed < 120
    report(1, ok, f"manifests identical={same_manifest}, {len(sums_a)} files identical={sums_a == sums_b}, {elapsed:.1f}s")
    assert same_manifest and sums_a == sums_b
    assert n_png == 10 + 1100 * 33  # scenes + (32 snapshots + mask) per sample
    assert elapsed < 120


# 2 ------------------------------------------------------------------------------


def test_criterion_2_paper_scale_manifest(tmp_path):
    assert main(["gen-dataset", "--preset", "paper", "--out", str(tmp_path)]) == EXIT_OK
    m = DatasetManifest.load(tmp_path / "manifest.json")
    counts = (len(m.scene_ids), m.capture_config.snapshots_per_scene, len(m.split("train")), len(m.split("test")))
    ok = counts == (100, 221, 10_000, 1_000) and not (tmp_path / "samples").exists()
    report(2, ok, f"scenes/K/train/test = {counts}")
    assert ok


# 3 ------------------------------------------------------------------------------


def test_criterion_3_round_trip_assembly():
    cfg = preset("desk")
    m = cfg.manifest()
    reader = DatasetReader(m)
    ids = np.random.default_rng(3).choice(len(m.records), 20, replace=False)
    flat_match, general = [], []
    for sid in ids:
        s = reader.sample(int(sid))
        base = reader.scene(s.scene_id).image
        flat = [Pose(p.x, p.y, 0.0) for p in s.true_poses]
        mosaic = assemble(extract_snapshots(base, flat, cfg.capture), flat, m.canvas_dims)
        cov = mosaic.coverage.grid
        flat_match.append(float(np.mean(mosaic.image[cov] == base[cov])))
        mosaic = assemble(s.snapshots, s.true_poses, m.canvas_dims)
        general.append(reconstruction_score(mosaic, base).exact_match_fraction)
    ok = min(flat_match) == 1.0 and min(general) >= 0.99
    report(3, ok, f"theta=0 min match {min(flat_match):.4f}, general-theta min match {min(general):.4f}")
    assert min(flat_match) == 1.0
    assert min(general) >= 0.99


# 4 ------------------------------------------------------------------------------


def test_criterion_4_noise_calibration(tmp_path):
    assert main(["calibrate-noise", "--target-iou", "0.80", "--out", str(tmp_path)]) == EXIT_OK
    result = json.loads((tmp_path / "calibration.json").read_text())
    sx, st = result["sigma_xy"], result["sigma_theta"]
    # fresh poses and noise, scored with the exact polygon IoU
    cap = CaptureConfig()
    true, noisy = [], []
    for i in range(10):
        poses = sample_poses(cap, (750, 520), 1000 + i)[:200]
        true.extend(poses)
        noisy.extend(perturb_poses(poses, sx, st, 2000 + i))
    iou = mean_pose_iou(poses_to_array(noisy), poses_to_array(true), (160, 110))
    ok = 0.78 <= iou <= 0.82 and len(true) == 2000
    report(4, ok, f"sigma_xy={sx:.3f} px, sigma_theta={st:.4f} rad, mean IoU over 2000 fresh poses {iou:.4f}")
    assert ok


# 5 ------------------------------------------------------------------------------


def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(0)
    t = np.column_stack([rng.uniform(0.1, 0.9, 500), rng.uniform(0.1, 0.9, 500), rng.uniform(0, 2.4, 500)])
    mse, _, r2 = regression_metrics(t, t)
    perfect = mse == (0.0, 0.0, 0.0) and r2 == (1.0, 1.0, 1.0)
    _, _, r2_mean = regression_metrics(np.broadcast_to(t.mean(axis=0), t.shape), t)
    mean_zero = bool(np.allclose(r2_mean, 0.0, atol=1e-12))

    cfg = preset("desk")
    ident = identity_report(cfg.manifest(), "test")
    n_snap = ident.n_samples * cfg.capture.snapshots_per_scene
    sigma2 = np.array(
        [(cfg.capture.sigma_xy / 750) ** 2, (cfg.capture.sigma_xy / 520) ** 2, cfg.capture.sigma_theta**2]
    )
    rel = np.abs(np.array(ident.mse) / sigma2 - 1)
    ok = perfect and mean_zero and n_snap >= 1000 and bool(np.all(rel <= 0.05))
    report(5, ok, f"perfect={perfect}, mean R2=0: {mean_zero}, identity MSE/sigma^2 deviation {np.round(rel, 4)} on {n_snap} snapshots")
    assert ok


# 6 ------------------------------------------------------------------------------


def test_criterion_6_gradient_check():
    t0 = time.perf_counter()
    worst = finite_difference_check(TINY, seed=1)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60 and TINY.K == 2 and TINY.snapshot_height == TINY.snapshot_width == 8
    report(6, ok, f"max relative error {worst:.2e} in {elapsed:.1f}s")
    assert ok


# 7 and 8 ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_ablation(tmp_path_factory):
    out = tmp_path_factory.mktemp("ablate")
    t0 = time.perf_counter()
    assert main(["ablate", "--preset", "desk", "--out", str(out)]) == EXIT_OK
    elapsed = time.perf_counter() - t0
    epochs = {}
    for variant in ("net_a", "net_b", "net_c", "ours"):
        history = (out / variant / "history.csv").read_text().strip().splitlines()
        epochs[variant] = len(history) - 1
    return out, elapsed, epochs


def _variant_report(out, variant: str) -> MetricsReport:
    return MetricsReport.from_dict(json.loads((out / variant / "metrics.json").read_text()))


@pytest.mark.slow
def test_criterion_7_desk_training_efficacy(desk_ablation):
    out, elapsed, epochs = desk_ablation
    cfg = preset("desk")
    ours = _variant_report(out, "ours")
    noisy = identity_report(cfg.manifest(), "test")
    sigma2 = np.array([(cfg.capture.sigma_xy / 750) ** 2, (cfg.capture.sigma_xy / 520) ** 2])
    ratio = np.array(ours.mse[:2]) / sigma2
    ok_mse = bool(np.all(ratio <= 0.25))
    ok_iou = ours.mean_iou > noisy.mean_iou
    ok = ok_mse and ok_iou and epochs["ours"] <= 50
    report(
        7,
        ok,
        f"x/y MSE = {ratio[0]:.3f} / {ratio[1]:.3f} x sigma^2 (need <= 0.25), IoU {ours.mean_iou:.4f} vs noisy "
        f"{noisy.mean_iou:.4f}, {epochs['ours']} epochs; ablation wall time {elapsed / 60:.1f} min",
    )
    assert ok_mse, f"x/y MSE ratios {ratio}"
    assert ok_iou
    assert epochs["ours"] <= 50


@pytest.mark.slow
def test_criterion_8_ablation_ordering(desk_ablation):
    out, _, _ = desk_ablation
    rows = (out / "table1.csv").read_text().strip().splitlines()[1:]
    assert [r.split(",")[0] for r in rows] == ["net_a", "net_b", "net_c", "ours"]
    ours, net_b = _variant_report(out, "ours"), _variant_report(out, "net_b")
    mse_better = [o < b for o, b in zip(ours.mse, net_b.mse)]
    iou_better = ours.mean_iou > net_b.mean_iou
    ok = all(mse_better) and iou_better
    report(
        8,
        ok,
        f"ours MSE {ours.mse} vs net_b {net_b.mse}; IoU {ours.mean_iou:.4f} vs {net_b.mean_iou:.4f}",
    )
    assert all(mse_better), f"ours MSE {ours.mse} vs net_b {net_b.mse}"
    assert iou_better


# 9 ------------------------------------------------------------------------------


def test_criterion_9_invariant_suite():
    t0 = time.perf_counter()
    checks = {}
    cap = CaptureConfig(snapshots_per_scene=16)
    dims = (750, 520)
    poses = sample_poses(cap, dims, 5)
    mask = render_coverage_mask(poses, cap, dims)
    shuffled = [poses[i] for i in np.random.default_rng(1).permutation(len(poses))]
    checks["mask permutation invariance"] = render_coverage_mask(shuffled, cap, dims) == mask
    w, h = cap.snapshot_width_px, cap.snapshot_height_px
    singles = [render_coverage_mask([p], cap, dims).count for p in poses]
    checks["mask count bounds"] = max(singles) <= mask.count <= sum(singles) and all(
        abs(n - w * h) <= w + h + 1 for n in singles
    )
    flat = render_coverage_mask([Pose(300.0, 200.0, 0.0)], cap, dims)
    checks["theta=0 footprint is exactly W*H"] = flat.count == w * h

    snap = (160, 110)
    a, b = Pose(300, 200, 0.4), Pose(330, 215, 0.55)
    ab = pose_iou(a, b, snap)
    a2, b2 = rotate_poses_rigidly([a, b], 1.1, 40.0, -25.0)
    checks["iou symmetry"] = math.isclose(ab, pose_iou(b, a, snap), abs_tol=1e-12)
    checks["iou rigid invariance"] = math.isclose(ab, pose_iou(a2, b2, snap), abs_tol=1e-9)
    checks["iou half-width shift = 1/3"] = math.isclose(pose_iou(Pose(300, 200, 0), Pose(380, 200, 0), snap), 1 / 3)

    from dataclasses import replace

    arch = replace(TINY, K=4)
    net = init_model(arch, 0).module()
    x = torch.rand(1, 4, 8, 8)
    base = net.enc_l.first_layer(x)
    m = arch.depthwise_channel_multiplier
    independent = True
    for k in range(4):
        y = x.clone()
        y[0, k] += 1.0
        changed = torch.nonzero((net.enc_l.first_layer(y) - base).abs().sum(dim=(0, 2, 3))).flatten().tolist()
        independent &= bool(changed) and set(changed) <= set(range(k * m, (k + 1) * m))
    checks["depthwise channel independence"] = independent

    s = make_sample(TINY, 2)
    w_a = init_model(replace(TINY, variant="net_a"), 0)
    blank = replace(s, snapshots=np.zeros_like(s.snapshots), mask=type(s.mask)(np.zeros_like(s.mask.grid)))
    checks["net_a ignores S and M"] = np.array_equal(forward(w_a, s), forward(w_a, blank))

    t = np.random.default_rng(0).random((6, 3))
    off = t.copy()
    off[:, 2] += 0.2
    checks["loss 1.05"] = math.isclose(pose_loss(t + 1.0, t), 1.05, rel_tol=1e-12)
    checks["loss 0.002"] = math.isclose(pose_loss(off, t), 0.002, rel_tol=1e-9)
    elapsed = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and elapsed < 300
    report(9, ok, f"{len(checks) - len(failed)}/{len(checks)} invariants hold in {elapsed:.1f}s" + (f"; failed {failed}" if failed else ""))
    assert not failed
    assert elapsed < 300
