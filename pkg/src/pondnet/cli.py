"""Command line entry point: ``pondnet <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .assembly import SENTINEL, assemble, reconstruction_score
from .calibrate import DEFAULT_THETA_PER_PX, calibrate_noise, measure_noise_iou
from .config import PRESETS, RunConfig, preset
from .dataset import DatasetManifest, DatasetReader, materialize
from .errors import ConfigError, PondnetError
from .geometry import array_to_poses
from .imageio import save_gray_png
from .metrics import denormalize_poses, table1_csv, table1_text
from .model import VARIANTS, ModelWeights, forward
from .scene import export_scene, generate_scene_batch
from .train import evaluate, identity_report, run_ablation, train

log = logging.getLogger("pondnet")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
INCOMPLETE = "INCOMPLETE"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- shared plumbing ---------------------------------------------------------------


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else preset(args.preset)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def load_manifest(args, cfg: RunConfig) -> tuple[RunConfig, DatasetManifest]:
    """The explicit ``--manifest`` wins; its data settings replace those of the config."""
    if getattr(args, "manifest", None):
        m = DatasetManifest.load(args.manifest)
        cfg = cfg.with_overrides(
            {
                "scene": m.scene_config.to_dict(),
                "capture": m.capture_config.to_dict(),
                "master_seed": m.master_seed,
            }
        )
        return cfg, m
    return cfg, cfg.manifest()


def provenance(cfg: RunConfig, command: str, extra: dict | None = None) -> dict:
    import torch

    record = {
        "command": command,
        "config": cfg.to_dict(),
        "config_sha256": cfg.config_hash(),
        "master_seed": cfg.master_seed,
        "init_seed": cfg.train.init_seed,
        "shuffle_seed": cfg.train.shuffle_seed,
        "versions": {
            "pondnet": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
    }
    if extra:
        record.update(extra)
    return record


def write_provenance(path: Path, record: dict) -> None:
    path.write_text(json.dumps(record, sort_keys=True, indent=1) + "\n")


class OutputDir:
    """Creates ``--out`` and keeps an ``INCOMPLETE`` marker there until the run succeeds."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def __enter__(self) -> Path:
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / INCOMPLETE).write_text("run did not finish; outputs in this directory may be partial\n")
        return self.path

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc_type is None:
            (self.path / INCOMPLETE).unlink(missing_ok=True)
        return False


def _add_config_args(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="built-in configuration (default: desk)")
    p.add_argument("--config", help="JSON run configuration; overrides --preset")
    if seed:
        p.add_argument("--seed", type=int, help="override the master seed")


# -- subcommands -----------------------------------------------------------------


def cmd_gen_scenes(args) -> int:
    cfg = load_config(args)
    count = args.count if args.count is not None else cfg.dataset.n_scenes
    with OutputDir(args.out) as out:
        for scene in generate_scene_batch(cfg.scene, count, cfg.master_seed):
            export_scene(scene, out / "scenes")
        cfg.save(out / "config.json")
        write_provenance(out / "provenance.json", provenance(cfg, "gen-scenes", {"count": count}))
    print(f"wrote {count} scenes to {Path(args.out) / 'scenes'}")
    return EXIT_OK


def cmd_gen_dataset(args) -> int:
    cfg = load_config(args)
    manifest = cfg.manifest()
    with OutputDir(args.out) as out:
        manifest.save(out / "manifest.json")
        if args.materialize:
            materialize(manifest, out)
        cfg.save(out / "config.json")
        extra = {"records": len(manifest.records), "materialized": bool(args.materialize)}
        write_provenance(out / "provenance.json", provenance(cfg, "gen-dataset", extra))
    print(
        f"manifest: {manifest.n_scenes} scenes x {manifest.capture_config.snapshots_per_scene} snapshots, "
        f"{len(manifest.split('train'))} train + {len(manifest.split('test'))} test records"
    )
    return EXIT_OK


def _train_config(args, cfg: RunConfig) -> RunConfig:
    over: dict = {}
    if getattr(args, "epochs", None) is not None:
        over.setdefault("train", {})["epochs"] = args.epochs
    if getattr(args, "variant", None):
        over["arch"] = {"variant": args.variant}
    return cfg.with_overrides(over) if over else cfg


def cmd_train(args) -> int:
    cfg = _train_config(args, load_config(args))
    cfg, manifest = load_manifest(args, cfg)
    with OutputDir(args.out) as out:
        weights, history = train(
            manifest,
            cfg.arch,
            cfg.train,
            out_dir=out,
            progress=lambda r: log.info("epoch %d train %.6g val %.6g", r.epoch, r.train_loss, r.val_loss),
        )
        weights.save(out / "weights.npz")
        history.write_csv(out / "history.csv")
        report = evaluate(weights, manifest, "test")
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n")
        cfg.save(out / "config.json")
        extra = {"best_epoch": history.best_epoch, "epochs_run": len(history.epochs)}
        write_provenance(out / "provenance.json", provenance(cfg, "train", extra))
    print(table1_text([(cfg.arch.variant, report)]))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    cfg, manifest = load_manifest(args, cfg)
    rows = []
    if args.weights:
        weights = ModelWeights.load(args.weights)
        rows.append((weights.arch.variant, evaluate(weights, manifest, args.split)))
    if args.identity or not args.weights:
        rows.append(("noisy", identity_report(manifest, args.split)))
    print(table1_text(rows))
    if args.out:
        with OutputDir(args.out) as out:
            (out / "metrics.json").write_text(json.dumps({n: r.to_dict() for n, r in rows}, indent=1) + "\n")
            extra = {"weights": args.weights, "split": args.split}
            write_provenance(out / "provenance.json", provenance(cfg, "evaluate", extra))
    return EXIT_OK


def _predicted_poses(weights_path: str, manifest: DatasetManifest, sample) -> np.ndarray:
    weights = ModelWeights.load(weights_path)
    return denormalize_poses(forward(weights, sample), manifest.canvas_dims)


def _poses_for(source: str, manifest: DatasetManifest, sample) -> tuple[np.ndarray, str]:
    if source == "noisy":
        return sample.noisy_array(), "noisy"
    if source == "true":
        return sample.true_array(), "true"
    if source.startswith("predicted:"):
        return _predicted_poses(source.split(":", 1)[1], manifest, sample), "predicted"
    raise UsageError(f"--poses must be noisy, true or predicted:WEIGHTS, got {source!r}")


def comparison_strip(panels: Sequence[np.ndarray], gap: int = 8) -> np.ndarray:
    h = panels[0].shape[0]
    sep = np.full((h, gap), SENTINEL, dtype=np.float32)
    parts = []
    for i, p in enumerate(panels):
        if i:
            parts.append(sep)
        parts.append(p.astype(np.float32))
    return np.concatenate(parts, axis=1)


def cmd_assemble(args) -> int:
    cfg = load_config(args)
    cfg, manifest = load_manifest(args, cfg)
    reader = DatasetReader(manifest)
    sample = reader.sample(args.sample_id)
    base = reader.scene(sample.scene_id).image
    dims = manifest.canvas_dims
    poses, source = _poses_for(args.poses, manifest, sample)
    mosaic = assemble(sample.snapshots, array_to_poses(poses), dims, source=source, blend=args.blend)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_gray_png(out, mosaic.image)
    score = reconstruction_score(mosaic, base)
    extra = {"sample_id": args.sample_id, "poses": args.poses, "score": asdict(score)}
    if args.strip:
        predicted = array_to_poses(_predicted_poses(args.strip, manifest, sample))
        panels = [
            assemble(sample.snapshots, sample.noisy_poses, dims, source="noisy", blend=args.blend).image,
            assemble(sample.snapshots, predicted, dims, source="predicted", blend=args.blend).image,
            assemble(sample.snapshots, sample.true_poses, dims, source="true", blend=args.blend).image,
        ]
        strip_path = out.with_name(out.stem + "_strip.png")
        save_gray_png(strip_path, comparison_strip(panels))
        extra["strip"] = str(strip_path)
    write_provenance(out.with_suffix(".provenance.json"), provenance(cfg, "assemble", extra))
    print(
        f"{source} mosaic: covered {score.covered_fraction:.3f}, exact match {score.exact_match_fraction:.4f}, "
        f"PSNR {score.psnr_on_covered:.2f} dB"
    )
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _train_config(args, load_config(args))
    cfg, manifest = load_manifest(args, cfg)
    variants = args.variants or list(VARIANTS)
    with OutputDir(args.out) as out:
        results = run_ablation(manifest, cfg.arch, cfg.train, variants, out_dir=out)
        rows = [(v, rep) for v, _, rep in results]
        (out / "table1.csv").write_text(table1_csv(rows))
        text = table1_text(rows + [("noisy", identity_report(manifest))])
        (out / "table1.txt").write_text(text + "\n")
        cfg.save(out / "config.json")
        write_provenance(out / "provenance.json", provenance(cfg, "ablate", {"variants": variants}))
    print(text)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = load_config(args)
    dims = (cfg.scene.canvas_width_px, cfg.scene.canvas_height_px)
    seed = args.seed if args.seed is not None else 0
    sx, st = calibrate_noise(
        cfg.capture,
        target_iou=args.target_iou,
        tolerance=args.tolerance,
        canvas_dims=dims,
        n_poses=args.n_poses,
        seed=seed,
        theta_per_px=args.theta_per_px,
    )
    iou = measure_noise_iou(cfg.capture, sx, st, dims, n_poses=args.n_poses, seed=seed)
    print(f"sigma_xy={sx:.4f} px sigma_theta={st:.5f} rad (measured mean IoU {iou:.4f})")
    if args.out:
        with OutputDir(args.out) as out:
            result = {"sigma_xy": sx, "sigma_theta": st, "measured_iou": iou, "target_iou": args.target_iou}
            (out / "calibration.json").write_text(json.dumps(result, indent=1) + "\n")
            write_provenance(out / "provenance.json", provenance(cfg, "calibrate-noise", result))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pondnet", description="Pond scene synthesis, pose denoising and evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--version", action="version", version=f"pondnet {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-scenes", help="render base scenes as PNG + JSON")
    _add_config_args(p)
    p.add_argument("--count", type=int, help="number of scenes (default: dataset.n_scenes)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("gen-dataset", help="write a dataset manifest, optionally materialized")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--materialize", action="store_true", help="also export every sample to disk")
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="train one variant")
    _add_config_args(p)
    p.add_argument("--manifest", help="dataset manifest (default: build from the config)")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score weights (or the noisy poses) on a split")
    _add_config_args(p)
    p.add_argument("--manifest")
    p.add_argument("--weights")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--identity", action="store_true", help="also report the noisy-pose baseline")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("assemble", help="paste a sample's snapshots onto the canvas")
    _add_config_args(p)
    p.add_argument("--manifest")
    p.add_argument("--sample-id", type=int, required=True)
    p.add_argument("--poses", default="noisy", help="noisy, true or predicted:WEIGHTS")
    p.add_argument("--blend", choices=("last", "mean"), default="last")
    p.add_argument("--strip", metavar="WEIGHTS", help="also write a noisy / predicted / true comparison strip")
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("ablate", help="train all variants and write table1.csv")
    _add_config_args(p)
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--variants", nargs="+", choices=VARIANTS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("calibrate-noise", help="find sigmas giving a target mean noisy IoU")
    _add_config_args(p)
    p.add_argument("--target-iou", type=float, default=0.80)
    p.add_argument("--tolerance", type=float, default=0.02)
    p.add_argument("--n-poses", type=int, default=2000)
    p.add_argument("--theta-per-px", type=float, default=DEFAULT_THETA_PER_PX)
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pondnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"pondnet: config error in {exc.field}: {str(exc).split(': ', 1)[-1]}", file=sys.stderr)
        return EXIT_CONFIG
    except (PondnetError, OSError, KeyError) as exc:
        print(f"pondnet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
