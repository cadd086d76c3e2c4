"""Command-line entry point: ``deepsent <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .bands import parse_band_list, sort_bands
from .config import CliConfig, ConfigError, load_config
from .degradation import Dataset, DegradationError, build_dataset, hr_patch_of
from .metrics import MetricsReport, artifact_heatmap, heatmap_to_u8, score_patch, write_pgm
from .network import forward_all_bands, save_model
from .paramfile import ParameterFileError
from .scene import (BandSeries, LoadError, SceneError, SceneStack, load_scene, read_manifest,
                    save_scene)
from .synthetic import synthetic_scene
from .training import (Checkpoint, DivergenceError, TrainingError, bicubic_baseline,
                       evaluate_split, load_any_model, train)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

CONFIG_ECHO = "config.json"
CHECKPOINT = "checkpoint.dpsnt"
BEST_MODEL = "model.dpsnt"
TRAIN_LOG = "train_log.jsonl"
LOSS_LOG = "loss_log.jsonl"

# band sets of the spectral ablation, each evaluated on the 10 m bands
ABLATION_BAND_SETS = {
    "single": None,
    "10m": "10m",
    "10m+60m": "10m,60m",
    "10m+20m": "10m,20m",
    "all": "all",
}

log = logging.getLogger("deepsent")


class UsageError(Exception):
    pass


def _prepare_out(path, force: bool, allow_existing: bool = False) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not allow_existing:
        if not force:
            raise UsageError(f"{out} already exists and is not empty (use --force to replace it)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: CliConfig, out: Path) -> None:
    (out / CONFIG_ECHO).write_text(cfg.dumps(), encoding="utf-8")


def _bands_arg(text):
    if text is None:
        return None
    try:
        bands = parse_band_list(text)
    except KeyError as exc:
        raise UsageError(f"unknown band in {text!r}: {exc}") from exc
    if not bands:
        raise UsageError("empty band list")
    return bands


# ---------------------------------------------------------------------------
# commands


def _read_hr_dir(path: Path) -> dict[str, dict[str, np.ndarray]]:
    """HR scenes from a scene container or a directory of them (one image per band)."""
    if (path / "manifest.json").is_file():
        dirs = [path]
    else:
        if not path.is_dir():
            raise FileNotFoundError(f"{path}: HR directory not found")
        dirs = sorted(p for p in path.iterdir() if (p / "manifest.json").is_file())
        if not dirs:
            raise FileNotFoundError(f"{path}: no scene containers found")
    scenes = {}
    for d in dirs:
        st = load_scene(d)
        if st.layout != "uniform":
            raise SceneError(f"{d}: HR scenes must hold every band on one grid (layout 'uniform')")
        scenes[st.scene_id] = hr_patch_of(st)
    return scenes


def cmd_synth_hr(args) -> int:
    out = _prepare_out(args.out, args.force)
    for i in range(args.n_scenes):
        hr = synthetic_scene(args.size, args.size, seed=args.seed * 1000 + i)
        st = SceneStack({b: BandSeries(b, v[None]) for b, v in hr.items()}, f"synth{i:03d}", "uniform")
        save_scene(st, out / st.scene_id)
    log.info("wrote %d synthetic HR scenes to %s", args.n_scenes, out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.simulation.degradation.seed = args.seed
    scenes = _read_hr_dir(Path(args.hr))
    out = _prepare_out(args.out, args.force)
    _echo_config(cfg, out)
    sim = cfg.simulation
    man = build_dataset(scenes, sim.patch_size, sim.split, sim.degradation, out)
    log.info("dataset: %s", {k: len(v) for k, v in man["splits"].items()})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    ds = Dataset(args.dataset)
    init = Checkpoint.load(args.resume) if args.resume else None
    resume_here = init is not None and Path(args.resume).resolve().parent == Path(args.out).resolve()
    out = _prepare_out(args.out, args.force, allow_existing=resume_here)
    if init is not None:
        cfg.network = init.model.config
    _echo_config(cfg, out)

    def on_epoch(entry, ckpt):
        ckpt.save(out / CHECKPOINT)
        save_model(ckpt.best_model(), out / BEST_MODEL, {"best_epoch": ckpt.state.best_epoch})

    ckpt = train(ds, cfg.training, cfg.network, init=init, log_path=out / TRAIN_LOG,
                 loss_log_path=out / LOSS_LOG, on_epoch=on_epoch)
    ckpt.save(out / CHECKPOINT)
    save_model(ckpt.best_model(), out / BEST_MODEL, {"best_epoch": ckpt.state.best_epoch})
    log.info("stopped after %d epochs (%s), best val %.6g at epoch %s", ckpt.state.epoch,
             ckpt.state.stopped or "step limit", ckpt.state.best_val or float("nan"), ckpt.state.best_epoch)
    return EXIT_OK


def _subset(stack: SceneStack, bands, n_images):
    if bands is not None:
        missing = [b for b in bands if b not in stack.series]
        if missing:
            raise UsageError(f"requested bands absent from the scene: {missing}")
    if n_images is not None:
        if n_images < 1:
            raise UsageError("--n-images must be >= 1")
        short = [b for b in (bands or stack.bands) if stack.series[b].n_images < n_images]
        if short:
            raise UsageError(f"bands with fewer than {n_images} images: {short}")
    return stack.subset(bands, n_images)


def cmd_super_resolve(args) -> int:
    model = load_any_model(args.model)
    stack = _subset(load_scene(args.scene), _bands_arg(args.bands), args.n_images)
    sr = forward_all_bands(stack, model)
    out = _prepare_out(args.out, args.force)
    save_scene(SceneStack({b: BandSeries(b, v[None]) for b, v in sr.items()},
                          stack.scene_id, "uniform"), out)
    log.info("super-resolved %d bands to %s", len(sr), out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    d = cfg.metrics.crop_border if args.d is None else args.d
    dr = cfg.metrics.dynamic_range
    if args.dataset:
        if not args.model:
            raise UsageError("--dataset needs --model (or 'bicubic')")
        model = bicubic_baseline if args.model == "bicubic" else load_any_model(args.model)
        report = evaluate_split(model, args.dataset, args.split, d, dr, args.n_images,
                                _bands_arg(args.bands), None, cfg.metrics.cssim, args.consistency)
    else:
        if not (args.pred and args.ref):
            raise UsageError("give --pred and --ref, or --dataset and --model")
        pred, ref = load_scene(args.pred), load_scene(args.ref)
        sr = {b: s.images[0] for b, s in pred.series.items()}
        hr = {b: s.images[0] for b, s in ref.series.items()}
        for b in sr:
            if b not in hr:
                raise UsageError(f"reference lacks band {b}")
            if sr[b].shape != hr[b].shape:
                raise UsageError(f"{b}: prediction {sr[b].shape} vs reference {hr[b].shape}")
        lr = load_scene(args.lr) if args.lr else None
        rows, patch = score_patch(pred.scene_id, sr, hr, d, dr, lr, cfg.metrics.cssim)
        report = MetricsReport(rows, [patch], {"d": d, "dynamic_range": dr})
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    report.save(args.out)
    agg = report.aggregates()
    for b, v in agg["band"].items():
        log.info("%s cPSNR %.3f dB", b, v["cpsnr"]["mean"])
    return EXIT_OK


def cmd_heatmap(args) -> int:
    stack = load_scene(args.scene)
    heat = artifact_heatmap(stack)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(heat.astype("<f4").tobytes())
    out.with_name(out.name + ".json").write_text(
        json.dumps({"height": heat.shape[0], "width": heat.shape[1], "dtype": "float32-le",
                    "scene_id": stack.scene_id}, indent=2), encoding="utf-8")
    write_pgm(out.with_suffix(".pgm"), heatmap_to_u8(heat))
    return EXIT_OK


def cmd_ablate(args) -> int:
    """Sweep the number of input images and the input band sets on one split."""
    cfg = load_config(args.config)
    d, dr = cfg.metrics.crop_border, cfg.metrics.dynamic_range
    model = load_any_model(args.model)
    ds = Dataset(args.dataset)
    n_max = min(read_manifest(ds.root / e.lr)["bands"][0]["n_images"] for e in ds.split(args.split))
    result = {"split": args.split, "n_images": {}, "band_sets": {}}
    for n in range(1, n_max + 1):
        rep = evaluate_split(model, ds, args.split, d, dr, n_images=n, with_ssim=False)
        result["n_images"][str(n)] = rep.mean_cpsnr()
    ten = parse_band_list("10m")
    for name, spec in ABLATION_BAND_SETS.items():
        if spec is None:
            vals = [evaluate_split(model, ds, args.split, d, dr, bands=[b], with_ssim=False).mean_cpsnr()
                    for b in ten]
            result["band_sets"][name] = float(np.mean(vals))
        else:
            rep = evaluate_split(model, ds, args.split, d, dr, bands=parse_band_list(spec),
                                 targets=ten, with_ssim=False)
            result["band_sets"][name] = rep.mean_cpsnr()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(result, indent=2), encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepsent", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-hr", help="write synthetic 12-band HR scenes")
    s.add_argument("--out", required=True)
    s.add_argument("--n-scenes", type=int, default=2)
    s.add_argument("--size", type=int, default=288)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth_hr)

    s = sub.add_parser("simulate", help="tile HR scenes and simulate LR stacks")
    s.add_argument("--hr", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train a network on a simulated dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--resume")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("super-resolve", help="super-resolve every band of a scene")
    s.add_argument("--model", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--bands", help="e.g. B02,B03 or 10m,20m or all")
    s.add_argument("--n-images", type=int)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_super_resolve)

    s = sub.add_parser("evaluate", help="score predictions against references")
    s.add_argument("--pred")
    s.add_argument("--ref")
    s.add_argument("--lr", help="LR scene for the consistency SAM")
    s.add_argument("--dataset")
    s.add_argument("--model", help="parameter file, checkpoint, or 'bicubic'")
    s.add_argument("--split", default="test")
    s.add_argument("--bands")
    s.add_argument("--n-images", type=int)
    s.add_argument("--consistency", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--d", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("heatmap", help="artifact heat-map of an LR scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("ablate", help="temporal and spectral ablation sweeps")
    s.add_argument("--model", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DegradationError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ParameterFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SceneError, TrainingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
