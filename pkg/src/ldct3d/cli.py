"""Command-line pipeline: gen -> simulate -> train -> eval -> report.

Every command writes a ``provenance.json`` next to its outputs (config
snapshot, seeds, package version, arguments; no timestamps). Exit codes:
0 success, 2 configuration error, 3 data error, 4 non-finite training loss.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .fbp import fbp_volume, simulate_fbp_input
from .metrics import format_table, load_reports, report_volume, save_reports
from .model import CheckpointError, load_checkpoint
from .phantom import generate_dataset, phantom_from_seed
from .trainer import NonFiniteLoss, evaluate, load_split, reconstruct, train
from .volume import (
    Volume3,
    VolumeFormatError,
    derive_seed,
    load_sinogram,
    load_volume,
    save_volume,
)

log = logging.getLogger("ldct3d")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SPLITS = ("train", "val", "test")


def _triple(text: str) -> tuple[int, ...]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if len(parts) == 1:
        parts = parts * 3
    return parts


def provenance(command: str, cfg: ExperimentConfig, args, extra=None) -> dict:
    argv = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items() if k != "func"}
    argv = {k: (str(v) if isinstance(v, Path) else v) for k, v in argv.items()}
    doc = {
        "command": command,
        "version": __version__,
        "numpy": np.__version__,
        "arguments": argv,
        "config": cfg.to_dict(),
        "extra": extra or {},
    }
    return doc


def _write_provenance(out_dir: Path, command: str, cfg: ExperimentConfig, args, extra=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = provenance(command, cfg, args, extra)
    (out_dir / "provenance.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def fbp_baseline_reports(cfg: ExperimentConfig, volumes: int | None = None, slice_step: int = 1):
    """FBP metric reports for the test split, regenerated in memory.

    Volumes, noise seeds and FBP inputs are identical to what ``gen`` followed
    by ``simulate`` writes for the test split (indices continue after train
    and val).
    """
    ds = cfg.dataset
    first = ds.n_train + ds.n_val
    count = ds.n_test if volumes is None else volumes
    reports = []
    for i in range(first, first + count):
        gt, _ = phantom_from_seed(cfg.phantom, derive_seed(ds.seed, i))
        noise = dataclasses.replace(cfg.noise, seed=derive_seed(cfg.noise.seed, i))
        rec = simulate_fbp_input(gt, cfg.geometry, noise, cfg.filter)
        sl = slice(None, None, slice_step)
        reports.append(
            report_volume(rec.data[sl], gt.data[sl], cfg.metrics.data_range, f"phantom_{i:04d}", cfg.metrics.constants)
        )
    return reports


# ------------------------------------------------------------------ commands


def cmd_gen(cfg: ExperimentConfig, args) -> int:
    ds = cfg.dataset
    n_train = ds.n_train if args.n_train is None else args.n_train
    n_val = ds.n_val if args.n_val is None else args.n_val
    n_test = ds.n_test if args.n_test is None else args.n_test
    seed = ds.seed if args.seed is None else args.seed
    out = Path(args.out) if args.out else cfg.path("phantoms")
    manifest = generate_dataset(cfg.phantom, out, n_train, n_val, n_test, seed=seed)
    _write_provenance(out, "gen", cfg, args, {"seed": seed, "volumes": len(manifest["volumes"])})
    print(f"wrote {len(manifest['volumes'])} volumes to {out}")
    return EXIT_OK


def _ground_truth(src: Path):
    """(split, name, path) for every ground-truth volume below src."""
    manifest = src / "manifest.json"
    if manifest.exists():
        vols = json.loads(manifest.read_text())["volumes"]
        return [(v["split"], name, src / v["split"] / name) for name, v in vols.items()]
    found = []
    for split in SPLITS:
        found += [(split, p.stem, p.with_suffix("")) for p in sorted((src / split).glob("*.json"))]
    if not found:
        raise FileNotFoundError(f"no ground-truth volumes under {src}")
    return found


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    if args.views is not None or args.detectors is not None:
        cfg = cfg.replace(
            "geometry",
            num_angles=args.views or cfg.geometry.num_angles,
            num_detectors=args.detectors or cfg.geometry.num_detectors,
        )
    if args.noise is not None:
        cfg = cfg.replace("noise", snr_db=float("inf") if args.noise == "none" else float(args.noise))
    if args.filter is not None:
        cfg = cfg.replace("filter", kind=args.filter)
    if args.freq_scale is not None:
        cfg = cfg.replace("filter", frequency_scaling=args.freq_scale)
    src = Path(args.input) if args.input else cfg.path("phantoms")
    out = Path(args.out) if args.out else cfg.path("pairs")
    seeds = {}
    for i, (split, name, path) in enumerate(_ground_truth(src)):
        gt = load_volume(path)
        noise = dataclasses.replace(cfg.noise, seed=derive_seed(cfg.noise.seed, i))
        rec = simulate_fbp_input(gt, cfg.geometry, noise, cfg.filter)
        save_volume(rec, out / split / f"{name}.input")
        save_volume(gt, out / split / f"{name}.target")
        seeds[name] = noise.seed
        log.info("simulated %s/%s", split, name)
    _write_provenance(out, "simulate", cfg, args, {"noise_seeds": seeds})
    print(f"wrote {len(seeds)} input/target pairs to {out}")
    return EXIT_OK


def _model_spec(cfg: ExperimentConfig, which: str):
    if which == "2d":
        return dataclasses.replace(cfg.model, dims=2)
    if which == "3d":
        return dataclasses.replace(cfg.model, dims=3)
    return cfg.model


def cmd_train(cfg: ExperimentConfig, args) -> int:
    spec = _model_spec(cfg, args.model)
    changes = {}
    if args.epochs is not None:
        changes["max_epochs"] = args.epochs
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.batch_size is not None:
        changes["batch_size"] = args.batch_size
    if changes:
        cfg = cfg.replace("train", **changes)
    pairs = Path(args.pairs) if args.pairs else cfg.path("pairs")
    out = Path(args.out) if args.out else cfg.path("runs") / f"unet{spec.dims}d"
    train_split = load_split(pairs / "train")
    val_dir = pairs / "val"
    val_split = load_split(val_dir) if val_dir.exists() and any(val_dir.glob("*.input.json")) else None
    _write_provenance(out, "train", dataclasses.replace(cfg, model=spec), args)
    result = train(spec, train_split, val_split, cfg.train, out)
    print(f"best epoch {result.best_epoch} val_l1 {result.best_val:.6f}; checkpoints in {out}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    pairs = Path(args.pairs) if args.pairs else cfg.path("pairs")
    split = load_split(pairs / args.split)
    if args.model == "none":
        checkpoint, method = None, "FBP"
    else:
        checkpoint = args.checkpoint or cfg.path("runs") / f"unet{args.model[0]}d" / "best"
        method = args.method or ("U-Net" if args.model == "2d" else "3D U-NetR")
    block = args.block or (cfg.stitch.block or None)
    margin = args.margin or (cfg.stitch.margin or None)
    data_range = args.data_range if args.data_range is not None else cfg.metrics.data_range
    reports = evaluate(checkpoint, split, data_range, block, margin, cfg.metrics.constants)
    out = Path(args.out) if args.out else cfg.path("reports") / f"{method.replace(' ', '_')}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_reports(reports, out, method, provenance("eval", cfg, args, {"checkpoint": str(checkpoint)}))
    print(format_table({method: reports}, "ssim"), end="")
    print(format_table({method: reports}, "psnr"), end="")
    return EXIT_OK


def cmd_reconstruct(cfg: ExperimentConfig, args) -> int:
    if args.sinogram:
        sino = load_sinogram(args.volume)
        n = args.size or sino.geometry.num_detectors
        vol = fbp_volume(sino, cfg.filter, n)
    else:
        vol = load_volume(args.volume)
    if args.model == "none":
        result = vol.data
    else:
        checkpoint = args.checkpoint or cfg.path("runs") / f"unet{args.model[0]}d" / "best"
        spec, params = load_checkpoint(checkpoint)
        block = args.block or (cfg.stitch.block or None)
        margin = args.margin or (cfg.stitch.margin or None)
        result = reconstruct(params, spec, vol.data, block, margin)
    out = Path(args.output)
    save_volume(Volume3(np.asarray(result, dtype=np.float32), vol.spacing), out)
    _write_provenance(out.parent, "reconstruct", cfg, args)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, args) -> int:
    methods = {}
    for path in args.reports:
        name, reports = load_reports(path)
        methods[name] = reports
    if not methods:
        raise FileNotFoundError("no report files given")
    metrics = ("ssim", "psnr") if args.metric == "both" else (args.metric,)
    for m in metrics:
        print(format_table(methods, m, args.label))
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", default=argparse.SUPPRESS, help="config file or preset name (default: paper-synthetic)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="cap BLAS/OpenMP threads; 1 is bit-reproducible")
    common.add_argument("--data-root", default=argparse.SUPPRESS, help="override paths.data_root")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="ldct3d", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate ellipsoid phantoms")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-val", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("simulate", parents=[common], help="project, add noise, FBP -> input/target pairs")
    s.add_argument("--in", dest="input")
    s.add_argument("--out")
    s.add_argument("--views", type=int)
    s.add_argument("--detectors", type=int)
    s.add_argument("--noise", help="SNR in dB or 'none'")
    s.add_argument("--filter", choices=["ramp", "hann", "hamming"])
    s.add_argument("--freq-scale", type=float)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", parents=[common], help="train the post-processing network")
    t.add_argument("--model", choices=["2d", "3d"], default="3d")
    t.add_argument("--pairs")
    t.add_argument("--out")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score FBP or a checkpoint on a split")
    e.add_argument("--model", choices=["none", "2d", "3d"], default="3d")
    e.add_argument("--checkpoint")
    e.add_argument("--method", help="column name in the report")
    e.add_argument("--pairs")
    e.add_argument("--split", default="test", choices=SPLITS)
    e.add_argument("--out")
    e.add_argument("--block", type=_triple)
    e.add_argument("--margin", type=_triple)
    e.add_argument("--data-range", type=lambda v: v if v in ("slice", "volume") else float(v))
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("reconstruct", parents=[common], help="apply a checkpoint to one volume")
    r.add_argument("volume", help="input volume (or sinogram with --sinogram), path without extension")
    r.add_argument("output", help="output volume path without extension")
    r.add_argument("--model", choices=["none", "2d", "3d"], default="3d")
    r.add_argument("--checkpoint")
    r.add_argument("--sinogram", action="store_true", help="input is a sinogram stack; run FBP first")
    r.add_argument("--size", type=int, help="FBP output size (default: detector count)")
    r.add_argument("--block", type=_triple, help="z,y,x block; 0 means the full axis")
    r.add_argument("--margin", type=_triple, help="z,y,x context voxels (default 70 on blocked axes)")
    r.set_defaults(func=cmd_reconstruct)

    rp = sub.add_parser("report", parents=[common], help="render report files as mean±std tables")
    rp.add_argument("reports", nargs="+")
    rp.add_argument("--metric", choices=["ssim", "psnr", "rmse", "both"], default="both")
    rp.add_argument("--label", default="Phantom")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(getattr(args, "config", "paper-synthetic"))
        if getattr(args, "data_root", None):
            cfg = cfg.replace("paths", data_root=args.data_root)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    threads = getattr(args, "threads", None)
    try:
        with threadpool_limits(limits=threads):
            return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, VolumeFormatError, CheckpointError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
