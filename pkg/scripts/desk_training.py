"""Desk-scale learning experiment: FBP vs 2D U-Net vs 3D U-NetR at 32^3.

Generates the desk-synthetic dataset, trains the 3D network and the matched
2D baseline (same depth and width, slice-wise) with the preset's budget, and
prints held-out SSIM/PSNR tables plus the mean L1 of each method.

    python3 scripts/desk_training.py --root runs/desk [--epochs 300] [--threads 1]
"""

import argparse
import dataclasses
import json
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from ldct3d.cli import main as cli
from ldct3d.config import load_config
from ldct3d.metrics import format_table, report_volume, split_average
from ldct3d.model import load_checkpoint
from ldct3d.trainer import load_split, reconstruct, train


def held_out(params, spec, split, data_range):
    reports, l1 = [], []
    for name, x, y in zip(split.names, split.inputs, split.targets):
        out = reconstruct(params, spec, x)
        l1.append(float(np.mean(np.abs(out.astype(np.float64) - y))))
        reports.append(report_volume(out, y, data_range, name=name))
    return reports, float(np.mean(l1))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="desk-synthetic")
    ap.add_argument("--root", default="runs/desk")
    ap.add_argument("--epochs", type=int, help="override the preset's epoch budget")
    ap.add_argument("--threads", type=int)
    args = ap.parse_args()
    cfg = load_config(args.config)
    if args.epochs:
        cfg = cfg.replace("train", max_epochs=args.epochs)
    root = Path(args.root)
    common = ["-c", args.config, "--data-root", str(root)]
    if cli(["gen", *common]) or cli(["simulate", *common]):
        raise SystemExit("dataset generation failed")
    pairs = root / "pairs"
    tr, va, te = (load_split(pairs / s) for s in ("train", "val", "test"))
    dr = cfg.metrics.data_range
    methods, l1, timing = {}, {}, {}
    methods["FBP"], l1["FBP"] = held_out(None, None, te, dr)
    with threadpool_limits(limits=args.threads):
        for dims, label in ((3, "3D U-NetR"), (2, "U-Net")):
            spec = dataclasses.replace(cfg.model, dims=dims)
            t0 = time.perf_counter()
            result = train(spec, tr, va, cfg.train, root / f"unet{dims}d")
            timing[label] = time.perf_counter() - t0
            best_spec, params = load_checkpoint(root / f"unet{dims}d" / "best")
            methods[label], l1[label] = held_out(params, best_spec, te, dr)
            print(f"{label}: best epoch {result.best_epoch}, val L1 {result.best_val:.4f}, {timing[label] / 60:.1f} min")
    print(format_table(methods, "ssim"))
    print(format_table(methods, "psnr"))
    for m in methods:
        print(f"{m:>10}: held-out L1 {l1[m]:.5f}")
    summary = {
        m: {"psnr": split_average(r)["psnr"]["mean"], "ssim": split_average(r)["ssim"]["mean"], "l1": l1[m]}
        for m, r in methods.items()
    }
    summary["train_seconds"] = timing
    (root / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
