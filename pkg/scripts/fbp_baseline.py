"""FBP baseline on the synthetic test split (no training involved).

Regenerates the test volumes of a preset from their per-volume seeds,
simulates the low-dose FBP inputs exactly as ``ldct3d simulate`` does, and
prints the per-volume mean±std table with its Average row.

    python3 scripts/fbp_baseline.py [--config paper-synthetic] [--volumes 20] [--out fbp.json]
"""

import argparse
import time

from threadpoolctl import threadpool_limits

from ldct3d.cli import fbp_baseline_reports
from ldct3d.config import load_config
from ldct3d.metrics import format_table, save_reports, split_average


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="paper-synthetic")
    p.add_argument("--volumes", type=int, help="number of test volumes (default: whole split)")
    p.add_argument("--slice-step", type=int, default=1, help="score every k-th slice")
    p.add_argument("--threads", type=int)
    p.add_argument("--out", help="write the reports as JSON")
    args = p.parse_args()
    cfg = load_config(args.config)
    t0 = time.perf_counter()
    with threadpool_limits(limits=args.threads):
        reports = fbp_baseline_reports(cfg, args.volumes, args.slice_step)
    print(format_table({"FBP": reports}, "ssim"))
    print(format_table({"FBP": reports}, "psnr"))
    avg = split_average(reports)
    print(f"average PSNR {avg['psnr']['mean']:.2f} dB, SSIM {avg['ssim']['mean']:.2f} ({time.perf_counter() - t0:.0f} s)")
    if args.out:
        save_reports(reports, args.out, "FBP", {"config": cfg.to_dict(), "script": "fbp_baseline"})


if __name__ == "__main__":
    main()
