#!/usr/bin/env python3
"""Run a sweep config and print per-setting means over seeds.

    python scripts/run_sweep.py scripts/configs/map_count_2d.toml
    python scripts/run_sweep.py scripts/configs/noise_2d.toml --iterations 500
    python scripts/run_sweep.py --summarize runs/map_count_2d/summary.csv
"""
import argparse
import csv
import re
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from fiberfield.cli import main as cli_main
from fiberfield.config import load_config

STATS = ("fiber_error_mean_deg", "fiber_error_median_deg", "rmse_ms", "unseen_rmse_ms")


def summarize(path: Path) -> None:
    groups = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            setting = re.sub(r"_s\d+$", "", row["experiment"])
            groups[(setting, row["method"], row["region"])].append(row)
    print(f"{'setting':<28}{'method':<10}{'region':<8}{'n':>3}"
          + "".join(f"{k[:-3] if k.endswith('_deg') else k:>22}" for k in STATS))
    for (setting, method, region), rows in sorted(groups.items()):
        vals = []
        for k in STATS:
            x = np.array([float(r[k]) if r[k] else np.nan for r in rows])
            vals.append(np.nanmean(x) if np.isfinite(x).any() else np.nan)
        print(f"{setting:<28}{method:<10}{region:<8}{len(rows):>3}"
              + "".join(f"{v:>22.4g}" for v in vals))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", nargs="?")
    ap.add_argument("--summarize", type=Path, help="only summarize an existing summary.csv")
    ap.add_argument("--iterations", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("-o", "--output")
    args = ap.parse_args()
    if args.summarize:
        summarize(args.summarize)
        return 0
    if not args.config:
        ap.error("a config file is required")
    argv = ["sweep", "-c", args.config]
    for flag in ("iterations", "workers", "output"):
        if getattr(args, flag) is not None:
            argv += [f"--{flag}", str(getattr(args, flag))]
    code = cli_main(argv)
    out = Path(args.output or load_config(args.config).output)
    if (out / "summary.csv").exists():
        summarize(out / "summary.csv")
    return code


if __name__ == "__main__":
    sys.exit(main())
