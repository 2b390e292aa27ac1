"""Run the shipped standard-ensemble config and print the directional comparisons.

    python scripts/run_standard_ensemble.py [--config configs/standard_ensemble.ini] [--output runs/standard]
"""
import argparse
import json
import time
from pathlib import Path

from umigrat.config import load_config
from umigrat.runner import Runner

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "standard_ensemble.ini"))
    ap.add_argument("--output", help="output directory (defaults to the config's)")
    args = ap.parse_args()

    cfg = load_config(args.config)
    if args.output:
        cfg.experiment.output = args.output
    t0 = time.perf_counter()
    runner = Runner(cfg, log=print)
    runner.run("analyze")
    elapsed = time.perf_counter() - t0
    summary = json.loads((runner.root / "reports" / "summary.json").read_text())

    tr = summary["transfer"]
    print(f"\nseeds {summary['seeds']}, victims {summary['victims']}, wall clock {elapsed:.1f}s")
    print("\nmedian victim feature distance (pooled over victims) / median drop ratio")
    methods = summary["methods"]
    print("seed  " + "  ".join(f"{m:>19s}" for m in methods))
    for seed in sorted(tr["median_victim_loss"]):
        cells = [f"{tr['median_victim_loss'][seed][m]:.4f} / {tr['median_drop_ratio'][seed][m]:.4f}" for m in methods]
        print(f"{seed:>4s}  " + "  ".join(f"{c:>19s}" for c in cells))
    print("\nmedian cosine to the victim white-box perturbation")
    for seed, row in sorted(summary["cosine"]["median_cosine"].items()):
        print(f"{seed:>4s}  " + "  ".join(f"{m}={row[m]:.4f}" for m in methods))
    print("\nUMI held-out fooling rate vs norm-matched random")
    for seed, row in sorted(summary["umi"].items()):
        print(f"{seed:>4s}  umi={row['fooling_rate_umi']:.3f}  random={row['fooling_rate_random']:.3f}  "
              f"lambda={row['lambda']:.4f}")
    print("\nseed counts")
    for block in ("transfer", "cosine"):
        for name, c in summary[block]["comparisons"].items():
            print(f"  {name}: {c['seeds_won']}/{c['seeds']}")


if __name__ == "__main__":
    main()
