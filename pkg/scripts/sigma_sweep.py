"""Noise-scale sweep of the gradient-robust attack on a finished standard-ensemble run.

Reuses the foundation, victims, evaluation inputs and victim reference
perturbations stored under ``--run`` and reports, per sigma, the median victim
feature distance and the median cosine to the victim white-box perturbation.

    python scripts/sigma_sweep.py --run runs/standard --sigmas 0 0.25 0.5 1 2 8
"""
import argparse
from pathlib import Path

import numpy as np

from umigrat import analysis, attacks, data, models
from umigrat.config import load_config
from umigrat.runner import Runner, sub_seed

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "standard_ensemble.ini"))
    ap.add_argument("--run", help="output directory of a finished run (defaults to the config's)")
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 0.25, 0.5, 1.0, 2.0, 8.0])
    args = ap.parse_args()

    cfg = load_config(args.config)
    if args.run:
        cfg.experiment.output = args.run
    runner = Runner(cfg)
    budget = runner.budget()
    a = cfg.attack
    print("seed  sigma  victim_distance  cosine_to_white_box")
    for seed in cfg.seeds():
        p = runner.paths(seed)
        f = models.load_model(p["foundation"])
        x, _ = data.load_dataset(p["eval"])
        victims = [models.load_model(p[f"victim{i}"]) for i, _ in enumerate(cfg.victims.kinds)]
        refs = [attacks.load_perturbation(p[f"ref{i}"]) for i, _ in enumerate(cfg.victims.kinds)]
        start = attacks.random_start(x, a.start_radius255 / 255, sub_seed(seed, "start"))
        for sigma in args.sigmas:
            pert, _ = attacks.gr_attack(f, x, budget, start, sigma, sub_seed(seed, "noise"))
            rep = analysis.transfer_gap(pert, f, victims, x)
            dist = np.median(np.concatenate(list(rep.victim_distance.values())))
            cos = np.median(np.concatenate([analysis.rowwise_cosine(pert.delta, r.delta) for r in refs]))
            print(f"{seed:4d}  {sigma:5.2f}  {dist:15.4f}  {cos:19.4f}", flush=True)


if __name__ == "__main__":
    main()
