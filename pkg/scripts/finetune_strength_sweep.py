"""Transfer to fine-tuned victims as the fine-tuning budget grows.

One foundation and one UMI are trained; victims are fine-tuned on a shifted
domain at each strength and attacked from held-out shifted inputs. Prints the
median victim feature distance and drop ratio of MI-FGSM, the gradient-robust
attack with momentum from a random start, and UMI-GRAT.

    python scripts/finetune_strength_sweep.py --strengths 0.1 0.4 --seeds 3
"""
import argparse

from umigrat import analysis, attacks, data, models, umi


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--strengths", type=float, nargs="+", default=[0.1, 0.4])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--sigma", type=float, default=0.5)
    ap.add_argument("--eval", type=int, default=100)
    ap.add_argument("--foundation-seed", type=int, default=1)
    args = ap.parse_args()

    natural = data.sample_natural(data.DatasetSpec(count=2000, seed=args.foundation_seed))
    f = models.build_foundation(models.ArchConfig(), natural, seed=args.foundation_seed)
    art = umi.train_umi(f, natural[:1000], umi.UmiConfig(), seed=args.foundation_seed)
    y_tilde = data.natural_mean_embedding(f, natural)
    budget = attacks.AttackBudget()

    n_ft = 500
    base = data.DatasetSpec(count=n_ft + args.eval, seed=args.foundation_seed + 1)
    shifted = data.sample_shifted(data.DatasetSpec(kind="shifted", count=n_ft + args.eval, seed=base.seed,
                                                   gamma=2.2, band=(0.6, 4.0), band_gain=1.5), base)
    targets = data.task_targets(shifted, (16, 16))
    x = shifted[n_ft:]

    print("strength seed  |delta|  " + "  ".join(f"{m:>17s}" for m in ("mifgsm", "grat+momentum", "umi-grat")))
    for strength in args.strengths:
        steps = int(150 * max(1.0, strength / 0.1) ** 0.5)
        wins = 0
        for s in range(args.seeds):
            victim, delta = models.derive_victim(f, "finetune", strength, seed=s, data=shifted[:n_ft],
                                                 targets=targets[:n_ft], cfg=models.FinetuneConfig(steps=steps))
            start = attacks.random_start(x, 1 / 255, s)
            perts = {
                "mifgsm": attacks.mifgsm(f, x, budget, start)[0],
                "grat+momentum": attacks.gr_attack(f, x, budget, start, args.sigma, seed=s, momentum=1.0)[0],
                "umi-grat": attacks.gr_attack(f, x, budget, art, args.sigma, seed=s, y_tilde=y_tilde,
                                              momentum=1.0)[0],
            }
            cells, med = [], {}
            for name, pert in perts.items():
                rep = analysis.transfer_gap(pert, f, {"v": victim}, x)
                med[name] = rep.medians["v"]
                cells.append(f"{rep.medians['v']:.4f}/{rep.medians['v_drop_ratio']:.3f}")
            wins += med["grat+momentum"] > med["mifgsm"]
            print(f"{strength:8.2f} {s:4d}  {delta.magnitude:7.3f}  " + "  ".join(f"{c:>17s}" for c in cells),
                  flush=True)
        print(f"  strength {strength}: grat+momentum beats mifgsm on victim distance in {wins}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
