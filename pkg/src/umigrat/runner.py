"""Config-driven experiment pipeline with fingerprint-keyed resumable stages.

Every replicate seed gets its own directory with datasets, models, the UMI
and the attack outputs. A stage is skipped when its outputs exist, their file
hashes match the manifest and the stage key (config slice plus upstream
fingerprints) is unchanged. Downstream stages always read their inputs back
from disk, so a resumed run sees exactly what a fresh run sees.

Reports under ``reports/`` contain no timings; wall-clock numbers live in the
manifest only.
"""
from __future__ import annotations

import json
import time
import warnings
from pathlib import Path

import numpy as np

from umigrat import __version__, analysis, attacks, data, models, persist, umi
from umigrat.config import FOUNDATION_HOLDOUT, ExperimentConfig

STAGES = ("make-data", "build-foundation", "derive-victims", "umi-train", "attack", "analyze")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage} failed: {message}")
        self.stage = stage


def sub_seed(seed: int, tag: str) -> int:
    """Deterministic 31-bit seed for a named stream of a replicate."""
    return persist.fnv1a64(f"{seed}:{tag}".encode()) & 0x7FFFFFFF


def file_hash(path) -> str:
    return f"{persist.fnv1a64(Path(path).read_bytes()):016x}"


def _key(material) -> str:
    return f"{persist.fnv1a64(json.dumps(material, sort_keys=True, default=str).encode()):016x}"


def _num(v):
    """Report number formatting: shortest round-trip repr, NaN as empty."""
    v = float(v)
    return "" if not np.isfinite(v) else repr(v)


def _median(a):
    a = np.asarray(a, dtype=np.float64)
    a = a[np.isfinite(a)]
    return float(np.median(a)) if a.size else float("nan")


class Runner:
    def __init__(self, cfg: ExperimentConfig, log=None):
        self.cfg = cfg
        self.root = Path(cfg.experiment.output)
        self.log = log or (lambda msg: None)
        self.manifest_path = self.root / "manifest.json"
        self.manifest = {"artifacts": {}, "stages": {}, "timings": {}, "efficiency": {}}
        if self.manifest_path.exists():
            try:
                loaded = json.loads(self.manifest_path.read_text(encoding="utf-8"))
                for k in self.manifest:
                    self.manifest[k].update(loaded.get(k, {}))
            except (OSError, ValueError):
                self.log("manifest unreadable; recomputing everything")
        self.status = {}  # stage id -> "computed" | "cached" in this invocation

    # ------------------------------------------------------------------ plumbing
    def _rel(self, path) -> str:
        return Path(path).relative_to(self.root).as_posix()

    def _save_manifest(self):
        self.manifest["tool_version"] = __version__
        persist.write_json(self.manifest_path, self.manifest)

    def _stage(self, stage_id: str, material, outputs, compute):
        """Run ``compute`` unless every output is present and matches the manifest."""
        key = _key(material)
        rec = self.manifest["stages"].get(stage_id)
        if rec and rec.get("key") == key and self._outputs_valid(outputs):
            self.status.setdefault(stage_id, "cached")
            return
        t0 = time.perf_counter()
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                extra = compute() or {}
        except (StageError, KeyboardInterrupt):
            raise
        except Exception as exc:  # noqa: BLE001 - reported with the stage name
            for p in outputs:
                self.manifest["artifacts"].pop(self._rel(p), None)
            self.manifest["stages"].pop(stage_id, None)
            self._save_manifest()
            raise StageError(stage_id, f"{type(exc).__name__}: {exc}") from exc
        for p in outputs:
            entry = {"stage": stage_id, "file_hash": file_hash(p)}
            fp = persist.artifact_fingerprint(p)
            if fp is not None:
                entry["fingerprint"] = fp
            self.manifest["artifacts"][self._rel(p)] = entry
        self.manifest["stages"][stage_id] = {
            "key": key, "outputs": [self._rel(p) for p in outputs],
            "warnings": sorted({str(w.message) for w in caught}),
        }
        self.manifest["timings"][stage_id] = time.perf_counter() - t0
        for table, entries in extra.get("efficiency", {}).items():
            self.manifest["efficiency"].setdefault(table, {}).update(entries)
        self.status[stage_id] = "computed"
        self._save_manifest()

    def _outputs_valid(self, outputs) -> bool:
        for p in outputs:
            entry = self.manifest["artifacts"].get(self._rel(p))
            if entry is None or not Path(p).exists():
                return False
            if file_hash(p) != entry["file_hash"]:
                return False
        return True

    def _fp(self, path) -> str:
        return self.manifest["artifacts"][self._rel(path)]["file_hash"]

    # ------------------------------------------------------------------ layout
    def seed_dir(self, seed) -> Path:
        return self.root / f"seed_{seed}"

    def paths(self, seed) -> dict:
        d = self.seed_dir(seed)
        p = {
            "natural": d / "data" / "natural.umgr",
            "shifted": d / "data" / "shifted.umgr",
            "eval": d / "data" / "eval.umgr",
            "holdout": d / "data" / "holdout.umgr",
            "foundation": d / "models" / "foundation.umgr",
            "y_tilde": d / "models" / "mean_embedding.umgr",
            "umi": d / "umi" / "umi.umgr",
        }
        for i, _ in enumerate(self.cfg.victims.kinds):
            p[f"victim{i}"] = d / "models" / f"victim{i}.umgr"
            p[f"delta{i}"] = d / "models" / f"delta{i}.umgr"
            p[f"ref{i}"] = d / "attacks" / f"reference_victim{i}.umgr"
        for m in self.cfg.attack.methods:
            p[f"attack:{m}"] = d / "attacks" / f"{m}.umgr"
            p[f"trace:{m}"] = d / "traces" / f"{m}.csv"
        return p

    def victim_names(self) -> list:
        return [f"victim{i}:{k}" for i, k in enumerate(self.cfg.victims.kinds)]

    def budget(self) -> attacks.AttackBudget:
        a = self.cfg.attack
        return attacks.AttackBudget.from_255(a.eps255, a.alpha255, iterations=a.iters, p=a.p,
                                             momentum_decay=a.momentum_decay)

    def _specs(self, seed):
        d = self.cfg.data
        shape = tuple(d.shape)
        natural = data.DatasetSpec(kind="natural", count=d.natural_count, shape=shape, seed=seed)
        holdout = data.DatasetSpec(kind="natural", count=d.holdout_count, shape=shape,
                                   seed=sub_seed(seed, "holdout"))
        shift = dict(gamma=d.gamma, band=(d.band_low, d.band_high), band_gain=d.band_gain)
        ft_base = data.DatasetSpec(kind="natural", count=d.shifted_count, shape=shape,
                                   seed=sub_seed(seed, "downstream"))
        ev_base = data.DatasetSpec(kind="natural", count=d.eval_count, shape=shape,
                                   seed=sub_seed(seed, "eval"))
        shifted = data.DatasetSpec(kind="shifted", count=d.shifted_count, shape=shape,
                                   seed=ft_base.seed, **shift)
        ev = data.DatasetSpec(kind="shifted", count=d.eval_count, shape=shape, seed=ev_base.seed, **shift)
        return {"natural": (natural, None), "holdout": (holdout, None),
                "shifted": (shifted, ft_base), "eval": (ev, ev_base)}

    # ------------------------------------------------------------------ stages
    def make_data(self, seed):
        p = self.paths(seed)
        specs = self._specs(seed)

        def compute():
            for name, (spec, base) in specs.items():
                data.save_dataset(p[name], data.make_dataset(spec, base), spec)

        material = {"stage": "make-data", "seed": seed, "data": vars(self.cfg.data)}
        self._stage(f"make-data/{seed}", material, [p[n] for n in specs], compute)

    def build_foundation(self, seed):
        self.make_data(seed)
        p = self.paths(seed)
        f = self.cfg.foundation
        arch = models.ArchConfig(depth=f.depth, width=f.width, embed_dim=f.embed_dim, act=f.act,
                                 noise=f.noise, epochs=f.epochs, lr=f.lr, holdout=FOUNDATION_HOLDOUT,
                                 input_shape=tuple(self.cfg.data.shape))

        def compute():
            nat, _ = data.load_dataset(p["natural"])
            model = models.build_foundation(arch, nat, seed=seed)
            models.save_model(p["foundation"], model, seed=seed)

        material = {"stage": "build-foundation", "seed": seed, "foundation": vars(f),
                    "natural": self._fp(p["natural"])}
        self._stage(f"build-foundation/{seed}", material, [p["foundation"]], compute)

    def derive_victims(self, seed):
        self.build_foundation(seed)
        p = self.paths(seed)
        v = self.cfg.victims
        outputs = []
        for i, _ in enumerate(v.kinds):
            outputs += [p[f"victim{i}"], p[f"delta{i}"]]

        def compute():
            base = models.load_model(p["foundation"])
            shifted, _ = data.load_dataset(p["shifted"])
            targets = data.task_targets(shifted, tuple(self.cfg.data.shape))
            ft = models.FinetuneConfig(rank=v.rank, steps=v.steps, lr=v.lr)
            for i, kind in enumerate(v.kinds):
                mode, _, strength = kind.partition(":")
                victim, delta = models.derive_victim(base, mode, float(strength), sub_seed(seed, f"victim{i}"),
                                                     data=shifted, targets=targets, rank=v.rank, cfg=ft)
                models.save_model(p[f"victim{i}"], victim, seed=seed)
                models.save_delta(p[f"delta{i}"], delta, seed=seed)

        material = {"stage": "derive-victims", "seed": seed, "victims": vars(v),
                    "foundation": self._fp(p["foundation"]), "shifted": self._fp(p["shifted"])}
        self._stage(f"derive-victims/{seed}", material, outputs, compute)

    def umi_train(self, seed):
        self.build_foundation(seed)
        p = self.paths(seed)
        u = self.cfg.umi

        def compute():
            model = models.load_model(p["foundation"])
            nat, _ = data.load_dataset(p["natural"])
            conf = umi.UmiConfig(rounds=u.rounds, eta=u.eta, inner_steps=u.inner_steps,
                                 lam=u.lam if u.lam > 0 else None, lam_fraction=u.lam_fraction,
                                 phases=u.phases, holdout=u.holdout, init_radius=u.init_radius255 / 255)
            art = umi.train_umi(model, nat[:self.cfg.data.umi_count], conf, self.budget(), seed=seed)
            umi.save_umi(p["umi"], art, seed=seed)

        material = {"stage": "umi-train", "seed": seed, "umi": vars(u), "attack": self._budget_material(),
                    "umi_count": self.cfg.data.umi_count,
                    "foundation": self._fp(p["foundation"]), "natural": self._fp(p["natural"])}
        self._stage(f"umi-train/{seed}", material, [p["umi"]], compute)

    def _budget_material(self):
        a = self.cfg.attack
        return {"eps255": a.eps255, "alpha255": a.alpha255, "iters": a.iters, "p": a.p,
                "momentum_decay": a.momentum_decay}

    def attack(self, seed):
        self.derive_victims(seed)
        self.umi_train(seed)
        p = self.paths(seed)
        a = self.cfg.attack
        methods = list(a.methods)
        outputs = [p[f"attack:{m}"] for m in methods] + [p[f"trace:{m}"] for m in methods]
        outputs += [p[f"ref{i}"] for i, _ in enumerate(self.cfg.victims.kinds)]
        outputs.append(p["y_tilde"])

        def compute():
            budget = self.budget()
            f = models.load_model(p["foundation"])
            x, _ = data.load_dataset(p["eval"])
            nat, _ = data.load_dataset(p["natural"])
            art = umi.load_umi(p["umi"])
            y_tilde = data.natural_mean_embedding(f, nat, cache_path=p["y_tilde"])
            start = attacks.random_start(x, a.start_radius255 / 255, sub_seed(seed, "start"))
            noise_seed = sub_seed(seed, "noise")
            momentum = a.momentum_decay if a.grat_momentum else None
            eff = {}
            for m in methods:
                if m == "ifgsm":
                    pert, trace = attacks.ifgsm(f, x, budget, start)
                elif m == "mifgsm":
                    pert, trace = attacks.mifgsm(f, x, budget, start)
                elif m == "grat":
                    pert, trace = attacks.gr_attack(f, x, budget, start, a.sigma, noise_seed)
                elif m == "umi-grat":
                    pert, trace = attacks.gr_attack(f, x, budget, art, a.sigma, noise_seed, y_tilde=y_tilde,
                                                    alpha_adp=a.alpha_adp255 / 255, direction=a.direction,
                                                    momentum=momentum)
                else:  # umi+mifgsm
                    pert, trace = attacks.mifgsm(f, x, budget, np.broadcast_to(art.delta, x.shape))
                attacks.save_perturbation(p[f"attack:{m}"], pert, seed=seed)
                persist.write_csv(p[f"trace:{m}"], ["iteration", "mean_loss", "max_step_norm", "seconds"],
                                  attacks.trace_rows(trace))
                eff[f"{seed}/{m}"] = float(np.sum(trace.wall_clock)) / len(x)
            ref_attack = attacks.ifgsm if self.cfg.analysis.reference == "ifgsm" else attacks.mifgsm
            for i, _ in enumerate(self.cfg.victims.kinds):
                victim = models.load_model(p[f"victim{i}"])
                pert, _ = ref_attack(victim, x, budget, start)
                attacks.save_perturbation(p[f"ref{i}"], pert, seed=seed)
            return {"efficiency": {"seconds_per_example": eff}}

        material = {"stage": "attack", "seed": seed, "attack": vars(a), "reference": self.cfg.analysis.reference,
                    "upstream": [self._fp(p[k]) for k in ("foundation", "eval", "natural", "umi")]
                    + [self._fp(p[f"victim{i}"]) for i, _ in enumerate(self.cfg.victims.kinds)]}
        self._stage(f"attack/{seed}", material, outputs, compute)

    # ------------------------------------------------------------------ analysis
    def analysis_rows(self, seed, which):
        """Per-input report rows of one replicate for the requested report kind."""
        p = self.paths(seed)
        f = models.load_model(p["foundation"])
        x, _ = data.load_dataset(p["eval"])
        victims = {name: models.load_model(p[f"victim{i}"]) for i, name in enumerate(self.victim_names())}
        perts = {m: attacks.load_perturbation(p[f"attack:{m}"]) for m in self.cfg.attack.methods}
        rows = []
        budget_p = self.cfg.attack.p
        if which == "transfer":
            for m, pert in perts.items():
                rep = analysis.transfer_gap(pert, f, victims, x, budget_p)
                for name in victims:
                    for j in range(len(x)):
                        rows.append([seed, name, m, j, _num(rep.surrogate_distance[j]),
                                     _num(rep.victim_distance[name][j]), _num(rep.drop_ratio[name][j])])
        elif which == "cosine":
            for i, name in enumerate(victims):
                ref = attacks.load_perturbation(p[f"ref{i}"])
                for m, pert in perts.items():
                    cos = analysis.rowwise_cosine(pert.delta, ref.delta)
                    for j in range(len(x)):
                        rows.append([seed, name, m, j, _num(cos[j])])
        elif which == "deviation":
            k = min(self.cfg.analysis.deviation_inputs, len(x))
            ref_pert = perts.get("mifgsm") or next(iter(perts.values()))
            for i, name in enumerate(victims):
                victim = victims[name]
                delta = models.load_delta(p[f"delta{i}"])
                emb_c = victim.embed(x[:k], collect_intermediates=False)[0]
                emb_a = victim.embed(x[:k] + ref_pert.delta[:k], collect_intermediates=False)[0]
                for j in range(k):
                    g = emb_a[j] - emb_c[j]
                    n = np.linalg.norm(g)
                    g = g / n if n > 0 else g
                    rep = analysis.deviation(f, victim, delta, x[j], g, check_delta=False)
                    rows.append([seed, name, j, _num(rep.norms["deviation"]), _num(rep.norms["gap"]),
                                 _num(rep.norms["residual"]), _num(rep.cos_deviation_gap),
                                 _num(rep.cos_victim_surrogate), _num(rep.chain_rule_error)])
        elif which == "umi":
            rows = self._umi_rows(seed, f)
        return rows

    def _umi_rows(self, seed, f):
        p = self.paths(seed)
        art = umi.load_umi(p["umi"])
        hold, _ = data.load_dataset(p["holdout"])
        rng = np.random.default_rng(sub_seed(seed, "random-umi"))
        r = rng.uniform(-1.0, 1.0, art.delta.shape)
        r = r / np.abs(r).max() * np.abs(art.delta).max()
        rows = [[seed, "fooling_rate_umi", _num(umi.fooling_rate(art.delta, f, hold, art.lam, art.p))],
                [seed, "fooling_rate_random", _num(umi.fooling_rate(r, f, hold, art.lam, art.p))],
                [seed, "lambda", _num(art.lam)],
                [seed, "fooling_rate_at_train", _num(art.fooling_rate_at_train)]]
        a = self.cfg.attack
        xs = hold[:min(len(hold), self.cfg.data.eval_count)]
        for steps in (1, 3):
            b = attacks.AttackBudget.from_255(a.eps255, a.alpha255, iterations=steps, p=a.p)
            _, tu = attacks.gr_attack(f, xs, b, art, a.sigma, sub_seed(seed, "noise"))
            _, tz = attacks.gr_attack(f, xs, b, None, a.sigma, sub_seed(seed, "noise"))
            rows.append([seed, f"surrogate_loss_umi_T{steps}", _num(np.median(tu.best_loss))])
            rows.append([seed, f"surrogate_loss_zero_T{steps}", _num(np.median(tz.best_loss))])
        return rows

    HEADERS = {
        "transfer": ["seed", "victim", "method", "input", "surrogate_loss", "victim_loss", "drop_ratio"],
        "cosine": ["seed", "victim", "method", "input", "cosine_to_reference"],
        "deviation": ["seed", "victim", "input", "deviation_norm", "gap_norm", "residual_norm",
                      "cos_deviation_gap", "cos_victim_surrogate", "chain_rule_error"],
        "umi": ["seed", "metric", "value"],
    }

    def report_path(self, which) -> Path:
        return self.root / "reports" / f"{which}.csv"

    def analyze(self, which=None):
        which = list(which or self.cfg.analysis.reports)
        for seed in self.cfg.seeds():
            self.attack(seed)
        upstream = []
        for seed in self.cfg.seeds():
            p = self.paths(seed)
            keys = ["foundation", "eval", "holdout", "umi"] + [f"attack:{m}" for m in self.cfg.attack.methods]
            keys += [f"victim{i}" for i, _ in enumerate(self.cfg.victims.kinds)]
            keys += [f"ref{i}" for i, _ in enumerate(self.cfg.victims.kinds)]
            keys += [f"delta{i}" for i, _ in enumerate(self.cfg.victims.kinds)]
            upstream.append({k: self._fp(p[k]) for k in keys})
        for w in which:
            path = self.report_path(w)

            def compute(w=w, path=path):
                rows = []
                for seed in self.cfg.seeds():
                    rows += self.analysis_rows(seed, w)
                persist.write_csv(path, self.HEADERS[w], rows)

            material = {"stage": "analyze", "report": w, "upstream": upstream, "victims": self.victim_names(),
                        "analysis": vars(self.cfg.analysis), "attack": vars(self.cfg.attack)}
            self._stage(f"analyze/{w}", material, [path], compute)
        self.summarize()

    def summarize(self):
        path = self.root / "reports" / "summary.json"
        present = [w for w in self.HEADERS if self.report_path(w).exists()
                   and self._rel(self.report_path(w)) in self.manifest["artifacts"]]
        inputs = {self._rel(self.report_path(w)): self._fp(self.report_path(w)) for w in present}

        def compute():
            summary = {"seeds": self.cfg.seeds(), "victims": self.victim_names(), "methods": list(self.cfg.attack.methods),
                       "source_reports": inputs, "artifacts": self._artifact_index()}
            for w in present:
                summary[w] = summarize_report(w, read_report(self.report_path(w)))
            persist.write_json(path, summary)

        self._stage("summary", {"inputs": inputs, "artifacts": self._artifact_index()}, [path], compute)

    def _artifact_index(self):
        out = {}
        for rel, entry in sorted(self.manifest["artifacts"].items()):
            if rel.startswith("reports/") or "/traces/" in rel or "fingerprint" not in entry:
                continue
            out[rel] = entry["fingerprint"]
        return out

    def run(self, until: str = "analyze", reports=None):
        if until not in STAGES:
            raise ValueError(f"unknown stage {until!r}")
        steps = {
            "make-data": self.make_data, "build-foundation": self.build_foundation,
            "derive-victims": self.derive_victims, "umi-train": self.umi_train, "attack": self.attack,
        }
        if until == "analyze":
            self.analyze(reports)
        else:
            for seed in self.cfg.seeds():
                self.log(f"seed {seed}: {until}")
                steps[until](seed)
        return self.status


# ---------------------------------------------------------------------- summaries

def read_report(path) -> list:
    import csv
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _f(s):
    return float(s) if s != "" else float("nan")


def _group(rows, keys, value):
    out = {}
    for r in rows:
        out.setdefault(tuple(r[k] for k in keys), []).append(_f(r[value]))
    return out


def summarize_report(which, rows) -> dict:
    """Per-seed medians and the seed counts of the directional comparisons."""
    if which == "transfer":
        pooled_loss = _group(rows, ["seed", "method"], "victim_loss")
        pooled_ratio = _group(rows, ["seed", "method"], "drop_ratio")
        pooled_sur = _group(rows, ["seed", "method"], "surrogate_loss")
        per_v = _group(rows, ["seed", "victim", "method"], "victim_loss")
        per_vr = _group(rows, ["seed", "victim", "method"], "drop_ratio")
        res = {"median_victim_loss": {}, "median_drop_ratio": {}, "median_surrogate_loss": {},
               "per_victim": {}}
        for (seed, m), v in sorted(pooled_loss.items()):
            res["median_victim_loss"].setdefault(seed, {})[m] = _median(v)
            res["median_drop_ratio"].setdefault(seed, {})[m] = _median(pooled_ratio[(seed, m)])
            res["median_surrogate_loss"].setdefault(seed, {})[m] = _median(pooled_sur[(seed, m)])
        for (seed, victim, m), v in sorted(per_v.items()):
            d = res["per_victim"].setdefault(seed, {}).setdefault(victim, {})
            d[m] = {"victim_loss": _median(v), "drop_ratio": _median(per_vr[(seed, victim, m)])}
        res["comparisons"] = _seed_wins(res, "umi-grat", "mifgsm", ["median_victim_loss", "median_drop_ratio"])
        return res
    if which == "cosine":
        pooled = _group(rows, ["seed", "method"], "cosine_to_reference")
        per_v = _group(rows, ["seed", "victim", "method"], "cosine_to_reference")
        res = {"median_cosine": {}, "per_victim": {}}
        for (seed, m), v in sorted(pooled.items()):
            res["median_cosine"].setdefault(seed, {})[m] = _median(v)
        for (seed, victim, m), v in sorted(per_v.items()):
            res["per_victim"].setdefault(seed, {}).setdefault(victim, {})[m] = _median(v)
        res["comparisons"] = _seed_wins(res, "grat", "ifgsm", ["median_cosine"])
        return res
    if which == "deviation":
        res = {}
        for col in ("deviation_norm", "gap_norm", "residual_norm", "cos_deviation_gap", "chain_rule_error"):
            for (seed, victim), v in sorted(_group(rows, ["seed", "victim"], col).items()):
                res.setdefault(seed, {}).setdefault(victim, {})[col] = _median(v)
        return res
    if which == "umi":
        res = {}
        for r in rows:
            res.setdefault(r["seed"], {})[r["metric"]] = _f(r["value"])
        return res
    raise ValueError(which)


def _seed_wins(res, a, b, metrics):
    out = {}
    for metric in metrics:
        table = res[metric]
        if not all(a in v and b in v for v in table.values()):
            continue
        wins = [seed for seed, v in table.items() if v[a] > v[b]]
        out[f"{metric}:{a}>{b}"] = {"seeds_won": len(wins), "seeds": len(table)}
    return out
