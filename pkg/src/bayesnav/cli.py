"""
Command line entry point.

    bayesnav gen-data --kind perception --count 30000 --seed 1 --out data/perception.jsonl
    bayesnav train --kind perception --data data/perception.jsonl --out models
    bayesnav train --kind control --data data/control.jsonl --out models
    bayesnav evaluate --variant m0 --strategy mi-mode --grn 1.5 --ghn 3.0 --models models --out runs/m0_mi_hi
    bayesnav density --scenario double_gate --variant m0 --models models --out double_gate.csv

Every run writes a JSON manifest next to its output holding the argument
vector, the resolved configuration and all seeds. Exit codes: 0 success,
2 usage or compatibility error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, datasets, sim
from .config import DE_MEAN, MI_MODE, VARIANTS, RunConfig, check_compatible, derive_seed
from .control import DETERMINISTIC, PROBABILISTIC, Ensemble, encode_dataset, ensemble_predict, train_ensemble
from .decision import (DEFAULT_GRID_N, DEFAULT_MC_SAMPLES, SIGNED_MIN, SMALLEST_ABS, MixtureDensity1D, de_mean,
                       extract_modes, mi_lower_bound, mi_mode_command, mixture_pdf, select_member_min_mi)
from .errors import NumericDomainError, UnsupportedStrategyError
from .navigation import Models, evaluate
from .nn_core import TrainConfig
from .perception import DEFAULT_BETA, DEFAULT_DROPOUT, PerceptionModel, sample_latents, train_cmvae_lite

log = logging.getLogger("bayesnav")

MANIFEST_FORMAT_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
CMD_NAMES = ("vx", "vy", "vz", "yaw_rate")

PERCEPTION_FILE = "perception.json"
ENSEMBLE_DIR = "ensemble"
DETERMINISTIC_DIR = "deterministic"

# default training epochs per model kind
PERCEPTION_EPOCHS = 150
POLICY_EPOCHS = 40
DEFAULT_MEMBERS = 5


class UsageError(Exception):
    pass


# scenarios ------------------------------------------------------------------

def _scenario_gates(name):
    """Body-frame (position, relative yaw) pairs for the built-in density scenarios."""
    if name == "double_gate":
        # two gates side by side at equal range: either one is a valid target
        return [(np.array([6.0, 1.6, 0.0]), 0.0), (np.array([6.0, -1.6, 0.0]), 0.0)]
    if name == "single_gate":
        return [(np.array([5.0, 0.0, 0.0]), 0.0)]
    raise UsageError(f"unknown scenario {name!r}; choose one of {sorted(SCENARIOS)}")


SCENARIOS = ("double_gate", "single_gate")


def scenario_observation(name):
    return sim.observation_from_gates(_scenario_gates(name), noise_on=False)


# persistence helpers ----------------------------------------------------------

def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, command, args, seeds, outputs):
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "package_version": __version__,
        "command": command,
        "argv": args.argv,
        "config": {k: (str(v) if isinstance(v, Path) else v) for k, v in cfg.items() if k != "argv"},
        "seeds": seeds,
        "outputs": {str(p): _sha256(p) for p in outputs if Path(p).is_file()},
    }
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_models(directory, need_deterministic=False) -> Models:
    directory = Path(directory)
    pfile = directory / PERCEPTION_FILE
    if not pfile.is_file():
        raise UsageError(f"no perception model at {pfile}; run `train --kind perception` first")
    perception = PerceptionModel.load(pfile)
    ens = det = None
    if (directory / ENSEMBLE_DIR / "ensemble.json").is_file():
        ens = Ensemble.load(directory / ENSEMBLE_DIR)
    if (directory / DETERMINISTIC_DIR / "ensemble.json").is_file():
        det = Ensemble.load(directory / DETERMINISTIC_DIR)
    if ens is None:
        raise UsageError(f"no probabilistic ensemble under {directory / ENSEMBLE_DIR}")
    if need_deterministic and det is None:
        raise UsageError(f"no deterministic policy under {directory / DETERMINISTIC_DIR}")
    return Models(perception, ens, det)


def _strategy(name):
    return {"mi-mode": MI_MODE, "de-mean": DE_MEAN, MI_MODE: MI_MODE, DE_MEAN: DE_MEAN}[name]


# subcommands ----------------------------------------------------------------

def cmd_gen_data(args):
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    out = Path(args.out)
    if not out.parent.is_dir():
        raise UsageError(f"output directory {out.parent} does not exist")
    feats, targets = datasets.generate(args.kind, args.count, args.seed)
    datasets.save_dataset(out, args.kind, feats, targets, args.seed)
    write_manifest(str(out) + ".manifest.json", "gen-data", args, {"data": args.seed}, [out])
    log.info("wrote %d %s records to %s", len(feats), args.kind, out)


def _train_config(args, default_epochs):
    return TrainConfig(epochs=args.epochs or default_epochs, batch_size=args.batch_size,
                       learning_rate=args.lr, seed=args.seed)


def cmd_train(args):
    header, feats, targets = _load_data(args.data)
    if header["kind"] != args.kind:
        raise UsageError(f"{args.data} holds {header['kind']} data, not {args.kind}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    if args.kind == datasets.PERCEPTION:
        cfg = _train_config(args, PERCEPTION_EPOCHS)
        model = train_cmvae_lite((feats, targets), cfg, beta=args.beta, dropout_rate=args.dropout)
        model.save(out / PERCEPTION_FILE)
        metrics = dict(model.metrics)
        outputs.append(out / PERCEPTION_FILE)
        seeds = {"training": cfg.seed}
    else:
        pfile = Path(args.perception) if args.perception else out / PERCEPTION_FILE
        if not pfile.is_file():
            raise UsageError(f"training control needs a perception model; none at {pfile}")
        perception = PerceptionModel.load(pfile)
        cfg = _train_config(args, POLICY_EPOCHS)
        z = encode_dataset(perception, feats)
        metrics = {"perception": str(pfile)}
        seeds = {"training": cfg.seed}
        kinds = [PROBABILISTIC, DETERMINISTIC] if args.policy == "both" else [args.policy]
        for kind in kinds:
            n = args.members if kind == PROBABILISTIC else 1
            ens = train_ensemble(z, targets, n, cfg, kind=kind)
            sub = out / (ENSEMBLE_DIR if kind == PROBABILISTIC else DETERMINISTIC_DIR)
            ens.save(sub)
            outputs += [sub / "ensemble.json"] + [sub / f"member_{i}.json" for i in range(len(ens))]
            metrics[kind] = ens.metrics
            seeds[f"{kind}_members"] = [m.seed for m in ens.members]
    metrics_path = out / f"metrics_{args.kind}.json"
    metrics_path.write_text(json.dumps(_jsonable(metrics), indent=1, sort_keys=True) + "\n")
    outputs.append(metrics_path)
    write_manifest(out / f"manifest_train_{args.kind}.json", "train", args, seeds, outputs)
    log.info("training finished; outputs in %s", out)


def _load_data(path):
    try:
        return datasets.load_dataset(path)
    except FileNotFoundError:
        raise UsageError(f"dataset {path} not found") from None


def cmd_evaluate(args):
    strategy = _strategy(args.strategy)
    variant = check_compatible(args.variant, strategy)
    run = RunConfig(seed=args.seed, grn=args.grn, ghn=args.ghn, n_tracks=args.tracks, trials=args.trials,
                    mc_samples=args.mc_samples, grid_n=args.grid_n, mode_rule=args.mode_rule)
    models = load_models(args.models, need_deterministic=variant.policy_kind == DETERMINISTIC)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mean, rows = evaluate(models, variant, strategy, run, record=args.logs)
    outputs = []
    if args.logs:
        (out / "logs").mkdir(exist_ok=True)
        for r in rows:
            p = out / "logs" / f"track{r['track']}_trial{r['trial']}.jsonl"
            sim.write_episode_log(r["result"], p)
            outputs.append(p)
    table = [{k: v for k, v in r.items() if k != "result"} for r in rows]
    with open(out / "episodes.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]))
        w.writeheader()
        w.writerows(table)
    metrics = {"variant": variant.id, "strategy": strategy, "grn": run.grn, "ghn": run.ghn,
               "n_tracks": run.n_tracks, "trials": run.trials, "cps": variant.cps,
               "mean_gates_passed": mean, "episodes": table}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    outputs += [out / "episodes.csv", out / "metrics.json"]
    seeds = {"evaluation": run.seed, "tracks": sorted({r["track_seed"] for r in rows}),
             "inference": [r["inference_seed"] for r in rows]}
    write_manifest(out / "manifest.json", "evaluate", args, seeds, outputs)
    print(f"{variant.id}/{strategy} grn={run.grn} ghn={run.ghn}: mean gates passed {mean:.2f}")


def density_report(models: Models, obs, variant, seed, mc_samples=DEFAULT_MC_SAMPLES, grid_n=DEFAULT_GRID_N,
                   mode_rule=SMALLEST_ABS):
    """Latent samples, component densities, MI scores and both strategies' commands for one observation."""
    variant = check_compatible(variant, MI_MODE)
    ens = models.ensemble_for(variant)
    latents = sample_latents(models.perception, obs, variant.M, variant.perception_mode,
                             np.random.default_rng(derive_seed(seed, "latents")))
    pset = ensemble_predict(ens, latents)
    scores = mi_lower_bound(pset, mc_samples, np.random.default_rng(derive_seed(seed, "mi")))
    sel = select_member_min_mi(scores)
    report = {
        "latents": latents.samples,
        "pset": pset,
        "mi_scores": scores.per_member_per_dim,
        "selected": sel,
        "de_mean": de_mean(pset)[0],
        "mi_mode": mi_mode_command(pset, sel, grid_n, mode_rule),
        "densities": [],
        "modes": [],
    }
    for d in range(pset.mu.shape[2]):
        mix = MixtureDensity1D.uniform(pset.mu[:, :, d].ravel(), pset.var[:, :, d].ravel())
        sd = math.sqrt(mix.vars.max())
        grid = np.linspace(mix.means.min() - 3 * sd, mix.means.max() + 3 * sd, grid_n)
        per_member = [mixture_pdf(MixtureDensity1D.uniform(pset.mu[n, :, d], pset.var[n, :, d]), grid)
                      for n in range(pset.n_members)]
        report["densities"].append((grid, mixture_pdf(mix, grid), per_member))
        report["modes"].append(extract_modes(mix, grid_n))
    return report


def cmd_density(args):
    if (args.scenario is None) == (args.record is None):
        raise UsageError("give exactly one of --scenario or --record")
    if args.scenario is not None:
        obs = scenario_observation(args.scenario)
    else:
        _, feats, _ = _load_data(args.record)
        if not 0 <= args.index < len(feats):
            raise UsageError(f"--index {args.index} outside 0..{len(feats) - 1}")
        obs = feats[args.index]
    variant = check_compatible(args.variant, MI_MODE)
    models = load_models(args.models)
    rep = density_report(models, obs, variant, args.seed, args.mc_samples, args.grid_n, args.mode_rule)
    out = Path(args.out)
    write_density_csv(out, rep)
    write_manifest(str(out) + ".manifest.json", "density", args,
                   {"density": args.seed, "latents": derive_seed(args.seed, "latents"),
                    "mi": derive_seed(args.seed, "mi")}, [out])
    vy_modes = [round(m[0], 3) for m in rep["modes"][1]]
    print(f"selected member {rep['selected']}; vy modes {vy_modes}; "
          f"de_mean vy {rep['de_mean'].vy:.3f}; mi_mode vy {rep['mi_mode'].vy:.3f}")


def write_density_csv(path, rep):
    """Long-format CSV: record, dimension, member, index, x, value.

    latent     one row per latent sample m and coordinate (x empty, value z)
    component  one row per (member, latent) Gaussian (x mean, value variance)
    density    mixture (member "all") and per-member densities on the grid
    mode       extracted modes of the full mixture (x location, value density)
    mi         per-member per-dimension MI lower bound
    command    each strategy's command (member holds the strategy name)
    """
    fmt = lambda v: repr(float(v))
    pset = rep["pset"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record", "dimension", "member", "index", "x", "value"])
        for m, z in enumerate(rep["latents"]):
            for d, v in enumerate(z):
                w.writerow(["latent", f"z{d}", "", m, "", fmt(v)])
        for d, name in enumerate(CMD_NAMES):
            for n in range(pset.n_members):
                for m in range(pset.n_latents):
                    w.writerow(["component", name, n, m, fmt(pset.mu[n, m, d]), fmt(pset.var[n, m, d])])
            grid, total, per_member = rep["densities"][d]
            for i, (y, p) in enumerate(zip(grid, total)):
                w.writerow(["density", name, "all", i, fmt(y), fmt(p)])
            for n, pm in enumerate(per_member):
                for i, (y, p) in enumerate(zip(grid, pm)):
                    w.writerow(["density", name, n, i, fmt(y), fmt(p)])
            for i, (y, p) in enumerate(rep["modes"][d]):
                w.writerow(["mode", name, "all", i, fmt(y), fmt(p)])
            for n in range(pset.n_members):
                w.writerow(["mi", name, n, "", "", fmt(rep["mi_scores"][n, d])])
        for strat in (DE_MEAN, MI_MODE):
            for d, v in enumerate(rep[strat].as_array()):
                w.writerow(["command", CMD_NAMES[d], strat, "", "", fmt(v)])
        w.writerow(["selected", "", rep["selected"], "", "", ""])


def read_density_csv(path):
    """Parse a density CSV back into plain dictionaries (for analysis and tests)."""
    out = {"latent": [], "component": {}, "density": {}, "mode": {}, "mi": {}, "command": {}, "selected": None}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec, dim = row["record"], row["dimension"]
            if rec == "latent":
                out["latent"].append(float(row["value"]))
            elif rec == "component":
                out["component"].setdefault(dim, []).append((int(row["member"]), int(row["index"]),
                                                             float(row["x"]), float(row["value"])))
            elif rec == "density":
                out["density"].setdefault((dim, row["member"]), []).append((float(row["x"]), float(row["value"])))
            elif rec == "mode":
                out["mode"].setdefault(dim, []).append(float(row["x"]))
            elif rec == "mi":
                out["mi"][(dim, int(row["member"]))] = float(row["value"])
            elif rec == "command":
                out["command"][(row["member"], dim)] = float(row["value"])
            elif rec == "selected":
                out["selected"] = int(row["member"])
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# parser -----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="bayesnav", description="Uncertainty-aware gate navigation toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-v info, -vv debug)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a perception or control dataset")
    g.add_argument("--kind", choices=[datasets.PERCEPTION, datasets.CONTROL], required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0, help="data seed")
    g.add_argument("--out", required=True, help="output .jsonl path")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the perception model or the control policies")
    t.add_argument("--kind", choices=[datasets.PERCEPTION, datasets.CONTROL], required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="model directory")
    t.add_argument("--perception", help="perception model for control training (default: <out>/perception.json)")
    t.add_argument("--policy", choices=[PROBABILISTIC, DETERMINISTIC, "both"], default="both")
    t.add_argument("--members", type=int, default=DEFAULT_MEMBERS, help="probabilistic ensemble size")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--beta", type=float, default=DEFAULT_BETA, help="KL weight (perception)")
    t.add_argument("--dropout", type=float, default=DEFAULT_DROPOUT, help="encoder dropout rate (perception)")
    t.add_argument("--seed", type=int, default=0, help="training seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="fly a variant/strategy cell over seeded tracks")
    _variant_args(e)
    e.add_argument("--strategy", choices=["mi-mode", "de-mean"], required=True)
    e.add_argument("--grn", type=float, default=1.0)
    e.add_argument("--ghn", type=float, default=2.0)
    e.add_argument("--tracks", type=int, default=6)
    e.add_argument("--trials", type=int, default=2)
    e.add_argument("--logs", action="store_true", help="write per-episode JSONL logs")
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_evaluate)

    d = sub.add_parser("density", help="export latent and command densities for one observation")
    _variant_args(d)
    d.add_argument("--scenario", choices=SCENARIOS)
    d.add_argument("--record", help="dataset .jsonl to take the observation from")
    d.add_argument("--index", type=int, default=0, help="record index within --record")
    d.add_argument("--out", required=True, help="output .csv path")
    d.set_defaults(func=cmd_density)
    return p


def _variant_args(p):
    p.add_argument("--variant", choices=sorted(VARIANTS), default="m0")
    p.add_argument("--models", default="models", help="model directory")
    p.add_argument("--seed", type=int, default=0, help="evaluation seed")
    p.add_argument("--mc-samples", type=int, default=DEFAULT_MC_SAMPLES)
    p.add_argument("--grid-n", type=int, default=DEFAULT_GRID_N)
    p.add_argument("--mode-rule", choices=[SMALLEST_ABS, SIGNED_MIN], default=SMALLEST_ABS)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    args.argv = argv
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, UnsupportedStrategyError) as exc:
        print(f"bayesnav: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericDomainError, FloatingPointError) as exc:
        print(f"bayesnav: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"bayesnav: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
