"""
Two gates side by side at equal range: print how the m0 stack spreads its
lateral-velocity prediction and what each decision strategy commands.

    python demos/double_gate.py models            # a directory written by `bayesnav train`
    python demos/double_gate.py                   # trains a small stack first (a few minutes)
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from bayesnav import cli
from bayesnav.decision import MixtureDensity1D, extract_modes


def small_stack(work):
    run = lambda *a: cli.main([str(x) for x in a])
    run("gen-data", "--kind", "perception", "--count", 10000, "--seed", 1, "--out", work / "p.jsonl")
    run("gen-data", "--kind", "control", "--count", 4000, "--seed", 2, "--out", work / "c.jsonl")
    run("train", "--kind", "perception", "--data", work / "p.jsonl", "--out", work / "models", "--epochs", 60)
    run("train", "--kind", "control", "--data", work / "c.jsonl", "--out", work / "models",
        "--policy", "probabilistic")
    return work / "models"


def bar(p, width=50):
    return "#" * int(round(width * p))


def main(models_dir):
    models = cli.load_models(models_dir)
    rep = cli.density_report(models, cli.scenario_observation("double_gate"), "m0", seed=0)
    grid, dens, per_member = rep["densities"][1]
    pset, sel = rep["pset"], rep["selected"]

    print("lateral velocity density over all 160 components (gates at left and right)")
    for i in range(0, len(grid), len(grid) // 32):
        print(f"{grid[i]:+6.2f} {bar(dens[i] / dens.max())}")
    print("modes:", [round(m, 2) for m, _ in rep["modes"][1]])

    print("\nper-member mean lateral velocity and MI score")
    for n in range(pset.n_members):
        mark = "  <- selected" if n == sel else ""
        print(f"  member {n}: {pset.mu[n, :, 1].mean():+.2f}  score {rep['mi_scores'][n].sum():.3f}{mark}")
    member = MixtureDensity1D.uniform(pset.mu[sel, :, 1], pset.var[sel, :, 1])
    print("selected member modes:", [round(m, 2) for m, _ in extract_modes(member)])

    print(f"\nde_mean command vy {rep['de_mean'].vy:+.2f} (mean of all 160 components)")
    print(f"mi_mode command vy {rep['mi_mode'].vy:+.2f} (mode of the selected member)")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        main(Path(sys.argv[1]))
    else:
        with tempfile.TemporaryDirectory() as tmp:
            main(small_stack(Path(tmp)))
