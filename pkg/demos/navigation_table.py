"""
Mean gates passed for every (variant, strategy) cell at both noise levels.

    python demos/navigation_table.py models [--tracks 6] [--trials 2] [--mc-samples 16]

``models`` must hold the probabilistic ensemble and the deterministic policy
(`bayesnav train --kind control --policy both`). The mi_mode cells dominate
the run time; lower ``--mc-samples`` to trade estimator noise for speed.
"""

import argparse
import time

from bayesnav import cli
from bayesnav.config import NOISE_HIGH, NOISE_LOW, TABLE_CELLS, RunConfig
from bayesnav.navigation import evaluate


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("models")
    ap.add_argument("--tracks", type=int, default=6)
    ap.add_argument("--trials", type=int, default=2)
    ap.add_argument("--mc-samples", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    models = cli.load_models(args.models, need_deterministic=True)
    print(f"{'model':6} {'strategy':9} {'low noise':>10} {'high noise':>11} {'time (s)':>9}")
    for vid, strategy in TABLE_CELLS:
        t0 = time.perf_counter()
        row = []
        for grn, ghn in (NOISE_LOW, NOISE_HIGH):
            run = RunConfig(seed=args.seed, grn=grn, ghn=ghn, n_tracks=args.tracks, trials=args.trials,
                            mc_samples=args.mc_samples)
            row.append(evaluate(models, vid, strategy, run)[0])
        print(f"{vid:6} {strategy:9} {row[0]:10.2f} {row[1]:11.2f} {time.perf_counter() - t0:9.0f}")


if __name__ == "__main__":
    main()
