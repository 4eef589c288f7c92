"""Ablation sweep on the standard dynamic scene.

    python3 scripts/ablation_sweep.py --seeds 20 --out results/ablation.csv
    python3 scripts/ablation_sweep.py --seeds 6 --configs full,no_uba

Writes one row per (config, seed) and prints per-config medians.
"""

import argparse
from pathlib import Path

import numpy as np

from dynba.experiments import records_to_csv, run_standard
from dynba.pipeline import ABLATIONS

CONFIGS = ("full",) + ABLATIONS


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--configs", default=",".join(CONFIGS))
    p.add_argument("--out", default="results/ablation.csv")
    args = p.parse_args()
    configs = [c for c in args.configs.split(",") if c]
    records = []
    for name in configs:
        abl = () if name == "full" else tuple(name.split("+"))
        for seed in range(args.seeds):
            r = run_standard(seed, abl)
            records.append(r)
            print(f"{name:20s} seed {seed:2d}  ATE {r.ate:.5f}  AUC {r.auc:.4f}  {r.seconds:5.1f} s", flush=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(records_to_csv(records))
    print()
    full = {r.seed: r.ate for r in records if r.config == "full"}
    for name in configs:
        ates = {r.seed: r.ate for r in records if r.config == name}
        line = f"{name:20s} median ATE {np.median(list(ates.values())):.5f}"
        if full and name != "full":
            line += f"  median ratio full/this {np.median([full[s] / ates[s] for s in ates]):.3f}"
        print(line)


if __name__ == "__main__":
    main()
