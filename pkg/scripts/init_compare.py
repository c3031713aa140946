"""Masks over a pretrained frozen backbone vs a randomly initialised one.

    python3 scripts/init_compare.py --seeds 0-4
"""

import argparse

import numpy as np

from learning_gap import seed_range
from piggyback import presets
from piggyback.data import TaskSuiteSpec, generate_task_suite
from piggyback.training import init_comparison


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=seed_range, default=range(5))
    args = ap.parse_args()
    rows = []
    for seed in args.seeds:
        suite = generate_task_suite(TaskSuiteSpec(seed=seed))
        r = init_comparison(suite[0], suite[1], presets.task_config(seed), presets.pretrain_config(seed))
        rows.append((r["pretrained_error"], r["random_error"]))
        print(f"seed={seed} pretrained_error={r['pretrained_error']:.3f} random_error={r['random_error']:.3f} "
              f"random_sparsity={r['random_sparsity']:.3f}")
    pre, rand = np.median(rows, axis=0)
    print(f"median pretrained_error={pre:.3f} random_error={rand:.3f} chance_error={r['chance_error']:.3f}")


if __name__ == "__main__":
    main()
