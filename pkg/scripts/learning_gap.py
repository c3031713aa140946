"""Piggyback vs classifier-only vs finetune on the rotated synthetic suite.

    python3 scripts/learning_gap.py --seeds 0-4
"""

import argparse
import time

import numpy as np

from piggyback import presets
from piggyback.data import TaskSuiteSpec, generate_task_suite
from piggyback.training import pretrain_backbone, train_baseline, train_task_mask


def seed_range(text):
    lo, _, hi = text.partition("-")
    return range(int(lo), int(hi or lo) + 1)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=seed_range, default=range(5))
    ap.add_argument("--noise", type=float, default=TaskSuiteSpec.noise)
    args = ap.parse_args()
    t0 = time.perf_counter()
    rows = []
    for seed in args.seeds:
        suite = generate_task_suite(TaskSuiteSpec(seed=seed, noise=args.noise))
        bb = pretrain_backbone(suite[0][0], presets.pretrain_config(seed))
        cfg = presets.task_config(seed)
        train, ev = suite[1]
        _, pig = train_task_mask(bb, train, cfg, ev)
        co = train_baseline("classifier-only", bb, train, cfg, ev)
        ft = train_baseline("finetune", bb, train, cfg, ev)
        rows.append((1 - pig.final_error, 1 - co.final_error, 1 - ft.final_error))
        print(f"seed={seed} piggyback={rows[-1][0]:.3f} classifier_only={rows[-1][1]:.3f} finetune={rows[-1][2]:.3f}")
    pig, co, ft = np.median(rows, axis=0)
    print(f"median piggyback={pig:.3f} classifier_only={co:.3f} finetune={ft:.3f}")
    print(f"gap_vs_classifier_only={pig - co:+.3f} gap_vs_finetune={pig - ft:+.3f}")
    print(f"seconds={time.perf_counter() - t0:.1f}")


if __name__ == "__main__":
    main()
