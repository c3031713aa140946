"""Frozen vs per-task batchnorm on a style-transformed (gain and offset) task.

    python3 scripts/bn_compare.py --seeds 0-4 --gain 3 --offset 1.5
"""

import argparse

import numpy as np

from learning_gap import seed_range
from piggyback import presets
from piggyback.data import TaskSuiteSpec, generate_task_suite
from piggyback.training import pretrain_backbone, train_task_mask


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=seed_range, default=range(5))
    ap.add_argument("--gain", type=float, default=3.0)
    ap.add_argument("--offset", type=float, default=1.5)
    args = ap.parse_args()
    shift = {"kind": "style-transform", "gain": args.gain, "offset": args.offset}
    rows = []
    for seed in args.seeds:
        suite = generate_task_suite(TaskSuiteSpec(seed=seed, shifts=[shift]))
        bb = pretrain_backbone(suite[0][0], presets.pretrain_config(seed, arch="mlp-bn"))
        errs = []
        for mode in ("frozen", "per-task"):
            _, rep = train_task_mask(bb, suite[1][0], presets.task_config(seed, bn_mode=mode), suite[1][1])
            errs.append(rep.final_error)
        rows.append(errs)
        print(f"seed={seed} frozen_bn_error={errs[0]:.3f} per_task_bn_error={errs[1]:.3f}")
    frozen, per_task = np.median(rows, axis=0)
    print(f"median frozen_bn_error={frozen:.3f} per_task_bn_error={per_task:.3f}")


if __name__ == "__main__":
    main()
