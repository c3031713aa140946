"""Per-layer sparsity of one trained mask re-thresholded at several tau values.

    python3 scripts/tau_sweep.py --seed 0 --taus 1e-3,5e-3,1e-2,2e-2
"""

import argparse

from piggyback import presets
from piggyback.data import TaskSuiteSpec, generate_task_suite
from piggyback.masking import binarize
from piggyback.training import pretrain_backbone, train_task_mask


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--taus", default="1e-3,5e-3,1e-2")
    args = ap.parse_args()
    taus = [float(t) for t in args.taus.split(",")]
    suite = generate_task_suite(TaskSuiteSpec(seed=args.seed))
    bb = pretrain_backbone(suite[0][0], presets.pretrain_config(args.seed))
    _, rep = train_task_mask(bb, suite[1][0], presets.task_config(args.seed), suite[1][1])
    print(f"error={rep.final_error:.3f}")
    print("layer," + ",".join(f"tau={t:g}" for t in taus))
    for name, m_r in rep.real_masks.items():
        fracs = [float((binarize(m_r, t) == 0).mean()) for t in taus]
        print(name + "," + ",".join(f"{f:.4f}" for f in fracs))


if __name__ == "__main__":
    main()
