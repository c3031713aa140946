"""Regenerate the golden registry files under tests/golden/.

The fixtures are built from closed-form weights and masks (no RNG), so the
bytes only change if the on-disk format changes. Run from the repo root:

    python3 scripts/make_golden.py
"""

from pathlib import Path

import numpy as np

from piggyback.layers import build_architecture, init_params
from piggyback.registry import BackboneSnapshot, TaskArtifact, save_backbone, save_task

OUT = Path(__file__).resolve().parent.parent / "tests" / "golden"


def golden_backbone():
    layers = build_architecture((3,), 2, "mlp-bn", hidden=(5, 4))
    params = init_params(layers, np.random.default_rng(0))
    for spec in layers:
        if spec.has_weight:
            n = int(np.prod(spec.weight_shape()))
            w = (np.arange(n) - n / 2) / 8.0
            params[spec.name] = {"weight": w.reshape(spec.weight_shape()), "bias": np.arange(spec.out_features) / 4.0}
    return BackboneSnapshot(layers, params, (3,), {"fixture": "golden"})


def golden_masks(backbone, ternary=False):
    masks = {}
    for spec in backbone.maskable_layers:
        n = int(np.prod(spec.weight_shape()))
        i = np.arange(n)
        m = (i % 3 != 1).astype(float)
        if ternary:
            m = np.where(i % 5 == 0, -1.0, m)
        masks[spec.name] = m.reshape(spec.weight_shape())
    return masks


def golden_tasks(backbone):
    head_spec = backbone.head
    head = {"weight": np.full(head_spec.weight_shape(), 0.5), "bias": np.array([0.25, -0.25])}
    binary = TaskArtifact("golden-binary", backbone.checksum, golden_masks(backbone), head, head_spec,
                          metadata={"fixture": "golden"})
    bn = {name: p["bn"].copy() for name, p in backbone.params.items() if "bn" in p}
    ternary = TaskArtifact("golden-ternary", backbone.checksum, golden_masks(backbone, True), head, head_spec,
                           mode="ternary", tau=0.01, tau_lo=-0.01, bn=bn, metadata={"fixture": "golden"})
    return binary, ternary


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    bb = golden_backbone()
    save_backbone(bb, OUT / "backbone.pgbb")
    binary, ternary = golden_tasks(bb)
    save_task(binary, OUT / "binary.pgbm")
    save_task(ternary, OUT / "ternary.pgbm")
    for p in sorted(OUT.iterdir()):
        print(f"{p.name} {p.stat().st_size}")


if __name__ == "__main__":
    main()
