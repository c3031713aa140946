import hashlib
import math
import struct
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import GOLDEN
from oracles import parse_mask_records
from piggyback.errors import BindingError, EncodingError, FormatError
from piggyback.layers import build_architecture, init_params
from piggyback.registry import (
    BackboneSnapshot,
    TaskArtifact,
    apply_task,
    load_backbone,
    load_real_masks,
    load_task,
    overhead_ratio,
    pack_mask,
    pack_ternary,
    packed_size,
    save_backbone,
    save_real_masks,
    save_task,
    unpack_mask,
    unpack_ternary,
)

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "scripts"))
import make_golden  # noqa: E402


def test_pack_hand_byte():
    assert pack_mask(np.array([1, 0, 1, 1, 0, 0, 0, 1])) == b"\x8d"
    np.testing.assert_array_equal(unpack_mask(b"\x8d", 8), [1, 0, 1, 1, 0, 0, 0, 1])


def test_pack_padding_case():
    assert pack_mask(np.ones(9)) == b"\xff\x01"
    np.testing.assert_array_equal(unpack_mask(b"\xff\x01", 9), np.ones(9))


def test_pack_round_trip_random(rng):
    m = rng.integers(0, 2, 1000).astype(float)
    assert np.array_equal(unpack_mask(pack_mask(m), 1000), m)


@settings(max_examples=60)
@given(st.lists(st.sampled_from([0.0, 1.0]), min_size=1, max_size=200))
def test_pack_round_trip_property(bits):
    m = np.array(bits)
    data = pack_mask(m)
    assert len(data) == math.ceil(len(bits) / 8)
    assert np.array_equal(unpack_mask(data, len(bits)), m)


@settings(max_examples=60)
@given(st.lists(st.sampled_from([-1.0, 0.0, 1.0]), min_size=1, max_size=200))
def test_ternary_round_trip_property(vals):
    m = np.array(vals)
    data = pack_ternary(m)
    assert len(data) == math.ceil(len(vals) / 4)
    assert np.array_equal(unpack_ternary(data, len(vals)), m)


def test_ternary_codes():
    # 00 -> 0, 01 -> +1, 10 -> -1, first element in the low bits
    assert pack_ternary(np.array([0.0, 1.0, -1.0, 1.0])) == bytes([0b01_10_01_00])
    with pytest.raises(FormatError):
        unpack_ternary(bytes([0b11]), 1)


def test_pack_errors():
    with pytest.raises(EncodingError):
        pack_mask(np.array([0.0, 0.5]))
    with pytest.raises(EncodingError):
        pack_ternary(np.array([2.0]))
    with pytest.raises(FormatError):
        unpack_mask(b"\xff", 9)
    with pytest.raises(FormatError):
        unpack_mask(b"\xff\x03", 9)  # padding bit set


def test_overhead_examples():
    assert overhead_ratio(1000, 9) == 1.28125
    assert overhead_ratio(1000, 1) == 1.03125
    assert overhead_ratio(1000, 1) - 1 == 1 / 32
    assert overhead_ratio(1000, 0) == 1.0


def _backbone(rng, arch="mlp", hidden=(6, 5), input_shape=(4,), k=3):
    layers = build_architecture(input_shape, k, arch, hidden=hidden)
    return BackboneSnapshot(layers, init_params(layers, rng), input_shape, {"seed": 0})


def _artifact(bb, rng, task_id="t", **kw):
    masks = {s.name: rng.integers(0, 2, s.weight_shape()).astype(float) for s in bb.maskable_layers}
    head = {"weight": rng.standard_normal(bb.head.weight_shape()), "bias": rng.standard_normal(bb.head.out_features)}
    return TaskArtifact(task_id, bb.checksum, masks, head, bb.head, **kw)


def test_backbone_round_trip_and_checksum(rng, tmp_path):
    bb = _backbone(rng, "mlp-bn")
    save_backbone(bb, tmp_path / "b.pgbb")
    again = load_backbone(tmp_path / "b.pgbb")
    assert again.checksum == bb.checksum == bb.recompute_checksum()
    assert again.to_bytes() == bb.to_bytes()
    assert hashlib.sha256(bb.to_bytes()[:-32]).hexdigest() == bb.checksum


def test_backbone_immutable(rng):
    bb = _backbone(rng)
    with pytest.raises(ValueError):
        bb.params["fc1"]["weight"][0, 0] = 1.0


def test_task_round_trip(rng, tmp_path):
    bb = _backbone(rng)
    art = _artifact(bb, rng, metadata={"epochs": 3})
    save_task(art, tmp_path / "t.pgbm")
    again = load_task(tmp_path / "t.pgbm", bb)
    assert again.to_bytes() == art.to_bytes()
    for name in art.masks:
        assert np.array_equal(again.masks[name], art.masks[name])
    assert again.metadata == {"epochs": 3}


def test_ternary_artifact_round_trip(rng, tmp_path):
    bb = _backbone(rng)
    masks = {s.name: rng.integers(-1, 2, s.weight_shape()).astype(float) for s in bb.maskable_layers}
    art = TaskArtifact("t", bb.checksum, masks, bb.params["head"], bb.head, mode="ternary", tau_lo=-0.02)
    save_task(art, tmp_path / "t.pgbm")
    again = load_task(tmp_path / "t.pgbm", bb)
    assert again.mode == "ternary" and again.tau_lo == -0.02
    for name, m in masks.items():
        assert np.array_equal(again.masks[name], m)


def test_wrong_backbone_is_binding_error(rng, tmp_path):
    bb, other = _backbone(rng), _backbone(rng)
    save_task(_artifact(bb, rng), tmp_path / "t.pgbm")
    with pytest.raises(BindingError):
        load_task(tmp_path / "t.pgbm", other)


def test_truncated_and_garbled_files_name_a_section(rng, tmp_path):
    bb = _backbone(rng)
    data = _artifact(bb, rng).to_bytes()
    for cut in (3, 10, 40, 60, len(data) // 2, len(data) - 1):
        with pytest.raises(FormatError) as e:
            TaskArtifact.from_bytes(data[:cut])
        assert e.value.section is not None
    garbled = bytearray(data)
    garbled[len(data) // 2] ^= 0xFF
    with pytest.raises(FormatError) as e:
        TaskArtifact.from_bytes(bytes(garbled))
    assert e.value.section is not None
    bdata = bb.to_bytes()
    with pytest.raises(FormatError):
        BackboneSnapshot.from_bytes(bdata[: len(bdata) - 7])


def test_artifact_size_formula_for_10k_params(rng):
    bb = _backbone(rng, hidden=(100,), input_shape=(100,), k=5)
    assert bb.maskable_params == 10_000
    art = _artifact(bb, rng, task_id="size", metadata={})
    size = len(art.to_bytes())
    masks = sum(math.ceil(s.weight_shape()[0] * s.weight_shape()[1] / 8) for s in bb.maskable_layers)
    assert masks == 1250 == art.mask_bytes
    header = 4 + 2 + 32 + 1 + 8 + 8 + (2 + 4) + (4 + len("{}")) + 4
    records = sum(2 + len(s.name) + 8 for s in bb.maskable_layers)
    head = (2 + 4) + 1 + (1 + 8 + 4 * 5 * 100) + (1 + 4 + 4 * 5)
    assert size == header + records + masks + head + 1 + 32


def test_apply_task_identity(rng):
    bb = _backbone(rng, "mlp-bn")
    ones = {s.name: np.ones(s.weight_shape()) for s in bb.maskable_layers}
    art = TaskArtifact("id", bb.checksum, ones, bb.params["head"], bb.head)
    x = rng.standard_normal((7, 4))
    assert np.array_equal(apply_task(bb, art).forward(x), bb.network().forward(x))


def test_apply_task_isolation_and_checksum(rng):
    bb = _backbone(rng)
    before = bb.checksum
    a, b = _artifact(bb, rng, "a"), _artifact(bb, rng, "b")
    x = rng.standard_normal((5, 4))
    ya = apply_task(bb, a).forward(x)
    yb = apply_task(bb, b).forward(x)
    assert np.array_equal(apply_task(bb, a).forward(x), ya)
    assert np.array_equal(apply_task(bb, b).forward(x), yb)
    assert bb.recompute_checksum() == before


def test_real_mask_sidecar(rng, tmp_path):
    real = {"fc1": rng.standard_normal((3, 4)), "fc2": rng.standard_normal((2, 3))}
    save_real_masks(real, tmp_path / "m.pgmr")
    back = load_real_masks(tmp_path / "m.pgmr")
    for k in real:
        assert np.array_equal(back[k], real[k])


# -- golden files --------------------------------------------------------------

def test_golden_files_are_reproduced_byte_exact():
    bb = make_golden.golden_backbone()
    binary, ternary = make_golden.golden_tasks(bb)
    assert (GOLDEN / "backbone.pgbb").read_bytes() == bb.to_bytes()
    assert (GOLDEN / "binary.pgbm").read_bytes() == binary.to_bytes()
    assert (GOLDEN / "ternary.pgbm").read_bytes() == ternary.to_bytes()


def test_golden_binary_mask_layout():
    bb = load_backbone(GOLDEN / "backbone.pgbb")
    data = (GOLDEN / "binary.pgbm").read_bytes()
    assert hashlib.sha256(data[:-32]).digest() == data[-32:]
    assert data[6:38].hex() == bb.checksum
    mode, records = parse_mask_records(data)
    assert mode == 0
    assert set(records) == {s.name for s in bb.maskable_layers}
    for spec in bb.maskable_layers:
        count, packed = records[spec.name]
        assert count == np.prod(spec.weight_shape())
        assert len(packed) == math.ceil(count / 8) == packed_size(count)
        # pattern: bit i is set unless i % 3 == 1, LSB first
        expected = bytearray(math.ceil(count / 8))
        for i in range(count):
            if i % 3 != 1:
                expected[i // 8] |= 1 << (i % 8)
        assert packed == bytes(expected)
    art = load_task(GOLDEN / "binary.pgbm", bb)
    assert art.mask_bytes == sum(math.ceil(np.prod(s.weight_shape()) / 8) for s in bb.maskable_layers)


def test_golden_ternary_layout():
    bb = load_backbone(GOLDEN / "backbone.pgbb")
    data = (GOLDEN / "ternary.pgbm").read_bytes()
    mode, records = parse_mask_records(data)
    assert mode == 1
    for spec in bb.maskable_layers:
        count, packed = records[spec.name]
        assert len(packed) == math.ceil(count / 4)
        for i in range(count):
            code = (packed[i // 4] >> (2 * (i % 4))) & 0b11
            want = 0b10 if i % 5 == 0 else (0b00 if i % 3 == 1 else 0b01)
            assert code == want
    art = load_task(GOLDEN / "ternary.pgbm", bb)
    assert art.bn is not None and set(art.bn) == {"bn1", "bn2"}


def test_golden_backbone_metadata():
    bb = load_backbone(GOLDEN / "backbone.pgbb")
    assert bb.provenance == {"fixture": "golden"}
    assert [s.name for s in bb.maskable_layers] == ["fc1", "fc2"]
    assert bb.maskable_params == 3 * 5 + 5 * 4
