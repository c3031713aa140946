"""Backbone snapshots, per-task artifacts, mask bit-packing and overhead accounting.

On-disk formats (all integers little-endian, every file ends with the
SHA-256 of all preceding bytes):

PGBB (backbone)
    ``"PGBB" u16:version u32:n_layers {blob:layer-json}* blob:input-shape-json
    blob:provenance-json {param records in layer order}* sha256``. A dense,
    conv or head record is ``text:name u8:has_bias array<f4>:weight
    [array<f4>:bias]``; a batchnorm record is ``text:name f64:eps
    array<f4>:gamma array<f4>:beta array<f4>:mean array<f4>:var``. The
    trailing digest is the backbone checksum.

PGBM (task artifact)
    ``"PGBM" u16:version raw32:backbone-checksum u8:mode f64:tau f64:tau_lo
    text:task-id blob:metadata-json u32:n_masks {text:name u64:count
    raw:packed}* text:head-name u8:has_bias array<f4>:head-weight
    [array<f4>:head-bias] u8:has_bn [u32:n_bn {bn record}*] sha256``.
    Binary masks pack 1 bit per parameter, ternary masks 2 bits; see
    ``pack_mask`` and ``pack_ternary``.

Arrays are ``u8:ndim {u32:dim}* data``. Weights are kept at float32
precision in memory too, so that a snapshot, its file and its checksum
always describe the same numbers.
"""

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from piggyback.binio import DIGEST_SIZE, Reader, Writer
from piggyback.errors import BindingError, ConfigError, DataError, EncodingError, FormatError
from piggyback.layers import BATCHNORM, HEAD, BatchNormParams, LayerSpec, Network, output_shape
from piggyback.masking import BINARY, DEFAULT_TAU, DEFAULT_TAU_LO, TERNARY

BACKBONE_MAGIC = b"PGBB"
TASK_MAGIC = b"PGBM"
MASK_MAGIC = b"PGMR"
VERSION = 1
MODE_CODES = {BINARY: 0, TERNARY: 1}
TERNARY_CODES = {0.0: 0b00, 1.0: 0b01, -1.0: 0b10}


# -- bit packing -------------------------------------------------------------

def pack_mask(m):
    """Pack a {0,1} mask, row-major, least-significant bit first."""
    flat = np.asarray(m).reshape(-1)
    if not np.all((flat == 0) | (flat == 1)):
        raise EncodingError("binary mask contains values other than 0 and 1")
    return np.packbits(flat.astype(np.uint8), bitorder="little").tobytes()


def unpack_mask(data, n):
    if len(data) != math.ceil(n / 8):
        raise FormatError(f"binary mask of {n} params needs {math.ceil(n / 8)} bytes, got {len(data)}", "mask")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if bits[n:].any():
        raise FormatError("nonzero padding bits in binary mask", "mask")
    return bits[:n].astype(np.float64)


def pack_ternary(m):
    """Pack a {-1,0,1} mask at 2 bits each (00 -> 0, 01 -> +1, 10 -> -1), LSB first."""
    flat = np.asarray(m, dtype=np.float64).reshape(-1)
    codes = np.full(flat.shape, 0xFF, dtype=np.uint8)
    for value, code in TERNARY_CODES.items():
        codes[flat == value] = code
    if (codes == 0xFF).any():
        raise EncodingError("ternary mask contains values other than -1, 0 and 1")
    padded = np.zeros(math.ceil(len(flat) / 4) * 4, dtype=np.uint8)
    padded[: len(flat)] = codes
    quads = padded.reshape(-1, 4)
    packed = quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)
    return packed.astype(np.uint8).tobytes()


def unpack_ternary(data, n):
    if len(data) != math.ceil(n / 4):
        raise FormatError(f"ternary mask of {n} params needs {math.ceil(n / 4)} bytes, got {len(data)}", "mask")
    b = np.frombuffer(data, dtype=np.uint8)
    codes = np.stack([(b >> s) & 0b11 for s in (0, 2, 4, 6)], axis=1).reshape(-1)
    if (codes == 0b11).any():
        raise FormatError("invalid 2-bit ternary code 11", "mask")
    if codes[n:].any():
        raise FormatError("nonzero padding in ternary mask", "mask")
    lut = np.array([0.0, 1.0, -1.0])
    return lut[codes[:n]]


def packed_size(n, mode=BINARY):
    return math.ceil(n / 8) if mode == BINARY else math.ceil(n / 4)


# -- backbone ----------------------------------------------------------------

def _freeze(a):
    a = np.array(a, dtype=np.float32).astype(np.float64)
    a.flags.writeable = False
    return a


def _freeze_params(layers, params):
    frozen = {}
    for spec in layers:
        p = params.get(spec.name)
        if p is None:
            continue
        if spec.kind == BATCHNORM:
            bn = p["bn"]
            frozen[spec.name] = {"bn": BatchNormParams(
                _freeze(bn.gamma), _freeze(bn.beta), _freeze(bn.running_mean), _freeze(bn.running_var), bn.eps
            )}
        else:
            frozen[spec.name] = {
                "weight": _freeze(p["weight"]),
                "bias": None if p.get("bias") is None else _freeze(p["bias"]),
            }
    return frozen


def _write_params(w, spec, p):
    w.text(spec.name)
    if spec.kind == BATCHNORM:
        bn = p["bn"]
        w.f64(bn.eps)
        for a in (bn.gamma, bn.beta, bn.running_mean, bn.running_var):
            w.array(a, "<f4")
    else:
        has_bias = p.get("bias") is not None
        w.u8(int(has_bias))
        w.array(p["weight"], "<f4")
        if has_bias:
            w.array(p["bias"], "<f4")


def _read_bn(r, section):
    name = r.text(section)
    eps = r.f64(section)
    arrays = [r.array("<f4", section) for _ in range(4)]
    if arrays[0].ndim != 1 or any(a.shape != arrays[0].shape for a in arrays):
        raise FormatError(f"batchnorm {name!r} parameter shape mismatch", section)
    try:
        return name, BatchNormParams(*arrays, eps=eps)
    except ConfigError as e:
        raise FormatError(f"batchnorm {name!r}: {e}", section) from e


def _read_params(r, spec, section):
    if spec.kind == BATCHNORM:
        name, bn = _read_bn(r, section)
        if name != spec.name or bn.gamma.shape != (spec.channels,):
            raise FormatError(f"batchnorm record {name!r} does not match layer {spec.name!r}", section)
        return {"bn": bn}
    name = r.text(section)
    if name != spec.name:
        raise FormatError(f"expected parameters for {spec.name!r}, found {name!r}", section)
    has_bias = r.u8(section)
    weight = r.array("<f4", section)
    if weight.shape != spec.weight_shape():
        raise FormatError(f"layer {name!r} weight shape {weight.shape} != {spec.weight_shape()}", section)
    bias = r.array("<f4", section) if has_bias else None
    if bias is not None and bias.shape != (weight.shape[0],):
        raise FormatError(f"layer {name!r} bias shape mismatch", section)
    return {"weight": weight, "bias": bias}


@dataclass
class BackboneSnapshot:
    """Frozen architecture and weights. Arrays are made read-only on creation."""

    layers: list
    params: dict
    input_shape: tuple
    provenance: dict = field(default_factory=dict)
    checksum: str = field(init=False)

    def __post_init__(self):
        self.layers = list(self.layers)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        output_shape(self.layers, self.input_shape)
        self.params = _freeze_params(self.layers, self.params)
        self.checksum = self.to_bytes()[-DIGEST_SIZE:].hex()

    @property
    def maskable_layers(self):
        return [s for s in self.layers if s.maskable]

    @property
    def maskable_params(self):
        return sum(int(np.prod(s.weight_shape())) for s in self.maskable_layers)

    @property
    def head(self):
        return self.layers[-1]

    def to_bytes(self):
        w = Writer(BACKBONE_MAGIC, VERSION)
        w.u32(len(self.layers))
        for spec in self.layers:
            w.json(spec.to_dict())
        w.json(list(self.input_shape))
        w.json(self.provenance)
        for spec in self.layers:
            if spec.name in self.params:
                _write_params(w, spec, self.params[spec.name])
        return w.finish()

    def recompute_checksum(self):
        return self.to_bytes()[-DIGEST_SIZE:].hex()

    @classmethod
    def from_bytes(cls, data):
        r = Reader(data, BACKBONE_MAGIC, (VERSION,), "backbone")
        n = r.u32("architecture")
        try:
            layers = [LayerSpec.from_dict(r.json("architecture")) for _ in range(n)]
        except (TypeError, ConfigError) as e:
            raise FormatError(f"bad layer descriptor: {e}", "architecture") from e
        input_shape = tuple(r.json("architecture"))
        prov = r.json("provenance")
        params = {}
        for spec in layers:
            if spec.has_weight or spec.kind == BATCHNORM:
                params[spec.name] = _read_params(r, spec, "weights")
        digest = r.finish()
        snap = cls(layers, params, input_shape, prov)
        if snap.checksum != digest.hex():
            raise FormatError("backbone checksum does not match its contents", "trailer")
        return snap

    def network(self):
        """The backbone as pretrained: unmasked, with its own head."""
        return Network(self.layers, dict(self.params))


def save_backbone(snapshot, path):
    Path(path).write_bytes(snapshot.to_bytes())
    return snapshot.checksum


def load_backbone(path):
    p = Path(path)
    if not p.exists():
        raise DataError(f"backbone file not found: {p}")
    return BackboneSnapshot.from_bytes(p.read_bytes())


def overhead_ratio(backbone, k):
    """Storage of backbone plus ``k`` binary masks relative to the backbone alone,
    counted over maskable parameters at 32 bits per weight."""
    if k < 0:
        raise ConfigError(f"task count must be >= 0, got {k}")
    n = backbone.maskable_params if isinstance(backbone, BackboneSnapshot) else int(backbone)
    return (32 * n + k * n) / (32 * n)


# -- task artifacts ----------------------------------------------------------

@dataclass
class TaskArtifact:
    task_id: str
    backbone_checksum: str
    masks: dict
    head: dict
    head_spec: LayerSpec
    mode: str = BINARY
    tau: float = DEFAULT_TAU
    tau_lo: float = DEFAULT_TAU_LO
    bn: dict = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODE_CODES:
            raise ConfigError(f"unknown mask mode {self.mode!r}")
        if self.head_spec.kind != HEAD:
            raise ConfigError("head_spec must be a head layer")
        self.masks = {k: np.asarray(v, dtype=np.float64) for k, v in self.masks.items()}
        self.head = {
            "weight": _freeze(self.head["weight"]),
            "bias": None if self.head.get("bias") is None else _freeze(self.head["bias"]),
        }
        if self.bn is not None:
            self.bn = _freeze_params(
                [LayerSpec(name, BATCHNORM, channels=len(p.gamma)) for name, p in self.bn.items()],
                {name: {"bn": p} for name, p in self.bn.items()},
            )
            self.bn = {name: v["bn"] for name, v in self.bn.items()}

    def packed_masks(self):
        pack = pack_mask if self.mode == BINARY else pack_ternary
        return {name: pack(m) for name, m in self.masks.items()}

    @property
    def mask_bytes(self):
        return sum(len(b) for b in self.packed_masks().values())

    @property
    def extra_bytes(self):
        """Bytes of float32 head and batchnorm parameters, kept out of the overhead ratio."""
        n = self.head["weight"].size + (0 if self.head["bias"] is None else self.head["bias"].size)
        for p in (self.bn or {}).values():
            n += 4 * p.gamma.size
        return 4 * n

    def to_bytes(self):
        w = Writer(TASK_MAGIC, VERSION)
        w.raw(bytes.fromhex(self.backbone_checksum))
        w.u8(MODE_CODES[self.mode])
        w.f64(self.tau)
        w.f64(self.tau_lo)
        w.text(self.task_id)
        w.json(self.metadata)
        packed = self.packed_masks()
        w.u32(len(packed))
        for name, b in packed.items():
            w.text(name)
            w.u64(self.masks[name].size)
            w.raw(b)
        _write_params(w, self.head_spec, self.head)
        w.u8(int(self.bn is not None))
        if self.bn is not None:
            w.u32(len(self.bn))
            for name, p in self.bn.items():
                _write_params(w, LayerSpec(name, BATCHNORM, channels=len(p.gamma)), {"bn": p})
        return w.finish()

    @classmethod
    def from_bytes(cls, data, backbone=None):
        r = Reader(data, TASK_MAGIC, (VERSION,), "task artifact")
        checksum = r.take(DIGEST_SIZE, "header").hex()
        code = r.u8("header")
        modes = {v: k for k, v in MODE_CODES.items()}
        if code not in modes:
            raise FormatError(f"unknown mask mode byte {code}", "header")
        mode = modes[code]
        tau, tau_lo = r.f64("header"), r.f64("header")
        task_id = r.text("header")
        metadata = r.json("metadata")
        masks = {}
        unpack = unpack_mask if mode == BINARY else unpack_ternary
        for _ in range(r.u32("masks")):
            name = r.text("masks")
            count = r.u64("masks")
            masks[name] = unpack(r.take(packed_size(count, mode), "masks"), count)
        name = r.text("head")
        has_bias = r.u8("head")
        weight = r.array("<f4", "head")
        if weight.ndim != 2:
            raise FormatError("head weight must be 2-d", "head")
        bias = r.array("<f4", "head") if has_bias else None
        head_spec = LayerSpec(name, HEAD, in_features=weight.shape[1], out_features=weight.shape[0], bias=bool(has_bias))
        bn = None
        if r.u8("batchnorm"):
            bn = {}
            for _ in range(r.u32("batchnorm")):
                bname, p = _read_bn(r, "batchnorm")
                bn[bname] = p
        r.finish()
        art = cls(task_id, checksum, masks, {"weight": weight, "bias": bias}, head_spec,
                  mode, tau, tau_lo, bn, metadata)
        if backbone is not None:
            art.bind(backbone)
        return art

    def bind(self, backbone):
        """Check this artifact against ``backbone`` and reshape masks to its layers."""
        if self.backbone_checksum != backbone.checksum:
            raise BindingError(
                f"task {self.task_id!r} is bound to backbone {self.backbone_checksum[:12]}..., "
                f"not {backbone.checksum[:12]}..."
            )
        expected = {s.name: s for s in backbone.maskable_layers}
        if set(self.masks) != set(expected):
            raise BindingError(f"mask layers {sorted(self.masks)} != backbone maskable layers {sorted(expected)}")
        for name, m in self.masks.items():
            shape = expected[name].weight_shape()
            if m.size != int(np.prod(shape)):
                raise BindingError(f"mask {name!r} has {m.size} params, backbone layer has {int(np.prod(shape))}")
            self.masks[name] = m.reshape(shape)
        if self.head_spec.in_features != backbone.head.in_features:
            raise BindingError("head input width does not match the backbone")
        for name, p in (self.bn or {}).items():
            spec = next((s for s in backbone.layers if s.name == name), None)
            if spec is None or spec.kind != BATCHNORM or spec.channels != len(p.gamma):
                raise BindingError(f"batchnorm section {name!r} does not match the backbone")
        return self


def save_task(artifact, path):
    Path(path).write_bytes(artifact.to_bytes())


def load_task(path, backbone=None):
    p = Path(path)
    if not p.exists():
        raise DataError(f"task artifact not found: {p}")
    return TaskArtifact.from_bytes(p.read_bytes(), backbone)


def apply_task(backbone, artifact):
    """Build the inference network for one task. Backbone arrays are shared, never copied or written."""
    artifact.bind(backbone)
    params = dict(backbone.params)
    params[artifact.head_spec.name] = artifact.head
    for name, p in (artifact.bn or {}).items():
        params[name] = {"bn": p}
    layers = backbone.layers[:-1] + [replace(artifact.head_spec)]
    return Network(layers, params, masks=dict(artifact.masks))


# -- real-valued mask sidecar (debug only, not part of an artifact) -------------

def save_real_masks(real_masks, path):
    w = Writer(MASK_MAGIC, VERSION)
    w.u32(len(real_masks))
    for name, a in real_masks.items():
        w.text(name)
        w.array(a, "<f8")
    Path(path).write_bytes(w.finish())


def load_real_masks(path):
    r = Reader(Path(path).read_bytes(), MASK_MAGIC, (VERSION,), "real-mask sidecar")
    out = {}
    for _ in range(r.u32("masks")):
        name = r.text("masks")
        out[name] = r.array("<f8", "masks").copy()
    r.finish()
    return out
