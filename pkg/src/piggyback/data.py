"""Synthetic multi-task suites, the PGDS dataset file format, and batching.

A suite is a list of (train, eval) dataset pairs. Task 0 is the seed task
the backbone is pretrained on; every later task draws from the same
class-conditional generator and then applies its configured shift.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from piggyback.binio import Reader, Writer, sha256
from piggyback.errors import ConfigError, DataError, FormatError

MAGIC = b"PGDS"
VERSION = 1
DTYPE_F64 = 1
SPLITS = ("train", "eval")

SHIFT_KINDS = ("none", "rotation", "feature-permutation", "label-remap", "style-transform")


@dataclass(eq=False)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    split: str = "train"
    provenance: dict = field(default_factory=dict)
    path: str = None

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        if self.x.ndim < 2:
            raise DataError(f"samples must be (N, ...), got shape {self.x.shape}")
        if len(self.x) != len(self.y):
            raise DataError(f"{len(self.x)} samples but {len(self.y)} labels")
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.y)

    @property
    def sample_shape(self):
        return self.x.shape[1:]

    def to_bytes(self):
        w = Writer(MAGIC, VERSION)
        w.u8(DTYPE_F64)
        w.u8(SPLITS.index(self.split))
        w.u32(self.num_classes)
        w.array(self.x, "<f8")
        w.array(self.y, "<i4")
        w.json(self.provenance)
        return w.finish()

    @property
    def content_hash(self):
        return self.to_bytes()[-32:].hex()

    @classmethod
    def from_bytes(cls, data):
        r = Reader(data, MAGIC, (VERSION,), "dataset")
        if r.u8("header") != DTYPE_F64:
            raise FormatError("unsupported sample dtype", "header")
        split = r.u8("header")
        if split >= len(SPLITS):
            raise FormatError(f"bad split code {split}", "header")
        k = r.u32("header")
        x = r.array("<f8", "samples")
        y = r.array("<i4", "labels")
        if x.ndim < 2 or y.ndim != 1 or len(x) != len(y):
            raise FormatError(f"sample shape {x.shape} inconsistent with label shape {y.shape}", "labels")
        prov = r.json("provenance")
        r.finish()
        return cls(x.astype(np.float64), y.astype(np.int64), k, SPLITS[split], prov)


def save_dataset(dataset, path):
    data = dataset.to_bytes()
    Path(path).write_bytes(data)
    return data[-32:].hex()


def load_dataset(path):
    p = Path(path)
    if not p.exists():
        raise DataError(f"dataset file not found: {p}")
    ds = Dataset.from_bytes(p.read_bytes())
    ds.path = str(p)
    return ds


def batches(dataset, batch_size, seed=0, shuffle=True, epoch=0):
    """Yield ``(x, y)`` batches; the final partial batch is kept.

    The shuffle permutation depends only on ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    n = len(dataset)
    entropy = [int(s) for s in np.atleast_1d(seed)] + [int(epoch)]
    order = np.random.default_rng(entropy).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.x[idx], dataset.y[idx]


# -- synthetic suites ------------------------------------------------------


@dataclass
class TaskSuiteSpec:
    """Generator configuration. ``shifts`` holds one dict per task after the
    seed task, e.g. ``{"kind": "rotation", "angle": 45}``."""

    seed: int = 0
    kind: str = "vector"
    input_dim: int = 2
    image_size: int = 16
    num_classes: int = 4
    clusters_per_class: int = 3
    train_samples: int = 2000
    eval_samples: int = 500
    noise: float = 0.08
    shifts: list = field(default_factory=lambda: [{"kind": "rotation", "angle": 45.0}])

    def __post_init__(self):
        if self.kind not in ("vector", "image"):
            raise ConfigError(f"unknown suite kind {self.kind!r}")
        if self.kind == "vector" and self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if self.kind == "image" and self.image_size < 4:
            raise ConfigError("image_size must be >= 4")
        if not 2 <= self.num_classes:
            raise ConfigError("num_classes must be >= 2")
        if self.clusters_per_class < 1 or self.train_samples < 1 or self.eval_samples < 1:
            raise ConfigError("cluster and sample counts must be >= 1")
        parsed = []
        for s in self.shifts:
            s = {"kind": s} if isinstance(s, str) else dict(s)
            if s.get("kind") not in SHIFT_KINDS:
                raise ConfigError(f"unknown shift kind {s.get('kind')!r}")
            if s["kind"] == "rotation" and self.kind == "vector" and self.input_dim < 2:
                raise ConfigError("rotation needs input_dim >= 2")
            perm = s.get("permutation")
            if perm is not None and sorted(perm) != list(range(self._perm_size(s["kind"]))):
                raise ConfigError(f"{s['kind']} permutation must be a permutation of range({self._perm_size(s['kind'])})")
            parsed.append(s)
        self.shifts = parsed

    def _perm_size(self, kind):
        if kind == "label-remap":
            return self.num_classes
        return self.input_dim if self.kind == "vector" else self.image_size ** 2

    @property
    def sample_shape(self):
        if self.kind == "vector":
            return (self.input_dim,)
        return (1, self.image_size, self.image_size)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown suite keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except FileNotFoundError as e:
            raise DataError(f"suite config not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"suite config {path} is not valid JSON: {e}") from e


def class_centers(spec):
    """Cluster centres shared by every task, shape (K, clusters, *sample_shape)."""
    rng = np.random.default_rng([spec.seed, 0xC])
    k, c = spec.num_classes, spec.clusters_per_class
    if spec.kind == "vector":
        return rng.uniform(-1.0, 1.0, size=(k, c, spec.input_dim))
    # images: each cluster is a prototype built from a few signed gaussian bumps
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s]
    protos = np.zeros((k, c, 1, s, s))
    for i in range(k):
        for j in range(c):
            for _ in range(3):
                cy, cx = rng.uniform(2, s - 2, size=2)
                width = rng.uniform(1.0, 2.5)
                sign = rng.choice([-1.0, 1.0])
                protos[i, j, 0] += sign * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
    return protos


def _draw(spec, centers, n, rng):
    k, c = centers.shape[:2]
    y = rng.integers(0, k, size=n)
    cl = rng.integers(0, c, size=n)
    x = centers[y, cl] + spec.noise * rng.standard_normal((n,) + centers.shape[2:])
    return x, y


def rotation_matrix(angle_deg, dim=2):
    t = np.deg2rad(angle_deg)
    r = np.eye(dim)
    r[:2, :2] = [[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]
    return r


def shift_permutation(spec, shift, task_index):
    perm = shift.get("permutation")
    if perm is not None:
        return np.asarray(perm)
    rng = np.random.default_rng([spec.seed, task_index, 0xF])
    return rng.permutation(spec._perm_size(shift["kind"]))


def apply_shift(spec, shift, task_index, x, y):
    kind = shift["kind"]
    if kind == "none":
        return x, y
    if kind == "rotation":
        angle = float(shift.get("angle", 45.0))
        if spec.kind == "vector":
            return x @ rotation_matrix(angle, spec.input_dim).T, y
        return ndimage.rotate(x, angle, axes=(3, 2), reshape=False, order=1, mode="constant"), y
    if kind == "feature-permutation":
        perm = shift_permutation(spec, shift, task_index)
        flat = x.reshape(len(x), -1)[:, perm]
        return flat.reshape(x.shape), y
    if kind == "label-remap":
        perm = shift_permutation(spec, shift, task_index)
        return x, perm[y]
    if kind == "style-transform":
        gain = float(shift.get("gain", 3.0))
        offset = float(shift.get("offset", 1.5))
        return gain * x + offset, y
    raise ConfigError(f"unknown shift kind {kind!r}")


def _check_disjoint(train, ev):
    seen = {row.tobytes() for row in train.reshape(len(train), -1)}
    if any(row.tobytes() in seen for row in ev.reshape(len(ev), -1)):
        raise DataError("train and eval splits share a sample")


def generate_task_suite(spec):
    """Return ``[(train, eval), ...]`` for task 0 followed by one task per shift."""
    centers = class_centers(spec)
    shifts = [{"kind": "none"}] + list(spec.shifts)
    suite = []
    for t, shift in enumerate(shifts):
        pair = []
        for code, (split, n) in enumerate((("train", spec.train_samples), ("eval", spec.eval_samples))):
            rng = np.random.default_rng([spec.seed, t, code])
            x, y = _draw(spec, centers, n, rng)
            x, y = apply_shift(spec, shift, t, x, y)
            prov = {"generator": spec.to_dict(), "task": t, "shift": shift}
            pair.append(Dataset(x, y, spec.num_classes, split, prov))
        _check_disjoint(pair[0].x, pair[1].x)
        suite.append(tuple(pair))
    return suite


def bayes_boundary_normals(spec, shift=None):
    """Closed-form pairwise Bayes boundaries for single-cluster isotropic
    vector suites: for classes i < j the boundary is the hyperplane with
    normal ``mu_j - mu_i`` through their midpoint. Returns ``{(i, j): (normal,
    offset)}`` for the (optionally shifted) means."""
    if spec.kind != "vector" or spec.clusters_per_class != 1:
        raise ConfigError("closed-form boundaries need a single-cluster vector suite")
    mu = class_centers(spec)[:, 0]
    if shift is not None and shift["kind"] == "rotation":
        mu = mu @ rotation_matrix(float(shift.get("angle", 45.0)), spec.input_dim).T
    out = {}
    for i in range(len(mu)):
        for j in range(i + 1, len(mu)):
            normal = mu[j] - mu[i]
            out[(i, j)] = (normal, float(normal @ (mu[i] + mu[j]) / 2))
    return out
