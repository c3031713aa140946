"""Backbone pretraining, piggyback mask training, baselines and analyses.

Random streams are derived from ``config.seed`` by purpose, so a mask run
and a classifier-only run with the same seed start from the same head and
see batches in the same order.
"""

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from piggyback.data import batches
from piggyback.errors import ConfigError, DataError, TrainingError
from piggyback.layers import (
    BATCHNORM,
    BN_FROZEN,
    BN_TRAIN,
    HEAD,
    LayerSpec,
    Network,
    build_architecture,
    init_head,
    init_params,
    softmax_cross_entropy,
)
from piggyback.masking import BINARY, TERNARY, MaskState
from piggyback.optim import ADAM, INVERSE_MEAN_ABS, NO_SCALING, SGDM, DecaySchedule, Optimizer, ParamGroup, apply_decay
from piggyback.registry import BackboneSnapshot, TaskArtifact, apply_task

STREAM_INIT = 0xB0
STREAM_HEAD = 0x4EAD
STREAM_BATCH = 0xBA7C

MASK_CONSTANT = "constant"
MASK_PROPORTIONAL = "proportional"
BN_PER_TASK = "per-task"


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 32
    mask_init: str = MASK_CONSTANT
    mask_init_value: float = 1e-2
    tau: float = 5e-3
    tau_lo: float = -5e-3
    mask_mode: str = BINARY
    mask_optimizer: str = ADAM
    mask_lr: float = 1e-4
    mask_grad_scaling: bool = True
    momentum: float = 0.9
    head_optimizer: str = SGDM
    head_lr: float = 1e-3
    backbone_optimizer: str = ADAM
    backbone_lr: float = 1e-3
    bn_lr: float = 1e-3
    decay_factor: float = 10.0
    decay_epochs: tuple = (15,)
    bn_mode: str = "frozen"
    arch: str = "mlp"
    hidden: tuple = (128, 6)
    channels: tuple = (8, 16)

    def __post_init__(self):
        self.decay_epochs = tuple(self.decay_epochs)
        self.hidden = tuple(self.hidden)
        self.channels = tuple(self.channels)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.mask_init not in (MASK_CONSTANT, MASK_PROPORTIONAL):
            raise ConfigError(f"unknown mask init {self.mask_init!r}")
        if self.mask_mode not in (BINARY, TERNARY):
            raise ConfigError(f"unknown mask mode {self.mask_mode!r}")
        if self.bn_mode not in ("frozen", BN_PER_TASK):
            raise ConfigError(f"unknown batchnorm mode {self.bn_mode!r}")
        for opt in (self.mask_optimizer, self.head_optimizer, self.backbone_optimizer):
            if opt not in (ADAM, SGDM):
                raise ConfigError(f"unknown optimizer {opt!r}")
        self.schedule  # validates decay settings

    @property
    def schedule(self):
        return DecaySchedule(self.decay_factor, self.decay_epochs)

    def to_dict(self):
        d = asdict(self)
        for k in ("decay_epochs", "hidden", "channels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw):
        return TrainConfig.from_dict({**self.to_dict(), **kw})


@dataclass
class RunReport:
    kind: str
    config: dict
    backbone_checksum: str
    epochs: list = field(default_factory=list)
    final_error: float = None
    per_class_accuracy: list = None
    sparsity: dict = None
    wall_time: float = 0.0
    # in-memory only
    network: object = field(default=None, repr=False, compare=False)
    real_masks: dict = field(default=None, repr=False, compare=False)

    def to_dict(self, include_wall_time=False):
        d = {
            "kind": self.kind,
            "backbone_checksum": self.backbone_checksum,
            "final_error": self.final_error,
            "per_class_accuracy": self.per_class_accuracy,
            "epochs": self.epochs,
            "sparsity": self.sparsity,
            "config": self.config,
        }
        if include_wall_time:
            d["wall_time"] = self.wall_time
        return d

    def to_json(self, include_wall_time=False):
        return json.dumps(self.to_dict(include_wall_time), indent=2, sort_keys=True) + "\n"

    def to_text(self, include_wall_time=False):
        lines = [
            f"kind={self.kind}",
            f"backbone_checksum={self.backbone_checksum}",
            f"final_error={_fmt(self.final_error)}",
        ]
        for e in self.epochs:
            lines.append(f"epoch.{e['epoch']}.loss={_fmt(e['loss'])}")
            lines.append(f"epoch.{e['epoch']}.train_accuracy={_fmt(e['train_accuracy'])}")
        if self.per_class_accuracy is not None:
            for k, a in enumerate(self.per_class_accuracy):
                lines.append(f"class.{k}.accuracy={_fmt(a)}")
        if self.sparsity is not None:
            for row in self.sparsity["layers"]:
                lines.append(f"sparsity.{row['layer']}={_fmt(row['fraction'])}")
            lines.append(f"sparsity.total={_fmt(self.sparsity['total']['fraction'])}")
        for k, v in sorted(self.config.items()):
            lines.append(f"config.{k}={json.dumps(v)}")
        if include_wall_time:
            lines.append(f"wall_time={self.wall_time:.3f}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    return "none" if v is None else repr(float(v))


# -- parameter plumbing --------------------------------------------------------

def _get(net, key):
    name, slot = key
    p = net.params[name]
    if slot in ("gamma", "beta"):
        return getattr(p["bn"], slot)
    return p[slot]


def _set(net, key, value):
    name, slot = key
    p = net.params[name]
    if slot in ("gamma", "beta"):
        setattr(p["bn"], slot, value)
    else:
        p[slot] = value


def _weight_keys(spec):
    keys = [(spec.name, "weight")]
    if spec.bias:
        keys.append((spec.name, "bias"))
    return keys


def _group(name, role, keys, optimizer, lr, config, scaling=NO_SCALING):
    return ParamGroup(name, role, keys, lr, optimizer, momentum=config.momentum, scaling=scaling)


class _Trainer:
    """Single-threaded loop over one network, a set of groups and optional masks."""

    def __init__(self, net, groups, config, mask_states=None, scale_refs=None):
        self.net = net
        self.groups = groups
        self.config = config
        self.mask_states = mask_states or {}
        self.optimizer = Optimizer(groups, scale_refs)
        self.keys = [k for g in groups for k in g.keys]
        self.want = set(self.keys)

    def params(self):
        out = {}
        for key in self.keys:
            name, slot = key
            out[key] = self.mask_states[name].real if slot == "mask" else _get(self.net, key)
        return out

    def sync(self, params):
        for key, value in params.items():
            name, slot = key
            if slot == "mask":
                state = self.mask_states[name]
                state.real = value
                self.net.masks[name] = state.refresh()
            else:
                _set(self.net, key, value)

    def fit(self, dataset):
        cfg = self.config
        history = []
        for epoch in range(cfg.epochs):
            apply_decay(self.groups, cfg.schedule, epoch)
            total_loss, correct, seen = 0.0, 0, 0
            for x, y in batches(dataset, cfg.batch_size, seed=(cfg.seed, STREAM_BATCH), epoch=epoch):
                if len(y) < 2 and self.net.bn_mode == BN_TRAIN:
                    continue  # batch statistics are undefined for a single sample
                with np.errstate(over="ignore", invalid="ignore"):  # caught by the finiteness check
                    logits = self.net.forward(x, training=True)
                    loss, dlogits = softmax_cross_entropy(logits, y)
                if not np.isfinite(loss):
                    raise TrainingError("non-finite loss", epoch=epoch)
                total_loss += loss * len(y)
                correct += int((logits.argmax(axis=1) == y).sum())
                seen += len(y)
                if not self.keys:
                    continue
                grads = self.net.backward(dlogits, self.want)
                params = self.optimizer.step(self.params(), grads)
                self.sync(params)
            history.append({
                "epoch": epoch,
                "loss": total_loss / max(seen, 1),
                "train_accuracy": correct / max(seen, 1),
            })
        return history


def head_spec_for(backbone, num_classes):
    spec = backbone.head
    return LayerSpec(spec.name, HEAD, in_features=spec.in_features, out_features=num_classes, bias=spec.bias)


def fresh_head(backbone, num_classes, config, head=None):
    """Head spec and parameters; ``head`` (a weight/bias dict) overrides the seeded init."""
    spec = head_spec_for(backbone, num_classes)
    if head is not None:
        if tuple(np.shape(head["weight"])) != spec.weight_shape():
            raise ConfigError(f"initial head has shape {np.shape(head['weight'])}, expected {spec.weight_shape()}")
        return spec, {"weight": np.array(head["weight"]), "bias": None if head.get("bias") is None else np.array(head["bias"])}
    return spec, init_head(spec, np.random.default_rng([config.seed, STREAM_HEAD]))


# -- evaluation ----------------------------------------------------------------

def predict(model, x, chunk=512):
    out = []
    for start in range(0, len(x), chunk):
        out.append(model.forward(x[start:start + chunk], training=False).argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model, dataset):
    """Return ``(top1_error, per_class_accuracy)`` in inference mode."""
    width = model.head.out_features
    if dataset.num_classes != width:
        raise DataError(f"dataset has {dataset.num_classes} classes but the head predicts {width}")
    pred = predict(model, dataset.x)
    error = float(np.mean(pred != dataset.y)) if len(dataset) else 0.0
    per_class = []
    for k in range(width):
        sel = dataset.y == k
        per_class.append(float(np.mean(pred[sel] == k)) if sel.any() else None)
    return error, per_class


def _finish(report, model, eval_dataset, t0):
    if eval_dataset is not None:
        report.final_error, report.per_class_accuracy = evaluate(model, eval_dataset)
    report.network = model
    report.wall_time = time.perf_counter() - t0
    return report


# -- pretraining -----------------------------------------------------------------

def pretrain(dataset, config, eval_dataset=None, provenance=None):
    """Train a network from scratch on ``dataset`` and freeze it.

    Returns ``(snapshot, report)``; the report's network is the frozen backbone.
    """
    t0 = time.perf_counter()
    if len(dataset) == 0:
        raise DataError("cannot pretrain on an empty dataset")
    layers = build_architecture(dataset.sample_shape, dataset.num_classes, config.arch, config.hidden, config.channels)
    params = init_params(layers, np.random.default_rng([config.seed, STREAM_INIT]))
    net = Network(layers, params, bn_mode=BN_TRAIN)
    weight_keys, bn_keys = [], []
    for spec in layers:
        if spec.has_weight:
            weight_keys += _weight_keys(spec)
        elif spec.kind == BATCHNORM:
            bn_keys += [(spec.name, "gamma"), (spec.name, "beta")]
    groups = [_group("backbone", "backbone", weight_keys, config.backbone_optimizer, config.backbone_lr, config)]
    if bn_keys:
        groups.append(_group("batchnorm", "batchnorm", bn_keys, config.backbone_optimizer, config.backbone_lr, config))
    history = _Trainer(net, groups, config).fit(dataset)
    prov = {
        "dataset": dataset.content_hash,
        "seed": config.seed,
        "epochs": config.epochs,
        "final_train_accuracy": history[-1]["train_accuracy"] if history else None,
    }
    prov.update(provenance or {})
    snapshot = BackboneSnapshot(layers, net.params, dataset.sample_shape, prov)
    report = RunReport("pretrain", config.to_dict(), snapshot.checksum, history)
    return snapshot, _finish(report, snapshot.network(), eval_dataset, t0)


def pretrain_backbone(dataset, config, provenance=None):
    return pretrain(dataset, config, provenance=provenance)[0]


def random_backbone(dataset, config):
    """A frozen, never-trained backbone with the same architecture and seed."""
    return pretrain_backbone(dataset, config.replace(epochs=0), provenance={"random_init": True})


# -- piggyback mask training ----------------------------------------------------

def init_mask_states(backbone, config):
    states = {}
    kw = {"tau": config.tau, "mode": config.mask_mode, "tau_lo": config.tau_lo}
    for spec in backbone.maskable_layers:
        W = backbone.params[spec.name]["weight"]
        if config.mask_init == MASK_CONSTANT:
            states[spec.name] = MaskState.constant(W.shape, config.mask_init_value, **kw)
        else:
            states[spec.name] = MaskState.proportional(W, config.mask_init_value, **kw)
    return states


def _task_params(backbone, head_spec, head, per_task_bn):
    params = dict(backbone.params)
    params[head_spec.name] = head
    if per_task_bn:
        for spec in backbone.layers:
            if spec.kind == BATCHNORM:
                params[spec.name] = {"bn": backbone.params[spec.name]["bn"].copy()}
    return params


def build_mask_network(backbone, num_classes, config):
    """Step-0 piggyback network plus its mask states (before any update)."""
    head_spec, head = fresh_head(backbone, num_classes, config)
    per_task_bn = config.bn_mode == BN_PER_TASK
    states = init_mask_states(backbone, config)
    net = Network(
        backbone.layers[:-1] + [head_spec],
        _task_params(backbone, head_spec, head, per_task_bn),
        masks={name: s.binary for name, s in states.items()},
        bn_mode=BN_TRAIN if per_task_bn else BN_FROZEN,
    )
    return net, states


def build_classifier_network(backbone, num_classes, config, head=None):
    head_spec, head = fresh_head(backbone, num_classes, config, head)
    return Network(backbone.layers[:-1] + [head_spec], _task_params(backbone, head_spec, head, False))


def _head_group(head_spec, config):
    return _group("head", "head", _weight_keys(head_spec), config.head_optimizer, config.head_lr, config)


def train_task_mask(backbone, dataset, config, eval_dataset=None, task_id="task"):
    """Learn a mask per maskable layer plus a fresh head; the backbone is only read."""
    t0 = time.perf_counter()
    net, states = build_mask_network(backbone, dataset.num_classes, config)
    head_spec = net.head
    groups = [_head_group(head_spec, config)]
    mask_keys = [(name, "mask") for name in states]
    scaling = INVERSE_MEAN_ABS if config.mask_optimizer == SGDM and config.mask_grad_scaling else NO_SCALING
    groups.append(_group("mask", "mask", mask_keys, config.mask_optimizer, config.mask_lr, config, scaling))
    bn_names = [s.name for s in backbone.layers if s.kind == BATCHNORM]
    if config.bn_mode == BN_PER_TASK and bn_names:
        bn_keys = [(n, slot) for n in bn_names for slot in ("gamma", "beta")]
        groups.append(_group("batchnorm", "batchnorm", bn_keys, ADAM, config.bn_lr, config))
    scale_refs = {(name, "mask"): backbone.params[name]["weight"] for name in states}
    history = _Trainer(net, groups, config, states, scale_refs).fit(dataset)

    bn = None
    if config.bn_mode == BN_PER_TASK and bn_names:
        bn = {n: net.params[n]["bn"] for n in bn_names}
    artifact = TaskArtifact(
        task_id=task_id,
        backbone_checksum=backbone.checksum,
        masks={name: s.refresh() for name, s in states.items()},
        head={"weight": net.params[head_spec.name]["weight"], "bias": net.params[head_spec.name]["bias"]},
        head_spec=head_spec,
        mode=config.mask_mode,
        tau=config.tau,
        tau_lo=config.tau_lo,
        bn=bn,
        metadata={
            "task_id": task_id,
            "dataset": dataset.content_hash,
            "config": config.to_dict(),
            "bn_trains_running_stats": bn is not None,
        },
    )
    report = RunReport("piggyback", config.to_dict(), backbone.checksum, history)
    report.sparsity = sparsity_report(artifact)
    report.real_masks = {name: s.real.copy() for name, s in states.items()}
    return artifact, _finish(report, apply_task(backbone, artifact), eval_dataset, t0)


# -- baselines -------------------------------------------------------------------

CLASSIFIER_ONLY = "classifier-only"
FINETUNE = "finetune"


def train_baseline(kind, backbone, dataset, config, eval_dataset=None, head=None):
    """Classifier-only trains a fresh head on frozen features; finetune trains a
    private float64 copy of every backbone weight plus the head. ``head`` starts
    from given head parameters instead of the seeded init."""
    t0 = time.perf_counter()
    if kind == CLASSIFIER_ONLY:
        net = build_classifier_network(backbone, dataset.num_classes, config, head)
        groups = [_head_group(net.head, config)]
    elif kind == FINETUNE:
        head_spec, head = fresh_head(backbone, dataset.num_classes, config, head)
        params = {}
        for spec in backbone.layers[:-1]:
            p = backbone.params.get(spec.name)
            if p is None:
                continue
            if spec.kind == BATCHNORM:
                params[spec.name] = {"bn": p["bn"].copy()}
            else:
                params[spec.name] = {k: None if v is None else np.array(v) for k, v in p.items()}
        params[head_spec.name] = head
        layers = backbone.layers[:-1] + [head_spec]
        net = Network(layers, params, bn_mode=BN_TRAIN)
        weight_keys, bn_keys = [], []
        for spec in layers[:-1]:
            if spec.has_weight:
                weight_keys += _weight_keys(spec)
            elif spec.kind == BATCHNORM:
                bn_keys += [(spec.name, "gamma"), (spec.name, "beta")]
        groups = [
            _head_group(head_spec, config),
            _group("backbone", "backbone", weight_keys, config.backbone_optimizer, config.backbone_lr, config),
        ]
        if bn_keys:
            groups.append(_group("batchnorm", "batchnorm", bn_keys, config.backbone_optimizer, config.backbone_lr, config))
    else:
        raise ConfigError(f"unknown baseline kind {kind!r}")
    history = _Trainer(net, groups, config).fit(dataset)
    report = RunReport(kind, config.to_dict(), backbone.checksum, history)
    return _finish(report, net, eval_dataset, t0)


# -- analyses --------------------------------------------------------------------

def sparsity_report(artifact):
    """Per-layer and parameter-weighted total fraction of zero mask entries."""
    rows = []
    total_params = total_zeros = 0
    for name, m in artifact.masks.items():
        n = int(m.size)
        z = int(np.count_nonzero(m == 0))
        rows.append({"layer": name, "params": n, "zeros": z, "fraction": z / n if n else 0.0})
        total_params += n
        total_zeros += z
    total = {
        "layer": "total",
        "params": total_params,
        "zeros": total_zeros,
        "fraction": total_zeros / total_params if total_params else 0.0,
    }
    return {"layers": rows, "total": total}


def sparsity_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "params", "zeros", "fraction"])
    for row in report["layers"] + [report["total"]]:
        w.writerow([row["layer"], row["params"], row["zeros"], repr(float(row["fraction"]))])
    return buf.getvalue()


def threshold_sweep(real_masks, taus, mode=BINARY, tau_lo=-5e-3):
    """Post-hoc total zero fraction of saved real-valued masks at each threshold."""
    out = []
    for tau in taus:
        n = z = 0
        for m_r in real_masks.values():
            m = MaskState(m_r, tau=tau, mode=mode, tau_lo=tau_lo).binary
            n += m.size
            z += int(np.count_nonzero(m == 0))
        out.append((tau, z / n if n else 0.0))
    return out


def init_comparison(seed_task, target_task, config, pretrain_config=None):
    """Train target-task masks over a pretrained backbone and over a random one.

    ``seed_task`` and ``target_task`` are ``(train, eval)`` pairs.
    """
    pretrain_config = pretrain_config or config
    pretrained = pretrain_backbone(seed_task[0], pretrain_config)
    random = random_backbone(seed_task[0], pretrain_config)
    result = {"chance_error": 1.0 - 1.0 / target_task[0].num_classes}
    for label, bb in (("pretrained", pretrained), ("random", random)):
        _, report = train_task_mask(bb, target_task[0], config, eval_dataset=target_task[1], task_id=label)
        result[f"{label}_error"] = report.final_error
        result[f"{label}_backbone"] = bb.checksum
        result[f"{label}_sparsity"] = report.sparsity["total"]["fraction"]
    return result


def suite_requires_adaptation(seed_task, target_task, config, pretrain_config=None):
    """Linear probe on a frozen random backbone vs. a jointly trained network on the
    target task's training data. Returns ``(probe_accuracy, joint_accuracy)``."""
    pretrain_config = pretrain_config or config
    random = random_backbone(seed_task[0], pretrain_config)
    probe = train_baseline(CLASSIFIER_ONLY, random, target_task[0], config)
    joint = train_baseline(FINETUNE, random, target_task[0], pretrain_config)
    probe_acc = 1.0 - evaluate(probe.network, target_task[0])[0]
    joint_acc = 1.0 - evaluate(joint.network, target_task[0])[0]
    return probe_acc, joint_acc
