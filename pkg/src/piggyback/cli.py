"""Command-line interface: ``piggyback <command> [flags]``.

stdout carries one ``key=value`` line per fact. Files go to ``--out``, which
defaults to ``$PIGGYBACK_OUT`` or the working directory, and every run writes
a ``<command>.config.json`` echo of its resolved settings. Training settings
resolve as flags over the ``--config`` JSON file over built-in defaults.

Exit codes: 0 success, 1 usage or configuration error, 2 data, format or
binding error, 3 training divergence.
"""

import argparse
import difflib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from piggyback import presets
from piggyback.binio import sha256
from piggyback.data import Dataset, TaskSuiteSpec, generate_task_suite, load_dataset, save_dataset
from piggyback.errors import ConfigError, DataError, PiggybackError, TrainingError
from piggyback.registry import (
    BACKBONE_MAGIC,
    MASK_MAGIC,
    TASK_MAGIC,
    BackboneSnapshot,
    TaskArtifact,
    apply_task,
    load_backbone,
    load_real_masks,
    load_task,
    overhead_ratio,
    packed_size,
    save_backbone,
    save_real_masks,
    save_task,
)
from piggyback.data import MAGIC as DATASET_MAGIC
from piggyback.training import (
    CLASSIFIER_ONLY,
    FINETUNE,
    TrainConfig,
    evaluate,
    init_comparison,
    pretrain,
    sparsity_csv,
    sparsity_report,
    suite_requires_adaptation,
    threshold_sweep,
    train_baseline,
    train_task_mask,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kw):
        kw.setdefault("allow_abbrev", False)
        super().__init__(*args, **kw)

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ints(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _bool(text):
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _shift(text):
    """``kind`` or ``kind:key=value,key=value``; values parse as JSON when they can."""
    kind, _, rest = text.partition(":")
    shift = {"kind": kind}
    for item in filter(None, rest.split(",")):
        key, eq, value = item.partition("=")
        if not eq:
            raise argparse.ArgumentTypeError(f"bad shift parameter {item!r}, expected key=value")
        try:
            shift[key] = json.loads(value)
        except json.JSONDecodeError:
            shift[key] = value
    return shift


# flag -> (TrainConfig field, type, choices)
STEP_FLAGS = {
    "--seed": ("seed", int, None),
    "--epochs": ("epochs", int, None),
    "--batch-size": ("batch_size", int, None),
    "--momentum": ("momentum", float, None),
    "--decay-factor": ("decay_factor", float, None),
    "--decay-epochs": ("decay_epochs", _ints, None),
}
ARCH_FLAGS = {
    "--arch": ("arch", str, ("mlp", "mlp-bn", "cnn")),
    "--hidden": ("hidden", _ints, None),
    "--channels": ("channels", _ints, None),
}
BACKBONE_FLAGS = {
    "--backbone-optimizer": ("backbone_optimizer", str, ("adam", "sgdm")),
    "--backbone-lr": ("backbone_lr", float, None),
}
HEAD_FLAGS = {
    "--head-optimizer": ("head_optimizer", str, ("adam", "sgdm")),
    "--head-lr": ("head_lr", float, None),
}
MASK_FLAGS = {
    "--mask-init": ("mask_init_value", float, None),
    "--mask-init-strategy": ("mask_init", str, ("constant", "proportional")),
    "--tau": ("tau", float, None),
    "--tau-lo": ("tau_lo", float, None),
    "--mask-mode": ("mask_mode", str, ("binary", "ternary")),
    "--mask-optimizer": ("mask_optimizer", str, ("adam", "sgdm")),
    "--mask-lr": ("mask_lr", float, None),
    "--mask-grad-scaling": ("mask_grad_scaling", _bool, None),
    "--bn-mode": ("bn_mode", str, ("frozen", "per-task")),
    "--bn-lr": ("bn_lr", float, None),
}
SUITE_FLAGS = {
    "--seed": ("seed", int, None),
    "--kind": ("kind", str, ("vector", "image")),
    "--input-dim": ("input_dim", int, None),
    "--image-size": ("image_size", int, None),
    "--classes": ("num_classes", int, None),
    "--clusters": ("clusters_per_class", int, None),
    "--train-samples": ("train_samples", int, None),
    "--eval-samples": ("eval_samples", int, None),
    "--noise": ("noise", float, None),
}


def _add_flags(parser, table, prefix=""):
    for flag, (dest, kind, choices) in table.items():
        parser.add_argument(flag, dest=prefix + dest, type=kind, choices=choices, default=argparse.SUPPRESS,
                            metavar=None if choices else dest.upper())


def _common(parser, config_file=True):
    parser.add_argument("--out", default=None, help="output directory (default: $PIGGYBACK_OUT or .)")
    if config_file:
        parser.add_argument("--config", default=None, help="JSON file of settings; flags take precedence")


def build_parser():
    p = _Parser(prog="piggyback", description="Per-task binary masks over a frozen backbone.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    c = sub.add_parser("pretrain", help="train a backbone on a seed-task dataset")
    c.add_argument("--data", required=True)
    c.add_argument("--eval-data")
    _add_flags(c, {**STEP_FLAGS, **ARCH_FLAGS, **BACKBONE_FLAGS})
    _common(c)

    c = sub.add_parser("train-mask", help="learn a task mask and head over a frozen backbone")
    c.add_argument("--backbone", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--eval-data")
    c.add_argument("--task-id")
    c.add_argument("--save-real-masks", action="store_true", help="also write the real-valued masks sidecar")
    _add_flags(c, {**STEP_FLAGS, **HEAD_FLAGS, **MASK_FLAGS})
    _common(c)

    c = sub.add_parser("train-baseline", help="classifier-only or finetune baseline")
    c.add_argument("--kind", required=True, choices=(CLASSIFIER_ONLY, FINETUNE))
    c.add_argument("--backbone", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--eval-data")
    _add_flags(c, {**STEP_FLAGS, **HEAD_FLAGS, **BACKBONE_FLAGS})
    _common(c)

    c = sub.add_parser("eval", help="top-1 error of a backbone or a task on a dataset")
    c.add_argument("--backbone", required=True)
    c.add_argument("--task", help="task artifact; omit to evaluate the backbone itself")
    c.add_argument("--data", required=True)
    _common(c, config_file=False)

    c = sub.add_parser("list-tasks", help="list task artifacts in a directory and their binding")
    c.add_argument("--backbone", required=True)
    c.add_argument("--dir", help="directory to scan (default: --out)")
    _common(c, config_file=False)

    c = sub.add_parser("sparsity-report", help="per-layer zero fractions, optionally a threshold sweep")
    c.add_argument("--task", required=True)
    c.add_argument("--backbone")
    c.add_argument("--real-masks", help="real-valued mask sidecar for a post-hoc threshold sweep")
    c.add_argument("--taus", type=_floats, default=(1e-3, 5e-3, 1e-2))
    _common(c, config_file=False)

    c = sub.add_parser("init-compare", help="masks over a pretrained vs a random frozen backbone")
    c.add_argument("--seed-data", required=True)
    c.add_argument("--target-data", required=True)
    c.add_argument("--target-eval", required=True)
    c.add_argument("--seeds", type=_ints, default=None, help="comma-separated seeds (default: --seed)")
    c.add_argument("--jobs", type=int, default=1)
    c.add_argument("--pretrain-epochs", dest="pre_epochs", type=int, default=argparse.SUPPRESS)
    _add_flags(c, {**STEP_FLAGS, **HEAD_FLAGS, **MASK_FLAGS})
    _add_flags(c, {**ARCH_FLAGS, **BACKBONE_FLAGS}, prefix="pre_")
    _common(c)

    c = sub.add_parser("overhead", help="storage ratio of a backbone plus k task masks")
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--backbone")
    src.add_argument("--params", type=int, help="maskable parameter count")
    c.add_argument("--tasks", type=int, default=1)
    _common(c, config_file=False)

    c = sub.add_parser("gen-data", help="generate a synthetic task suite as dataset files")
    _add_flags(c, SUITE_FLAGS)
    c.add_argument("--shift", dest="shifts", type=_shift, action="append", default=argparse.SUPPRESS,
                   help="task shift, e.g. rotation:angle=45 (repeat for more tasks)")
    c.add_argument("--adaptation-check", dest="adaptation_check", type=_bool, default=True,
                   help="verify each shifted task needs feature adaptation (default true)")
    _common(c)

    c = sub.add_parser("pack-inspect", help="summarise any piggyback file")
    c.add_argument("--file", required=True)
    _common(c, config_file=False)
    return p


# -- helpers ---------------------------------------------------------------------

class _Run:
    """Collects stdout lines and output files for one command."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        out = args.out if args.out is not None else os.environ.get("PIGGYBACK_OUT", ".")
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.lines = []
        self.inputs = {}

    def emit(self, key, value):
        if isinstance(value, float):
            value = repr(value)
        self.lines.append(f"{key}={value}")

    def write(self, name, content):
        path = self.out / name
        if isinstance(content, str):
            content = content.encode()
        path.write_bytes(content)
        self.emit("file", path.as_posix())
        return path

    def input(self, role, path):
        p = Path(path)
        if not p.exists():
            raise DataError(f"{role} file not found: {p}")
        self.inputs[role] = {"path": str(path), "sha256": sha256(p.read_bytes()).hex()}
        return p

    def echo(self, resolved):
        doc = {"command": self.args.command, "argv": self.argv, "inputs": self.inputs, "resolved": resolved}
        self.write(f"{self.args.command}.config.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _file_settings(args):
    if not getattr(args, "config", None):
        return {}
    path = Path(args.config)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return d


def _flag_settings(args, tables, prefix=""):
    fields = {prefix + dest for table in tables for dest, _, _ in table.values()}
    return {k[len(prefix):]: v for k, v in vars(args).items() if k in fields}


def _train_config(args, base, tables):
    settings = {**base.to_dict(), **_file_settings(args), **_flag_settings(args, tables)}
    return TrainConfig.from_dict(settings)


def _report(run, stem, report):
    run.write(f"{stem}.report.txt", report.to_text())
    run.write(f"{stem}.report.json", report.to_json())
    run.emit("final_error", "none" if report.final_error is None else repr(report.final_error))


def _load_data(run, role, path):
    run.input(role, path)
    return load_dataset(path)


# -- commands --------------------------------------------------------------------

def cmd_pretrain(run):
    a = run.args
    cfg = _train_config(a, TrainConfig(), [STEP_FLAGS, ARCH_FLAGS, BACKBONE_FLAGS])
    ds = _load_data(run, "data", a.data)
    ev = _load_data(run, "eval_data", a.eval_data) if a.eval_data else None
    run.echo({"train_config": cfg.to_dict()})
    snapshot, report = pretrain(ds, cfg, ev)
    run.write("backbone.pgbb", snapshot.to_bytes())
    _report(run, "pretrain", report)
    run.emit("backbone_checksum", snapshot.checksum)
    run.emit("maskable_params", snapshot.maskable_params)


def cmd_train_mask(run):
    a = run.args
    cfg = _train_config(a, TrainConfig(), [STEP_FLAGS, HEAD_FLAGS, MASK_FLAGS])
    run.input("backbone", a.backbone)
    backbone = load_backbone(a.backbone)
    ds = _load_data(run, "data", a.data)
    ev = _load_data(run, "eval_data", a.eval_data) if a.eval_data else None
    task_id = a.task_id or Path(a.data).stem.split(".")[0]
    run.echo({"train_config": cfg.to_dict(), "task_id": task_id})
    artifact, report = train_task_mask(backbone, ds, cfg, ev, task_id)
    if backbone.recompute_checksum() != backbone.checksum:
        raise TrainingError("backbone changed during mask training")
    run.write(f"{task_id}.pgbm", artifact.to_bytes())
    _report(run, task_id, report)
    run.write(f"{task_id}.sparsity.csv", sparsity_csv(report.sparsity))
    if a.save_real_masks:
        path = run.out / f"{task_id}.mreal.pgmr"
        save_real_masks(report.real_masks, path)
        run.emit("file", path.as_posix())
    run.emit("task_id", task_id)
    run.emit("mask_bytes", artifact.mask_bytes)
    run.emit("sparsity", report.sparsity["total"]["fraction"])
    run.emit("backbone_checksum", backbone.checksum)


def cmd_train_baseline(run):
    a = run.args
    cfg = _train_config(a, TrainConfig(), [STEP_FLAGS, HEAD_FLAGS, BACKBONE_FLAGS])
    run.input("backbone", a.backbone)
    backbone = load_backbone(a.backbone)
    ds = _load_data(run, "data", a.data)
    ev = _load_data(run, "eval_data", a.eval_data) if a.eval_data else None
    run.echo({"train_config": cfg.to_dict(), "kind": a.kind})
    report = train_baseline(a.kind, backbone, ds, cfg, ev)
    _report(run, a.kind, report)


def cmd_eval(run):
    a = run.args
    run.input("backbone", a.backbone)
    backbone = load_backbone(a.backbone)
    if a.task:
        run.input("task", a.task)
        model = apply_task(backbone, load_task(a.task, backbone))
    else:
        model = backbone.network()
    ds = _load_data(run, "data", a.data)
    run.echo({})
    error, per_class = evaluate(model, ds)
    doc = {"error": error, "per_class_accuracy": per_class, "samples": len(ds)}
    run.write("eval.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    run.emit("error", error)
    for k, acc in enumerate(per_class):
        run.emit(f"class.{k}.accuracy", "none" if acc is None else repr(acc))


def cmd_list_tasks(run):
    a = run.args
    run.input("backbone", a.backbone)
    backbone = load_backbone(a.backbone)
    folder = Path(a.dir) if a.dir else run.out
    run.echo({"dir": str(folder)})
    paths = sorted(folder.glob("*.pgbm"))
    run.emit("tasks", len(paths))
    for path in paths:
        try:
            art = TaskArtifact.from_bytes(path.read_bytes())
        except DataError as e:
            run.emit(f"task.{path.name}.status", f"unreadable: {e}".replace("\n", " "))
            continue
        bound = art.backbone_checksum == backbone.checksum
        run.emit(f"task.{path.name}.id", art.task_id)
        run.emit(f"task.{path.name}.bound", "yes" if bound else "no")
        run.emit(f"task.{path.name}.mode", art.mode)
        run.emit(f"task.{path.name}.mask_bytes", art.mask_bytes)


def cmd_sparsity_report(run):
    a = run.args
    run.input("task", a.task)
    backbone = None
    if a.backbone:
        run.input("backbone", a.backbone)
        backbone = load_backbone(a.backbone)
    art = load_task(a.task, backbone)
    run.echo({"taus": list(a.taus)})
    rep = sparsity_report(art)
    run.write(f"{art.task_id}.sparsity.csv", sparsity_csv(rep))
    for row in rep["layers"]:
        run.emit(f"sparsity.{row['layer']}", row["fraction"])
    run.emit("sparsity.total", rep["total"]["fraction"])
    if a.real_masks:
        run.input("real_masks", a.real_masks)
        sweep = threshold_sweep(load_real_masks(a.real_masks), a.taus, art.mode, art.tau_lo)
        lines = ["tau,fraction"] + [f"{tau!r},{frac!r}" for tau, frac in sweep]
        run.write(f"{art.task_id}.threshold_sweep.csv", "\n".join(lines) + "\n")
        for tau, frac in sweep:
            run.emit(f"sweep.{tau!r}", frac)
        fracs = [f for _, f in sweep]
        run.emit("sweep.monotone", "yes" if all(x <= y for x, y in zip(fracs, fracs[1:])) else "no")


def cmd_init_compare(run):
    a = run.args
    seed_train = _load_data(run, "seed_data", a.seed_data)
    target = (_load_data(run, "target_data", a.target_data), _load_data(run, "target_eval", a.target_eval))
    base = _train_config(a, presets.task_config(0), [STEP_FLAGS, HEAD_FLAGS, MASK_FLAGS])
    pre = presets.pretrain_config(0).to_dict()
    pre.update(_flag_settings(a, [ARCH_FLAGS, BACKBONE_FLAGS], prefix="pre_"))
    if hasattr(a, "pre_epochs"):
        pre["epochs"] = a.pre_epochs
    seeds = a.seeds if a.seeds else (base.seed,)
    if a.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    run.echo({"task_config": base.to_dict(), "pretrain_config": pre, "seeds": list(seeds)})

    def one(seed):
        return init_comparison((seed_train, None), target, base.replace(seed=seed),
                               TrainConfig.from_dict({**pre, "seed": seed}))

    with ThreadPoolExecutor(max_workers=a.jobs) as pool:
        results = list(pool.map(one, seeds))
    rows = ["seed,pretrained_error,random_error,chance_error"]
    for seed, r in zip(seeds, results):
        rows.append(f"{seed},{r['pretrained_error']!r},{r['random_error']!r},{r['chance_error']!r}")
    med = {k: float(np.median([r[k] for r in results])) for k in ("pretrained_error", "random_error")}
    chance = results[0]["chance_error"]
    summary = {"seeds": list(seeds), "runs": results, "median": med, "chance_error": chance}
    run.write("init_compare.csv", "\n".join(rows) + "\n")
    run.write("init_compare.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    run.emit("median.pretrained_error", med["pretrained_error"])
    run.emit("median.random_error", med["random_error"])
    run.emit("chance_error", chance)
    run.emit("pretrained_le_random", "yes" if med["pretrained_error"] <= med["random_error"] else "no")
    run.emit("random_beats_chance", "yes" if med["random_error"] < chance else "no")


def cmd_overhead(run):
    a = run.args
    if a.tasks < 0:
        raise ConfigError("--tasks must be >= 0")
    if a.backbone:
        run.input("backbone", a.backbone)
        backbone = load_backbone(a.backbone)
        n = backbone.maskable_params
        per_task = sum(packed_size(int(np.prod(s.weight_shape()))) for s in backbone.maskable_layers)
    else:
        if a.params < 1:
            raise ConfigError("--params must be >= 1")
        n, per_task = a.params, packed_size(a.params)
    run.echo({"maskable_params": n, "tasks": a.tasks})
    run.emit("maskable_params", n)
    run.emit("tasks", a.tasks)
    run.emit("ratio", overhead_ratio(n, a.tasks))
    run.emit("per_task_overhead", overhead_ratio(n, 1) - 1.0)
    run.emit("mask_bytes_per_task", per_task)


def cmd_gen_data(run):
    a = run.args
    settings = {**TaskSuiteSpec().to_dict(), **_file_settings(a), **_flag_settings(a, [SUITE_FLAGS])}
    if hasattr(a, "shifts"):
        settings["shifts"] = a.shifts
    spec = TaskSuiteSpec.from_dict(settings)
    run.echo({"suite": spec.to_dict(), "adaptation_check": a.adaptation_check})
    suite = generate_task_suite(spec)
    manifest = {"suite": spec.to_dict(), "tasks": []}
    for t, (train, ev) in enumerate(suite):
        entry = {"task": t, "shift": train.provenance["shift"]}
        for ds in (train, ev):
            path = run.write(f"task{t}.{ds.split}.pgds", ds.to_bytes())
            entry[ds.split] = {"file": path.name, "sha256": ds.content_hash, "samples": len(ds)}
        if a.adaptation_check and t > 0 and entry["shift"]["kind"] != "none":
            probe, joint = suite_requires_adaptation(suite[0], (train, ev), presets.task_config(spec.seed),
                                                     presets.pretrain_config(spec.seed))
            entry["adaptation"] = {"probe_accuracy": probe, "joint_accuracy": joint, "required": probe < joint}
            run.emit(f"task{t}.probe_accuracy", probe)
            run.emit(f"task{t}.joint_accuracy", joint)
            run.emit(f"task{t}.requires_adaptation", "yes" if probe < joint else "no")
        manifest["tasks"].append(entry)
    run.write("suite.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    run.emit("tasks", len(suite))


def cmd_pack_inspect(run):
    a = run.args
    path = run.input("file", a.file)
    data = path.read_bytes()
    run.echo({})
    magic = data[:4]
    run.emit("bytes", len(data))
    run.emit("magic", magic.decode("ascii", "replace"))
    if magic == BACKBONE_MAGIC:
        bb = BackboneSnapshot.from_bytes(data)
        run.emit("checksum", bb.checksum)
        run.emit("layers", ",".join(s.name for s in bb.layers))
        run.emit("maskable_params", bb.maskable_params)
        run.emit("input_shape", ",".join(map(str, bb.input_shape)))
    elif magic == TASK_MAGIC:
        art = TaskArtifact.from_bytes(data)
        run.emit("task_id", art.task_id)
        run.emit("backbone_checksum", art.backbone_checksum)
        run.emit("mode", art.mode)
        run.emit("tau", art.tau)
        for name, packed in art.packed_masks().items():
            run.emit(f"mask.{name}.params", art.masks[name].size)
            run.emit(f"mask.{name}.bytes", len(packed))
        run.emit("mask_bytes", art.mask_bytes)
        run.emit("extra_bytes", art.extra_bytes)
        run.emit("batchnorm", "yes" if art.bn else "no")
    elif magic == DATASET_MAGIC:
        ds = Dataset.from_bytes(data)
        run.emit("samples", len(ds))
        run.emit("sample_shape", ",".join(map(str, ds.sample_shape)))
        run.emit("classes", ds.num_classes)
        run.emit("split", ds.split)
        run.emit("content_hash", ds.content_hash)
    elif magic == MASK_MAGIC:
        for name, m in load_real_masks(path).items():
            run.emit(f"real_mask.{name}.shape", ",".join(map(str, m.shape)))
    else:
        raise DataError(f"unrecognised file magic {magic!r}")


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train-mask": cmd_train_mask,
    "train-baseline": cmd_train_baseline,
    "eval": cmd_eval,
    "list-tasks": cmd_list_tasks,
    "sparsity-report": cmd_sparsity_report,
    "init-compare": cmd_init_compare,
    "overhead": cmd_overhead,
    "gen-data": cmd_gen_data,
    "pack-inspect": cmd_pack_inspect,
}


def _suggest(parser, argv, extras):
    """Usage message for unknown flags, with close matches from the chosen command."""
    sub = next((a for a in parser._actions if isinstance(a, argparse._SubParsersAction)), None)
    options = []
    if sub is not None:
        for word in argv:
            if word in sub.choices:
                options = list(sub.choices[word]._option_string_actions)
                break
    parts = []
    for word in extras:
        flag = word.split("=", 1)[0]
        close = difflib.get_close_matches(flag, options, n=1) if flag.startswith("-") else []
        parts.append(f"{word} (did you mean {close[0]}?)" if close else word)
    return "unrecognized arguments: " + " ".join(parts)


def run(argv=None, stdout=None, stderr=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
        if extras:
            raise UsageError(f"piggyback {args.command}: " + _suggest(parser, argv, extras))
    except UsageError as e:
        print(f"error: {e}", file=stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    r = _Run(args, argv)
    try:
        COMMANDS[args.command](r)
        code = EXIT_OK
    except ConfigError as e:
        print(f"error: {e}", file=stderr)
        code = EXIT_USAGE
    except TrainingError as e:
        print(f"error: {e}", file=stderr)
        code = EXIT_DIVERGED
    except (PiggybackError, OSError) as e:
        print(f"error: {e}", file=stderr)
        code = EXIT_DATA
    for line in r.lines:
        print(line, file=stdout)
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
