import io
import json
import re

import pytest

from piggyback.cli import run

LINE = re.compile(r"^[A-Za-z0-9_.\-]+=.*$")


def cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run([str(a) for a in argv], stdout=out, stderr=err)
    lines = out.getvalue().splitlines()
    assert all(LINE.match(line) for line in lines), lines
    values = {}
    for line in lines:
        k, _, v = line.partition("=")
        values.setdefault(k, v)
    return code, values, err.getvalue()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, run_dir = root / "data", root / "run"
    code, _, err = cli("gen-data", "--seed", 1, "--train-samples", 200, "--eval-samples", 100,
                       "--adaptation-check", "false", "--out", data)
    assert code == 0, err
    code, _, err = cli("pretrain", "--data", data / "task0.train.pgds", "--epochs", 3, "--hidden", "16,6",
                       "--seed", 1, "--out", run_dir)
    assert code == 0, err
    code, _, err = cli("train-mask", "--backbone", run_dir / "backbone.pgbb", "--data", data / "task1.train.pgds",
                       "--eval-data", data / "task1.eval.pgds", "--epochs", 2, "--seed", 1, "--save-real-masks",
                       "--out", run_dir)
    assert code == 0, err
    return root


def _snapshot(folder):
    return {p.name: p.read_bytes() for p in sorted(folder.iterdir()) if p.is_file()}


def test_overhead_prints_ratio(workspace):
    code, v, _ = cli("overhead", "--backbone", workspace / "run" / "backbone.pgbb", "--tasks", 9,
                     "--out", workspace / "misc")
    assert code == 0 and v["ratio"] == "1.28125" and v["per_task_overhead"] == "0.03125"
    code, v, _ = cli("overhead", "--params", 10000, "--tasks", 0, "--out", workspace / "misc")
    assert v["ratio"] == "1.0" and v["mask_bytes_per_task"] == "1250"


def test_train_mask_echoes_recipe_defaults(workspace):
    echo = json.loads((workspace / "run" / "train-mask.config.json").read_text())
    cfg = echo["resolved"]["train_config"]
    assert (cfg["mask_init_value"], cfg["tau"], cfg["mask_lr"], cfg["mask_optimizer"]) == (1e-2, 5e-3, 1e-4, "adam")
    assert set(echo["inputs"]) == {"backbone", "data", "eval_data"}


def test_repeated_runs_are_byte_identical(workspace):
    data, out = workspace / "data", workspace / "repeat"
    argv = [
        ("gen-data", "--seed", 7, "--train-samples", 120, "--eval-samples", 60, "--out", out),
        ("pretrain", "--data", out / "task0.train.pgds", "--epochs", 2, "--hidden", "8,4", "--seed", 3, "--out", out),
        ("train-mask", "--backbone", out / "backbone.pgbb", "--data", data / "task1.train.pgds",
         "--epochs", 2, "--seed", 3, "--save-real-masks", "--out", out),
        ("train-baseline", "--kind", "finetune", "--backbone", out / "backbone.pgbb",
         "--data", data / "task1.train.pgds", "--epochs", 1, "--out", out),
        ("sparsity-report", "--task", out / "task1.pgbm", "--real-masks", out / "task1.mreal.pgmr", "--out", out),
    ]
    for a in argv:
        assert cli(*a)[0] == 0
    first = _snapshot(out)
    for a in argv:
        assert cli(*a)[0] == 0
    assert _snapshot(out) == first


def test_config_precedence(workspace, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "tau": 0.01, "head_lr": 0.01}))
    code, _, err = cli("train-mask", "--backbone", workspace / "run" / "backbone.pgbb",
                       "--data", workspace / "data" / "task1.train.pgds", "--config", cfg, "--tau", 0.02,
                       "--out", tmp_path)
    assert code == 0, err
    resolved = json.loads((tmp_path / "train-mask.config.json").read_text())["resolved"]["train_config"]
    assert resolved["epochs"] == 1 and resolved["tau"] == 0.02 and resolved["head_lr"] == 0.01
    assert resolved["batch_size"] == 32


def test_env_default_out(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("PIGGYBACK_OUT", str(tmp_path / "envout"))
    code, _, _ = cli("overhead", "--params", 8)
    assert code == 0 and (tmp_path / "envout" / "overhead.config.json").exists()


def test_usage_error_suggests_flag(workspace, tmp_path):
    code, _, err = cli("train-mask", "--backbone", "b", "--data", "d", "--tua", 1, "--out", tmp_path)
    assert code == 1 and "--tau" in err
    assert cli("frobnicate")[0] == 1
    assert cli("overhead", "--out", tmp_path)[0] == 1


def test_bad_config_value_is_exit_1(workspace, tmp_path):
    code, _, _ = cli("train-mask", "--backbone", workspace / "run" / "backbone.pgbb",
                     "--data", workspace / "data" / "task1.train.pgds", "--tau", -1, "--out", tmp_path)
    assert code == 1


def test_data_errors_are_exit_2(workspace, tmp_path):
    run_dir = workspace / "run"
    assert cli("eval", "--backbone", tmp_path / "missing.pgbb", "--data", "x", "--out", tmp_path)[0] == 2
    broken = tmp_path / "broken.pgbm"
    broken.write_bytes((run_dir / "task1.pgbm").read_bytes()[:-5])
    code, _, err = cli("eval", "--backbone", run_dir / "backbone.pgbb", "--task", broken,
                       "--data", workspace / "data" / "task1.eval.pgds", "--out", tmp_path)
    assert code == 2 and "section" in err
    # a backbone with a different seed does not bind
    cli("pretrain", "--data", workspace / "data" / "task0.train.pgds", "--epochs", 1, "--hidden", "16,6",
        "--seed", 2, "--out", tmp_path)
    code, _, err = cli("eval", "--backbone", tmp_path / "backbone.pgbb", "--task", run_dir / "task1.pgbm",
                       "--data", workspace / "data" / "task1.eval.pgds", "--out", tmp_path)
    assert code == 2 and "backbone" in err


def test_divergence_is_exit_3(workspace, tmp_path):
    code, _, _ = cli("pretrain", "--data", workspace / "data" / "task0.train.pgds", "--epochs", 1,
                     "--backbone-optimizer", "sgdm", "--backbone-lr", 1e200, "--out", tmp_path)
    assert code == 3


def test_eval_list_and_inspect(workspace, tmp_path):
    run_dir, data = workspace / "run", workspace / "data"
    code, v, _ = cli("eval", "--backbone", run_dir / "backbone.pgbb", "--task", run_dir / "task1.pgbm",
                     "--data", data / "task1.eval.pgds", "--out", tmp_path)
    report = (run_dir / "task1.report.txt").read_text()
    assert code == 0 and f"final_error={v['error']}" in report
    code, v, _ = cli("list-tasks", "--backbone", run_dir / "backbone.pgbb", "--dir", run_dir, "--out", tmp_path)
    assert v["tasks"] == "1" and v["task.task1.pgbm.bound"] == "yes"
    for name, magic in (("backbone.pgbb", "PGBB"), ("task1.pgbm", "PGBM"), ("task1.mreal.pgmr", "PGMR")):
        code, v, _ = cli("pack-inspect", "--file", run_dir / name, "--out", tmp_path)
        assert code == 0 and v["magic"] == magic
    code, v, _ = cli("pack-inspect", "--file", data / "task0.eval.pgds", "--out", tmp_path)
    assert v["samples"] == "100" and v["split"] == "eval"
    _, v, _ = cli("pack-inspect", "--file", run_dir / "task1.pgbm", "--out", tmp_path)
    assert v["mask.fc1.bytes"] == str(-(-2 * 16 // 8)) and v["mask.fc2.bytes"] == str(-(-16 * 6 // 8))


def test_init_compare_jobs_do_not_change_results(workspace, tmp_path):
    data = workspace / "data"
    common = ["init-compare", "--seed-data", data / "task0.train.pgds", "--target-data", data / "task1.train.pgds",
              "--target-eval", data / "task1.eval.pgds", "--seeds", "0,1", "--epochs", 1, "--pretrain-epochs", 2,
              "--hidden", "8,4"]
    assert cli(*common, "--jobs", 1, "--out", tmp_path / "a")[0] == 0
    assert cli(*common, "--jobs", 2, "--out", tmp_path / "b")[0] == 0
    a, b = (tmp_path / "a" / "init_compare.json").read_bytes(), (tmp_path / "b" / "init_compare.json").read_bytes()
    assert a == b
