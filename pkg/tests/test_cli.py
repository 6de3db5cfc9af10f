"""Command-line surface: exit codes and deterministic end-to-end smoke runs."""

import json

import pytest
import yaml
from click.testing import CliRunner

from rcrn.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny corpus plus a checkpoint trained for a handful of steps."""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    cfg = root / "config.yaml"
    cfg.write_text(yaml.safe_dump({
        "synth": {"seed": 4, "n_train": 16, "n_indist": 8, "n_ood": 8},
        "train": {"iterations": 4, "warmup": 2, "batch_size": 4, "log_every": 1,
                  "model": {"dim": 8, "hidden": 6, "trf_hidden": 8, "trf_dim": 6, "sim_dim": 4, "cls_hidden": 4,
                            "reg_hidden": 4}},
    }))
    res = runner.invoke(main, ["gen", "--config", str(cfg), "--out", str(root / "corpus")])
    assert res.exit_code == 0, res.output
    res = runner.invoke(main, ["--threads", "1", "train", "--config", str(cfg), "--corpus", str(root / "corpus"),
                               "--out", str(root / "model.pt"), "--log", str(root / "log.jsonl")])
    assert res.exit_code == 0, res.output
    return root


def test_gen_is_byte_identical(tmp_path, workspace):
    runner = CliRunner()
    res = runner.invoke(main, ["gen", "--config", str(workspace / "config.yaml"), "--out", str(tmp_path / "again")])
    assert res.exit_code == 0, res.output
    for name in ("samples.jsonl", "splits.json", "stats.json"):
        assert (tmp_path / "again" / name).read_bytes() == (workspace / "corpus" / name).read_bytes()


def test_flag_overrides_config(tmp_path, workspace):
    runner = CliRunner()
    res = runner.invoke(main, ["gen", "--config", str(workspace / "config.yaml"), "--seed", "5",
                               "--out", str(tmp_path / "other")])
    assert res.exit_code == 0, res.output
    meta = json.loads((tmp_path / "other" / "splits.json").read_text())
    assert meta["config"]["seed"] == 5 and meta["config"]["n_train"] == 16


def test_train_writes_log(workspace):
    lines = (workspace / "log.jsonl").read_text().splitlines()
    assert [json.loads(x)["iteration"] for x in lines] == [0, 1, 2, 3]


def test_eval_writes_report(tmp_path, workspace):
    out = tmp_path / "report.json"
    res = CliRunner().invoke(main, ["eval", "--checkpoint", str(workspace / "model.pt"), "--corpus",
                                    str(workspace / "corpus"), "--mode", "oracle", "--out", str(out),
                                    "--csv", str(tmp_path / "r.csv")])
    assert res.exit_code == 0, res.output
    report = json.loads(out.read_text())
    assert report["mode"] == "oracle" and {"full", "in-dist-test", "ood-test"} <= set(report["splits"])
    assert "train" not in report["splits"]
    assert (tmp_path / "r.csv").read_text().startswith("split,")


def test_eval_on_empty_corpus_exits_one(tmp_path, workspace):
    empty = tmp_path / "empty"
    empty.mkdir()
    (empty / "samples.jsonl").write_text("")
    res = CliRunner().invoke(main, ["eval", "--checkpoint", str(workspace / "model.pt"), "--corpus", str(empty)])
    assert res.exit_code == 1
    assert "InsufficientSamples" in res.output


@pytest.mark.parametrize("argv", [
    ["eval"],
    ["eval", "--checkpoint", "/does/not/exist.pt", "--corpus", "."],
    ["train", "--corpus", ".", "--out", "m.pt", "--preset", "giant"],
    ["bogus"],
])
def test_usage_errors_exit_two(argv):
    assert CliRunner().invoke(main, argv).exit_code == 2


def test_trace_verifies(tmp_path, workspace):
    out = tmp_path / "trace.json"
    for mode in ("joint", "oracle"):
        res = CliRunner().invoke(main, ["trace", "--checkpoint", str(workspace / "model.pt"), "--corpus",
                                        str(workspace / "corpus"), "--mode", mode, "--out", str(out), "--verify"])
        assert res.exit_code == 0, res.output
        assert "verify: ok" in res.output
        doc = json.loads(out.read_text())
        assert doc["mode"] == mode and doc["steps"]


def test_trace_unknown_sample_exits_one(workspace):
    res = CliRunner().invoke(main, ["trace", "--checkpoint", str(workspace / "model.pt"), "--corpus",
                                    str(workspace / "corpus"), "--sample-id", "nope"])
    assert res.exit_code == 1


def test_diagnose_runs(tmp_path, workspace):
    res = CliRunner().invoke(main, ["diagnose", "--checkpoint", str(workspace / "model.pt"), "--corpus",
                                    str(workspace / "corpus"), "--out", str(tmp_path / "d.json")])
    assert res.exit_code == 0, res.output
    assert "recall@k" in res.output
    assert "entity_recall_mp" in json.loads((tmp_path / "d.json").read_text())


def test_gradcheck_command(tmp_path):
    res = CliRunner().invoke(main, ["gradcheck", "--seed", "0", "--out", str(tmp_path / "g.json")])
    assert res.exit_code == 0, res.output
    assert json.loads((tmp_path / "g.json").read_text())["passed"] is True
