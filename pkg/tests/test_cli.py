import json
import os
import shutil

import pytest

from cfx.cli import (DEFAULTS, RunConfig, config_hash, read_config_file, resolve_config, run_cli,
                     UsageError)
from cfx.dataset import load_dataset
from cfx.propensity import load_labeled

SMALL_NET = ["--shared-layers", "1", "--neurons", "8", "--head-hidden", "8", "--latent-dim", "2",
             "--epochs", "2", "--batch-size", "32"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    assert run_cli(["synth", "--n", "300", "--seed", "3", "--out", str(d / "d.csv")]) == 0
    assert run_cli(["label", "--data", str(d / "d.csv"), "--out", str(d / "l.csv"), "--seed", "3"]) == 0
    assert run_cli(["train", "--data", str(d / "l.csv"), "--out", str(d / "m.ckpt"), "--seed", "3",
                    *SMALL_NET]) == 0
    return d


def test_synth_rerun_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run_cli(["synth", "--n", "1000", "--seed", "42", "--out", str(tmp_path / f"{name}.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.truth.csv").read_bytes() == (tmp_path / "b.truth.csv").read_bytes()
    head = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert head.startswith("# cfx synth config_hash=") and "seed=42" in head
    assert load_dataset(tmp_path / "a.csv").n == 1000


def test_out_of_range_scenario_exits_2(pipeline, capsys):
    d = pipeline
    code = run_cli(["effects", "--model", str(d / "m.ckpt"), "--data", str(d / "d.csv"),
                    "--out", str(d / "bad.csv"), "--set", "lighting=9"])
    assert code == 2
    assert "lighting level 9 outside valid range 0-3" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["synth"], ["synth", "--out", "x.csv", "--bogus", "1"],
                                  ["synth", "--out", "x.csv", "--n", "many"]])
def test_usage_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run_cli(argv) == 1


def test_missing_input_exits_2(tmp_path):
    assert run_cli(["label", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o.csv")]) == 2


def test_bad_schema_exits_2(tmp_path):
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    assert run_cli(["label", "--data", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "o.csv")]) == 2


def test_gradcheck_passes(tmp_path):
    assert run_cli(["gradcheck", "--gradcheck-configs", "3", "--out", str(tmp_path / "g.json")]) == 0
    doc = json.loads((tmp_path / "g.json").read_text())
    assert doc["passed"] and doc["max_rel_error"] <= 1e-4 and len(doc["configs"]) == 3
    assert doc["metadata"]["config"]["gradcheck_configs"] == 3


def test_gradcheck_failure_exits_3(tmp_path):
    assert run_cli(["gradcheck", "--gradcheck-configs", "1", "--gradcheck-tolerance", "1e-30",
                    "--out", str(tmp_path / "g.json")]) == 3


def test_help_lists_every_flag_with_default(capsys):
    for cmd in ("synth", "label", "train", "effects", "report", "eval", "gradcheck"):
        assert run_cli([cmd, "--help"]) == 0
        out = capsys.readouterr().out
        body = out.split("options:", 1)[1]
        # one entry per option: a line starting with "-" plus its wrapped continuation lines
        entries, cur = [], ""
        for ln in body.splitlines():
            if ln.lstrip().startswith("-"):
                if cur:
                    entries.append(cur)
                cur = ln
            elif ln.startswith("   ") and cur:
                cur += " " + ln.strip()
            else:
                if cur:
                    entries.append(cur)
                cur = ""
        if cur:
            entries.append(cur)
        assert len(entries) > 3
        for e in entries:
            if e.lstrip().startswith("-h"):
                continue
            assert "(default:" in e, f"{cmd}: {e.strip()}"


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nseed = 5\nepochs = 7  # inline\nlambda2 = 0.5\n")
    file_values = read_config_file(cfg)
    assert file_values == {"seed": 5, "epochs": 7, "lambda2": 0.5}
    env = {"CFX_SEED": "9"}
    assert resolve_config({}, {}, env).seed == 9
    assert resolve_config(file_values, {}, env).seed == 5
    assert resolve_config(file_values, {"seed": 1}, env).seed == 1
    assert resolve_config({}, {}, {}) == DEFAULTS == RunConfig()


def test_unknown_config_key_rejected(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 3\nepohcs = 4\n")
    with pytest.raises(UsageError, match="epohcs"):
        read_config_file(cfg)
    assert run_cli(["synth", "--config", str(cfg), "--out", str(tmp_path / "x.csv")]) == 1


def test_env_seed_used_by_cli(tmp_path, monkeypatch):
    monkeypatch.setenv("CFX_SEED", "17")
    assert run_cli(["synth", "--n", "50", "--out", str(tmp_path / "a.csv")]) == 0
    monkeypatch.delenv("CFX_SEED")
    assert run_cli(["synth", "--n", "50", "--seed", "17", "--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_config_hash_depends_on_inputs():
    a = config_hash(DEFAULTS, "label", ["x"])
    assert a == config_hash(DEFAULTS, "label", ["x"])
    assert a != config_hash(DEFAULTS, "label", ["y"])
    assert a != config_hash(RunConfig(seed=1), "label", ["x"])
    assert len(a) == 16


def snapshot(d):
    return {p.name: p.read_bytes() for p in d.iterdir() if p.is_file()}


def test_downstream_commands_are_deterministic_and_leave_inputs_alone(pipeline, tmp_path):
    d = pipeline
    before = snapshot(d)
    outs = []
    for run in ("1", "2"):
        o = tmp_path / run
        o.mkdir()
        assert run_cli(["label", "--data", str(d / "d.csv"), "--out", str(o / "l.csv"), "--seed", "3"]) == 0
        assert run_cli(["train", "--data", str(d / "l.csv"), "--out", str(o / "m.ckpt"), "--seed", "3",
                        *SMALL_NET]) == 0
        assert run_cli(["effects", "--model", str(d / "m.ckpt"), "--data", str(d / "d.csv"),
                        "--out", str(o / "ite.csv"), "--set", "lighting=0", "--set", "weather=0",
                        "--mc-samples", "5"]) == 0
        assert run_cli(["report", "--model", str(d / "m.ckpt"), "--data", str(d / "d.csv"),
                        "--out", str(o / "rep.csv"), "--group", "minority-45",
                        "--scenario", "lighting=0", "--scenario", "pedestrian=1,cyclist=1",
                        "--mc-samples", "5"]) == 0
        assert run_cli(["eval", "--model", str(d / "m.ckpt"), "--data", str(d / "l.csv"),
                        "--truth", str(d / "d.truth.csv"), "--out", str(o / "eval.json"),
                        "--mc-samples", "5"]) == 0
        outs.append(snapshot(o))
    assert outs[0] == outs[1]
    assert set(outs[0]) == {"l.csv", "m.ckpt", "m.log.csv", "ite.csv", "ite.summary.json",
                            "rep.csv", "rep.factual.csv", "eval.json"}
    assert snapshot(d) == before
    assert (tmp_path / "1" / "l.csv").read_bytes() == (d / "l.csv").read_bytes()


def test_output_schemas(pipeline, tmp_path):
    d = pipeline
    assert load_labeled(d / "l.csv").n == 300
    run_cli(["effects", "--model", str(d / "m.ckpt"), "--data", str(d / "d.csv"), "--out",
             str(tmp_path / "ite.csv"), "--set", "alcohol_drug=1", "--split", "test", "--mc-samples", "3"])
    rows = [ln for ln in (tmp_path / "ite.csv").read_text().splitlines() if not ln.startswith("#")]
    assert rows[0] == "record_id,ite_level,ite_prob_or_empty" and len(rows) == 31
    summary = json.loads((tmp_path / "ite.summary.json").read_text())
    for key in ("scenario", "ate_level", "ate_prob", "ate_prob_over_n", "n_total",
                "n_level_changed", "n_level_unchanged"):
        assert key in summary
    assert summary["metadata"]["config"]["mc_samples"] == 3
    assert summary["n_level_changed"] + summary["n_level_unchanged"] == summary["n_total"] == 30


def test_eval_without_truth(pipeline, tmp_path):
    d = pipeline
    assert run_cli(["eval", "--model", str(d / "m.ckpt"), "--data", str(d / "l.csv"),
                    "--out", str(tmp_path / "e.json"), "--mc-samples", "2"]) == 0
    doc = json.loads((tmp_path / "e.json").read_text())
    assert doc["counterfactual_reference"] == "y_star"
    kinds = {(r["method"], r["scenario"]) for r in doc["rows"]}
    assert {("DCI", "factual"), ("matching", "factual")} <= kinds
