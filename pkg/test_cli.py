#!/usr/bin/env python3
"""
Tests for the tgr command line: argument handling, exit codes and the
subcommand wiring, with the heavy steps mocked where the wiring is the point.
"""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from conftest import tiny_model_config, tiny_spec
from tgr_moe.cli import build_parser, load_train_config, main
from tgr_moe.errors import ConfigError
from tgr_moe.trace import RoutingTrace, write_trace
from tgr_moe.training import TrainingResult


def write_config(path, config):
    path.write_text(config.to_json_text())
    return path


def fake_result(out_dir, trace=None):
    out_dir = Path(out_dir)
    return TrainingResult(out_dir=out_dir, checkpoint=out_dir / "checkpoint", metrics=out_dir / "metrics.jsonl",
                          trace=trace, val_accuracy=0.5, records=[], seconds_per_epoch=0.1, trainable_params=10)


def test_gen_data_from_spec_file(tmp_path, capsys):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(tiny_spec().to_json())
    out = tmp_path / "data"
    assert main(["gen-data", "--spec", str(spec_path), "--out-dir", str(out)]) == 0
    for name in ("train.tgrd", "val.tgrd", "spec.json", "run.json"):
        assert (out / name).exists(), name
    echo = json.loads((out / "run.json").read_text())
    assert sorted(echo) == ["arguments", "command", "config"]
    assert echo["command"] == "gen-data"
    assert echo["config"]["samples_train"] == 24
    assert json.loads(capsys.readouterr().out)["train"] == 24


def test_gen_data_rejects_both_task_flags(capsys):
    assert main(["gen-data", "--default", "--transfer"]) == 2
    assert "ERROR usage" in capsys.readouterr().err


def test_train_without_config_is_a_usage_error(tmp_path, capsys):
    assert main(["train", "--out-dir", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "usage:" in err
    assert "ERROR usage: train requires --config" in err


def test_unknown_flag_is_a_usage_error(capsys):
    assert main(["plot", "--out", "x.csv", "--bogus"]) == 2
    assert "ERROR usage" in capsys.readouterr().err


def test_unknown_config_key_is_a_config_error(tmp_path, capsys):
    config_path = tmp_path / "bad.json"
    config_path.write_text(json.dumps({"variant": "vmoe", "no_such_field": 1}))
    assert main(["train", "--config", str(config_path), "--data", str(tmp_path)]) == 1
    assert capsys.readouterr().err.startswith("ERROR config:")


def test_invalid_json_config(tmp_path):
    config_path = tmp_path / "bad.json"
    config_path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_train_config(config_path)


def test_invalid_variant_is_a_config_error(make_config, tmp_path, capsys):
    config = make_config("vmoe")
    config.variant = "sparse"
    path = write_config(tmp_path / "c.json", config)
    assert main(["train", "--config", str(path)]) == 1
    assert "ERROR config" in capsys.readouterr().err


def test_missing_data_dir_is_an_io_or_dataset_error(make_config, tmp_path, capsys):
    path = write_config(tmp_path / "c.json", make_config("vmoe", data_dir=str(tmp_path / "nowhere")))
    assert main(["train", "--config", str(path), "--out-dir", str(tmp_path / "out")]) == 1
    assert capsys.readouterr().err.startswith("ERROR dataset:")


def test_train_wires_overrides_into_run(make_config, data_dir, tmp_path, mocker, capsys):
    path = write_config(tmp_path / "c.json", make_config("vmoe"))
    run = mocker.patch("tgr_moe.cli.run_training", side_effect=lambda config, dataset, out: fake_result(out))
    out = tmp_path / "out"
    assert main(["train", "--config", str(path), "--seed", "7", "--epochs", "3", "--out-dir", str(out)]) == 0
    config = run.call_args.args[0]
    assert config.seed == 7 and config.epochs == 3
    assert json.loads((out / "run.json").read_text())["config"]["seed"] == 7
    assert json.loads(capsys.readouterr().out)["val_accuracy"] == 0.5


def test_upper_bound_train_goes_through_both_evaluations(make_config, tmp_path, mocker, capsys):
    from tgr_moe.models import EvalReport
    path = write_config(tmp_path / "c.json", make_config("upper_bound"))
    mocker.patch("tgr_moe.cli.load_teacher_bundle")
    reports = {mode: EvalReport(accuracy=acc, routing_mode=mode) for mode, acc in (("student", 0.4),
                                                                                   ("teacher", 0.6))}
    mocker.patch("tgr_moe.cli.train_upper_bound",
                 side_effect=lambda config, dataset, teacher, out: (fake_result(out), reports))
    assert main(["train", "--config", str(path), "--out-dir", str(tmp_path / "out")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["teacher"]["accuracy"] == 0.6
    assert summary["student"]["accuracy"] == 0.4


def test_analyze_agreement_on_constant_trace(tmp_path, capsys):
    trace = RoutingTrace(2, 5, 3)
    for epoch in (1, 2, 3):
        trace.append(epoch, np.array([[0, 1, 2, 0, 1], [2, 2, 1, 0, 0]]))
    write_trace(trace, tmp_path / "trace.bin")
    assert main(["analyze", "agreement", "--trace", str(tmp_path / "trace.bin"),
                 "--out-dir", str(tmp_path / "analysis")]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert [row["x"] for row in rows] == ["1", "2", "3"]
    assert {row["series_name"] for row in rows} == {"agreement_final"}
    assert all(float(row["value"]) == 1.0 for row in rows)


def test_analyze_entropy_writes_csv_file(tmp_path):
    trace = RoutingTrace(1, 4, 2)
    trace.append(1, np.array([[0, 0, 0, 1]]))
    write_trace(trace, tmp_path / "trace.bin")
    out = tmp_path / "entropy.csv"
    assert main(["analyze", "entropy", "--trace", str(tmp_path / "trace.bin"), "--out", str(out),
                 "--out-dir", str(tmp_path)]) == 0
    row = list(csv.DictReader(out.read_text().splitlines()))[0]
    assert row["x"] == "1"
    assert float(row["value"]) == pytest.approx(0.8113, abs=1e-4)


def test_analyze_agreement_needs_trace(tmp_path):
    assert main(["analyze", "agreement", "--out-dir", str(tmp_path)]) == 2


def test_sweep_runs_every_arm(make_config, teacher_checkpoint, tmp_path, mocker, capsys):
    path = write_config(tmp_path / "c.json", make_config("vmoe", teacher_checkpoint=str(teacher_checkpoint)))

    def arm_result(arm):
        config = arm["config"]
        return {"experts": config["model"]["num_experts"], "variant": config["variant"], "seed": config["seed"],
                "val_accuracy": 0.5, "mean_consecutive_agreement": 0.9, "epochs_to_threshold": 3}

    arm = mocker.patch("tgr_moe.cli.run_sweep_arm", side_effect=arm_result)
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(path), "--experts", "2,4", "--seeds", "0,1,2",
                 "--variants", "vmoe,tgr", "--out-dir", str(out)]) == 0
    assert arm.call_count == 2 * 2 * 3
    rows = list(csv.DictReader((out / "sweep.csv").read_text().splitlines()))
    assert len(rows) == 12
    assert list(rows[0]) == ["experts", "variant", "seed", "val_accuracy", "mean_consecutive_agreement",
                             "epochs_to_threshold"]
    assert rows[0]["epochs_to_threshold"] == "3"
    assert (rows[0]["experts"], rows[0]["variant"], rows[0]["seed"]) == ("2", "vmoe", "0")
    assert "E04_tgr_seed2" in arm.call_args.args[0]["out_dir"]
    assert json.loads(capsys.readouterr().out)["rows"] == 12


def test_sweep_rejects_non_positive_jobs(make_config, tmp_path):
    path = write_config(tmp_path / "c.json", make_config("vmoe"))
    assert main(["sweep", "--config", str(path), "--jobs", "0", "--out-dir", str(tmp_path)]) == 2


def test_plot_needs_exactly_one_source(tmp_path):
    assert main(["plot", "--out", str(tmp_path / "p.csv"), "--out-dir", str(tmp_path)]) == 2


def test_parser_defaults():
    args = build_parser().parse_args(["sweep", "--config", "c.json"])
    assert args.experts == [2, 4, 8, 16]
    assert args.seeds == [0, 1, 2, 3, 4]
    assert args.jobs == 1


def test_end_to_end_train_eval_plot(make_config, data_dir, tmp_path, capsys):
    path = write_config(tmp_path / "c.json", make_config("vmoe", epochs=2))
    run_dir = tmp_path / "run"
    assert main(["train", "--config", str(path), "--out-dir", str(run_dir)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert Path(summary["trace"]).exists()

    assert main(["eval", "--checkpoint", summary["checkpoint"], "--data", str(data_dir),
                 "--out-dir", str(tmp_path / "eval")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["accuracy"] == summary["val_accuracy"]
    assert report["num_samples"] == 12

    plot = tmp_path / "curves.svg"
    assert main(["plot", "--metrics", summary["metrics"], "--format", "svg", "--out", str(plot),
                 "--out-dir", str(tmp_path / "plot")]) == 0
    assert plot.read_text().startswith("<svg")

    assert main(["analyze", "checkpoint-agreement", "--checkpoint", summary["checkpoint"], "--other",
                 summary["checkpoint"], "--data", str(data_dir), "--probe-size", "4",
                 "--out-dir", str(tmp_path / "agree")]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert [row["x"] for row in rows] == ["1", "2"]
    assert all(float(row["value"]) == 1.0 for row in rows)


@pytest.mark.parametrize("path", sorted(Path(__file__).parent.joinpath("configs").glob("*.json")),
                         ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    config = load_train_config(path).validate()
    assert config.data_dir


# --- re-running from run.json ----------------------------------------------------------

def _metrics_without_clock(path):
    lines = []
    for line in Path(path).read_text().splitlines():
        record = json.loads(line)
        record.pop("wall_clock_seconds")
        lines.append(json.dumps(record, sort_keys=True))
    return lines


def test_train_reruns_from_its_own_run_json(make_config, tmp_path, capsys):
    path = write_config(tmp_path / "c.json", make_config("vmoe", epochs=2))
    first, second = tmp_path / "run1", tmp_path / "run2"
    assert main(["train", "--config", str(path), "--seed", "3", "--out-dir", str(first)]) == 0
    assert main(["train", "--config", str(first / "run.json"), "--out-dir", str(second)]) == 0
    capsys.readouterr()
    echoes = [json.loads((run / "run.json").read_text())["config"] for run in (first, second)]
    assert echoes[0] == echoes[1]
    assert _metrics_without_clock(first / "metrics.jsonl") == _metrics_without_clock(second / "metrics.jsonl")
    assert (first / "trace.bin").read_bytes() == (second / "trace.bin").read_bytes()
    assert (first / "checkpoint" / "params.bin").read_bytes() == (second / "checkpoint" / "params.bin").read_bytes()


def test_gen_data_reruns_from_its_own_run_json(tmp_path, capsys):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(tiny_spec().to_json())
    assert main(["gen-data", "--spec", str(spec_path), "--seed", "5", "--out-dir", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--spec", str(tmp_path / "a" / "run.json"), "--out-dir", str(tmp_path / "b")]) == 0
    capsys.readouterr()
    for name in ("train.tgrd", "val.tgrd"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_teacher_reruns_from_its_own_run_json(data_dir, tmp_path, capsys):
    first, second = tmp_path / "t1", tmp_path / "t2"
    assert main(["train-teacher", "--data", str(data_dir), "--epochs", "1", "--batch-size", "8", "--seed", "2",
                 "--out-dir", str(first)]) == 0
    echo = json.loads((first / "run.json").read_text())["config"]
    assert (echo["epochs"], echo["batch_size"], echo["seed"]) == (1, 8, 2)
    assert main(["train-teacher", "--data", str(data_dir), "--config", str(first / "run.json"),
                 "--out-dir", str(second)]) == 0
    capsys.readouterr()
    assert (first / "teacher" / "params.bin").read_bytes() == (second / "teacher" / "params.bin").read_bytes()


def test_run_json_without_config_is_rejected(tmp_path, capsys):
    trace = RoutingTrace(1, 4, 2)
    trace.append(1, np.array([[0, 1, 0, 1]]))
    write_trace(trace, tmp_path / "trace.bin")
    analysis = tmp_path / "analysis"
    assert main(["analyze", "agreement", "--trace", str(tmp_path / "trace.bin"), "--out-dir", str(analysis)]) == 0
    capsys.readouterr()
    assert main(["train", "--config", str(analysis / "run.json"), "--data", str(tmp_path)]) == 1
    assert capsys.readouterr().err.startswith("ERROR config:")


# --- trace layers, summaries and set overlap ------------------------------------------

def test_entropy_rows_use_moe_layers_of_the_run(tmp_path, capsys):
    trace = RoutingTrace(2, 4, 2)
    trace.append(1, np.array([[0, 0, 0, 1], [0, 1, 0, 1]]))
    write_trace(trace, tmp_path / "trace.bin")
    (tmp_path / "summary.json").write_text(json.dumps({"moe_layers": [4, 6]}))
    assert main(["analyze", "entropy", "--trace", str(tmp_path / "trace.bin"), "--out-dir", str(tmp_path / "a")]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert [row["x"] for row in rows] == ["4", "6"]
    assert float(rows[1]["value"]) == 1.0

    assert main(["analyze", "entropy", "--trace", str(tmp_path / "trace.bin"), "--layers", "2,3",
                 "--out-dir", str(tmp_path / "b")]) == 0
    assert [row["x"] for row in csv.DictReader(capsys.readouterr().out.splitlines())] == ["2", "3"]


def test_layer_count_mismatch_is_a_trace_error(tmp_path, capsys):
    trace = RoutingTrace(2, 4, 2)
    trace.append(1, np.zeros((2, 4), dtype=int))
    write_trace(trace, tmp_path / "trace.bin")
    assert main(["analyze", "entropy", "--trace", str(tmp_path / "trace.bin"), "--layers", "4,5,6",
                 "--out-dir", str(tmp_path / "a")]) == 1
    assert "ERROR" in capsys.readouterr().err


def test_analyze_summary_reports_stability(tmp_path, capsys):
    trace = RoutingTrace(1, 4, 2, layer_ids=[3])
    ids = np.array([[0, 1, 1, 0]])
    trace.append(1, 1 - ids)
    trace.append(2, ids)
    trace.append(3, ids)
    write_trace(trace, tmp_path / "trace.bin")
    assert main(["analyze", "summary", "--trace", str(tmp_path / "trace.bin"), "--stride", "1", "--layers", "3",
                 "--out-dir", str(tmp_path / "a")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["snapshots"] == 3
    assert summary["epochs_to_threshold"] == 2
    assert summary["mean_consecutive_agreement"] == 0.5
    assert summary["final_normalized_entropy"] == {"3": 1.0}


def test_set_overlap_only_for_checkpoint_agreement(tmp_path):
    assert main(["analyze", "agreement", "--trace", str(tmp_path / "t.bin"), "--set-overlap",
                 "--out-dir", str(tmp_path)]) == 2


def test_checkpoint_set_overlap_for_top2(make_config, data_dir, tmp_path, capsys):
    path = write_config(tmp_path / "c.json", make_config("vmoe", model=tiny_model_config(top_k=2), epochs=1))
    assert main(["train", "--config", str(path), "--out-dir", str(tmp_path / "run")]) == 0
    checkpoint = json.loads(capsys.readouterr().out)["checkpoint"]
    assert main(["analyze", "checkpoint-agreement", "--checkpoint", checkpoint, "--other", checkpoint,
                 "--data", str(data_dir), "--probe-size", "4", "--set-overlap",
                 "--out-dir", str(tmp_path / "agree")]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert {row["series_name"] for row in rows} == {"checkpoint_set_overlap"}
    assert [row["x"] for row in rows] == ["1", "2"]
    assert all(float(row["value"]) == 1.0 for row in rows)
