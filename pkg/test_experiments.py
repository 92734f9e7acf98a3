"""Tests for taskgen, the experiment grid, sweeps and reporting."""

import json
import logging

import numpy as np
import pandas as pd
import pytest

import experiments
import runner
from config import ConfigError, parse_experiment_config
from metrics import PerformanceMatrix
from taskdata import Sample, TopicDistanceMatrix, ingest_tasks, write_task_file

TINY_DATASET = {
    "source": "synthetic",
    "synthetic": {"tasks": 2, "vocab_per_topic": 12, "train_queries": 8, "test_queries": 3, "docs_per_query": 4,
                  "query_tokens": 2, "doc_tokens": 6},
}
TINY_RANKER = {"embedding_dim": 4, "query_len": 4, "doc_len": 8}


def tiny_experiment(**overrides):
    data = {
        "dataset": TINY_DATASET,
        "rankers": [{"head": "knrm", **TINY_RANKER}],
        "strategies": [{"name": "none"}],
        "optimizer": {"lr": 0.05},
        "epochs": 1,
        "batch_size": 8,
        "seeds": [0],
    }
    data.update(overrides)
    return parse_experiment_config(data)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def test_grid_creates_one_directory_per_cell(tmp_path):
    experiment = tiny_experiment(
        rankers=[{"head": "knrm", **TINY_RANKER}, {"head": "pooled_dot", **TINY_RANKER}],
        strategies=[{"name": "none"}, {"name": "l2"}, {"name": "nr", "capacity": 10}],
        seeds=[0, 1],
    )
    outcome = experiments.cmd_run(experiment, tmp_path, threads=1)
    assert outcome.ok
    assert len(outcome.completed) == 12
    run_dirs = [p for p in tmp_path.iterdir() if p.is_dir()]
    assert len(run_dirs) == 12
    assert "knrm__l2__seed1" in {p.name for p in run_dirs}
    for run_dir in run_dirs:
        assert PerformanceMatrix.from_csv(run_dir / "P_matrix.csv").is_complete()
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["failed"] == []


def test_threaded_grid_matches_sequential_grid(tmp_path, caplog):
    caplog.set_level(logging.INFO)
    experiment = tiny_experiment(strategies=[{"name": "none"}, {"name": "si"}, {"name": "nr", "capacity": 10}],
                                 seeds=[0, 1])
    sequential = experiments.cmd_run(experiment, tmp_path / "seq", threads=1)
    threaded = experiments.cmd_run(experiment, tmp_path / "par", threads=4)
    assert threaded.completed == sequential.completed
    for run_id in sequential.completed:
        np.testing.assert_array_equal(PerformanceMatrix.from_csv(tmp_path / "par" / run_id / "P_matrix.csv").values,
                                      PerformanceMatrix.from_csv(tmp_path / "seq" / run_id / "P_matrix.csv").values)
        log = (tmp_path / "par" / run_id / "log.txt").read_text(encoding="utf-8")
        assert f"run {run_id}:" in log
        assert all(f"run {other}:" not in log for other in threaded.completed if other != run_id)


def test_gem_without_capacity_is_a_config_error():
    with pytest.raises(ConfigError) as info:
        tiny_experiment(strategies=[{"name": "gem"}])
    assert info.value.to_payload()["type"] == "CONFIG_ERROR"
    assert any(field.startswith("strategies") for field in info.value.fields)


def test_sweep_gem_needs_configured_entry():
    with pytest.raises(ConfigError):
        experiments.strategy_for("gem", tiny_experiment())
    assert experiments.strategy_for("si", tiny_experiment()).lam == 1.0


def test_dry_run_writes_manifests_without_training(tmp_path):
    experiment = tiny_experiment(strategies=[{"name": "none"}, {"name": "ewc"}])
    outcome = experiments.cmd_run(experiment, tmp_path, dry_run=True, threads=1)
    assert len(outcome.completed) == 2
    for run_id in outcome.completed:
        manifest = json.loads((tmp_path / run_id / "manifest.json").read_text())
        assert manifest["status"] == "dry_run"
        assert not (tmp_path / run_id / "P_matrix.csv").exists()


def test_seed_override_replaces_seed_list(tmp_path):
    outcome = experiments.cmd_run(tiny_experiment(seeds=[0, 1, 2]), tmp_path, seed=7, dry_run=True, threads=1)
    assert outcome.completed == ["knrm__none__seed7"]


def test_failed_cell_is_recorded_and_grid_continues(tmp_path, monkeypatch):
    original = runner.run_continual

    def flaky(run, *args, **kwargs):
        if run.strategy.name == "l2":
            raise runner.NonFiniteLossError("loss is nan", 1, 1, 1)
        return original(run, *args, **kwargs)

    monkeypatch.setattr(runner, "run_continual", flaky)
    outcome = experiments.cmd_run(tiny_experiment(strategies=[{"name": "none"}, {"name": "l2"}]), tmp_path,
                                  threads=1)
    assert outcome.completed == ["knrm__none__seed0"]
    assert outcome.failed[0]["error"]["type"] == "NON_FINITE_LOSS"


def test_topic_shift_sweep_writes_two_task_points(tmp_path):
    experiment = tiny_experiment(sweep={"topic_shift": {"alphas": [0.0, 0.5], "strategies": ["none"]}})
    outcome = experiments.cmd_run(experiment, tmp_path, threads=1)
    assert outcome.ok
    points = sorted((tmp_path / "sweeps" / "topic_shift").iterdir())
    assert len(points) == 2
    distances = []
    for point in points:
        sweep = json.loads((point / "sweep.json").read_text())
        assert sweep["axis"] == "alpha"
        distances.append(sweep["distance"])
        assert PerformanceMatrix.from_csv(point / "P_matrix.csv").tasks == 2
    assert distances[0] > distances[1]


def test_data_volume_sweep_scales_second_task(tmp_path):
    experiment = tiny_experiment(sweep={"data_volume": {"multipliers": [0.5, 2.0], "strategies": ["none"]}})
    experiments.cmd_run(experiment, tmp_path, dry_run=True, threads=1)
    manifests = {}
    for point in (tmp_path / "sweeps" / "data_volume").iterdir():
        sweep = json.loads((point / "sweep.json").read_text())
        manifests[sweep["value"]] = json.loads((point / "manifest.json").read_text())
    assert manifests[0.5]["dataset"]["train_volumes"] == [8, 4]
    assert manifests[2.0]["dataset"]["train_volumes"] == [8, 16]


def test_scale_training_queries_keeps_whole_queries():
    rows = [Sample(f"q{i}", "a b", f"d{i}{j}", "c d", float(j == 0)) for i in range(10) for j in range(2)]
    task = experiments.TaskData(2, rows, [])
    half = experiments.scale_training_queries(task, 0.5, seed=0)
    assert len({s.query_id for s in half.train}) == 5
    assert len(half.train) == 10
    assert len(experiments.scale_training_queries(task, 3.0, seed=0).train) == 20


def test_most_uniform_topic():
    distances = np.array([[0.0, 1.0, 1.0], [1.0, 0.0, 5.0], [1.0, 5.0, 0.0]])
    assert experiments.most_uniform_topic(TopicDistanceMatrix(distances, np.empty((3, 0)))) == 1


# ---------------------------------------------------------------------------
# taskgen
# ---------------------------------------------------------------------------

def test_synthetic_taskgen_writes_tasks_and_distances(tmp_path):
    experiment = tiny_experiment(dataset={**TINY_DATASET, "synthetic": {**TINY_DATASET["synthetic"], "tasks": 3}})
    summary = experiments.cmd_taskgen(experiment, tmp_path / "a", seed=4)
    assert len(summary["files"]) == 6
    distances = pd.read_csv(tmp_path / "a" / "topic_distances.csv", index_col=0)
    assert distances.shape == (3, 3)
    assert len(ingest_tasks(tmp_path / "a")) == 3

    experiments.cmd_taskgen(experiment, tmp_path / "b", seed=4)
    for name in summary["files"] + ["topic_distances.csv"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_corpus_taskgen_clusters_queries_by_topic(tmp_path):
    corpus = []
    for i in range(4):
        corpus += [Sample(f"f{i}", "apple fruit", f"fd{i}", "apple fruit pie", 1.0),
                   Sample(f"f{i}", "apple fruit", f"fn{i}", "car engine", 0.0),
                   Sample(f"c{i}", "car engine", f"cd{i}", "car engine oil", 1.0),
                   Sample(f"c{i}", "car engine", f"cn{i}", "apple pie", 0.0)]
    write_task_file(tmp_path / "corpus.tsv", corpus)
    (tmp_path / "vectors.txt").write_text(
        "apple 1.0 0.0\nfruit 0.9 0.1\npie 1.0 0.1\ncar 0.0 1.0\nengine 0.1 0.9\noil 0.1 1.0\n", encoding="utf-8")
    experiment = tiny_experiment(taskgen={"corpus": str(tmp_path / "corpus.tsv"),
                                          "embeddings": str(tmp_path / "vectors.txt"), "k": 2,
                                          "test_fraction": 0.25})
    summary = experiments.cmd_taskgen(experiment, tmp_path / "tasks")
    assert summary["mode"] == "corpus"
    assert len(summary["files"]) == 4
    dataset = ingest_tasks(tmp_path / "tasks")
    for task in dataset.tasks:
        prefixes = {s.query_id[0] for s in task.train + task.test}
        assert len(prefixes) == 1
        assert len({s.query_id for s in task.test}) == 1
    assert TopicDistanceMatrix.from_csv(tmp_path / "tasks" / "topic_distances.csv")[1, 2] > 0.0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def fake_run(root, name, matrix, bwt, head="knrm", strategy="none", seed=0, sweep=None):
    run_dir = root / name
    run_dir.mkdir(parents=True)
    PerformanceMatrix.from_array(matrix).to_csv(run_dir / "P_matrix.csv")
    runner.write_metrics(run_dir / "metrics.txt", {"p_final": 0.5, "bwt": bwt, "fwt": None}, [1.0])
    manifest = runner.RunManifest(run_id=name, config={"ranker": {"head": head}, "strategy": {"name": strategy}},
                                  seed=seed, status="completed")
    manifest.write(run_dir)
    if sweep is not None:
        (run_dir / "sweep.json").write_text(json.dumps(sweep))


def test_report_mean_and_standard_error(tmp_path):
    fake_run(tmp_path, "knrm__none__seed0", [[0.5, 0.1], [0.4, 0.5]], bwt=0.4, seed=0)
    fake_run(tmp_path, "knrm__none__seed1", [[0.5, 0.1], [0.4, 0.5]], bwt=0.6, seed=1)
    written = experiments.cmd_report(tmp_path)
    summary = pd.read_csv(written["summary.csv"])
    row = summary[summary["metric"] == "bwt"].iloc[0]
    assert row["mean"] == pytest.approx(0.5)
    assert row["se"] == pytest.approx(0.1)
    assert row["n"] == 2
    assert "knrm__none__seed0" in row["runs"]
    assert "fwt" not in set(summary["metric"])
    table = pd.read_csv(written["bwt_table.csv"], index_col=0)
    assert table.loc["none", "knrm"] == "0.5000 ± 0.1000"


def test_report_single_seed_has_no_standard_error(tmp_path):
    fake_run(tmp_path, "knrm__si__seed0", [[0.5, 0.1], [0.4, 0.5]], bwt=-0.1, strategy="si")
    report = experiments.build_report(tmp_path)
    row = report.summary[report.summary["metric"] == "bwt"].iloc[0]
    assert row["se"] is None or pd.isna(row["se"])
    assert report.tables["bwt"].loc["si", "knrm"] == "-0.1000"


def test_report_ignores_unfinished_runs(tmp_path):
    fake_run(tmp_path, "done", [[0.5]], bwt=None)
    pending = tmp_path / "pending"
    pending.mkdir()
    runner.RunManifest(run_id="pending", config={}, seed=0, status="failed").write(pending)
    assert list(experiments.build_report(tmp_path).per_seed["run"]) == ["done"]


def test_report_without_runs_raises(tmp_path):
    with pytest.raises(experiments.ReportError):
        experiments.cmd_report(tmp_path)


def test_linear_topic_shift_sweep_has_pearson_minus_one(tmp_path):
    for i, distance in enumerate((0.1, 0.2, 0.3)):
        for seed in (0, 1):
            matrix = [[0.8, 0.2], [1.0 - distance, 0.7]]
            fake_run(tmp_path / "sweeps", f"point{i}__seed{seed}", matrix, bwt=-distance, seed=seed,
                     sweep={"axis": "alpha", "value": 0.5 - i * 0.1, "distance": distance, "strategy": "none"})
    written = experiments.cmd_report(tmp_path)
    shift = pd.read_csv(written["topic_shift.csv"])
    assert len(shift) == 6
    assert set(shift["benchmark_mrr"]) == {0.8}
    correlations = pd.read_csv(written["correlations.csv"])
    assert correlations.loc[0, "pearson"] == pytest.approx(-1.0)
    assert correlations.loc[0, "points"] == 3
    assert "summary.csv" in written


# ---------------------------------------------------------------------------
# Desk-scale sweep directions
# ---------------------------------------------------------------------------

def desk_experiment(sweep):
    return parse_experiment_config({
        "dataset": {"source": "synthetic", "synthetic": {"tasks": 2, "overlap": 0.0, "train_queries": 500,
                                                         "test_queries": 100}},
        "rankers": [{"head": "knrm", "embedding_dim": 50, "query_len": 3, "doc_len": 16}],
        "strategies": [{"name": "none"}],
        "optimizer": {"lr": 0.01, "momentum": 0.9},
        "epochs": 3,
        "seeds": [0, 1, 2],
        "sweep": sweep,
    })


@pytest.mark.slow
def test_task_one_mrr_falls_with_topic_distance(tmp_path):
    experiment = desk_experiment({"topic_shift": {"alphas": [0.0, 0.25, 0.5, 0.75], "strategies": ["none"]}})
    assert experiments.cmd_run(experiment, tmp_path, threads=4).ok
    report = experiments.build_report(tmp_path)
    assert len(report.topic_shift) == 12
    shift = report.correlations[report.correlations["sweep"] == "topic_shift"].set_index("strategy")
    assert shift.loc["none", "points"] == 4
    assert shift.loc["none", "pearson"] < -0.3


@pytest.mark.slow
def test_task_one_mrr_falls_with_second_task_volume(tmp_path):
    experiment = desk_experiment({"data_volume": {"multipliers": [0.5, 1.0, 2.0, 4.0], "strategies": ["none", "si"]}})
    assert experiments.cmd_run(experiment, tmp_path, threads=4).ok
    report = experiments.build_report(tmp_path)
    baseline = report.data_volume[report.data_volume["strategy"] == "none"]
    non_increasing = 0
    for _, points in baseline.groupby("seed"):
        mrr = points.sort_values("multiplier")["mrr"].to_numpy(dtype=float)
        assert len(mrr) == 4
        non_increasing += bool(np.all(np.diff(mrr) <= 0))
    assert non_increasing >= 2
    volume = report.correlations[report.correlations["sweep"] == "data_volume"].set_index("strategy")
    assert volume.loc["si", "mrr_variance"] < volume.loc["none", "mrr_variance"]
