"""
Experiment harness behind the command-line surface.

    cmd_taskgen   write task files and topic_distances.csv (synthetic or corpus clustering)
    cmd_run       run every (ranker, strategy, seed) cell of an experiment, then its sweeps
    cmd_report    aggregate completed run directories into tables and sweep CSVs

Sweeps:
    topic shift   two-task runs at increasing topic distance (synthetic alpha or corpus topic pairs)
    data volume   two-task runs with the second task's training queries scaled

Every sweep point is an ordinary run directory with an extra sweep.json.
"""

import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

import metrics
import runner
import taskdata
from config import STRATEGIES, ConfigError, ExperimentConfig, RunConfig, StrategyConfig, load_settings
from taskdata import ContinualDataset, DataFormatError, TaskData, TopicDistanceMatrix

logger = logging.getLogger(__name__)

METRICS = ("p_final", "bwt", "fwt")
SWEEP_DIR = "sweeps"
REPORT_DIR = "report"


class ReportError(RuntimeError):
    def to_payload(self) -> dict:
        return {"type": "NO_RUNS", "message": str(self)}


@dataclass
class RunOutcome:
    """What cmd_run did: completed run ids and typed failure records."""

    out_dir: Path
    completed: List[str] = field(default_factory=list)
    failed: List[dict] = field(default_factory=list)
    dry_run: bool = False

    @property
    def ok(self) -> bool:
        return not self.failed

    def to_dict(self) -> dict:
        return {"out_dir": str(self.out_dir), "completed": self.completed, "failed": self.failed,
                "dry_run": self.dry_run}


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def load_dataset(experiment: ExperimentConfig) -> Tuple[ContinualDataset, Optional[TopicDistanceMatrix], dict]:
    """Build or ingest the experiment's task sequence; also returns a description for manifests."""
    source = experiment.dataset
    if source.source == "synthetic":
        dataset, distances = taskdata.generate_synthetic(source.synthetic, seed=source.seed)
        info = {"source": "synthetic", "seed": source.seed, **source.synthetic.model_dump(mode="json")}
        return dataset, distances, info
    dataset = taskdata.ingest_tasks(source.path, source.max_train_queries, source.max_test_queries, source.seed)
    distances = None
    distance_file = Path(source.path) / "topic_distances.csv"
    if distance_file.is_file():
        distances = TopicDistanceMatrix.from_csv(distance_file)
    info = {"source": "ingest", "path": source.path, "seed": source.seed,
            "max_train_queries": source.max_train_queries, "max_test_queries": source.max_test_queries}
    return dataset, distances, info


class EmbeddingCache:
    """Embedding matrices per (vocabulary, dimension); None when no vector file is configured."""

    def __init__(self, path: Optional[str], seed: int):
        self.path = path
        self.seed = seed
        self._cache: Dict[Tuple[int, int], Tuple[taskdata.Vocabulary, np.ndarray]] = {}
        self._lock = threading.Lock()

    def get(self, dataset: ContinualDataset, dim: int) -> Optional[np.ndarray]:
        if self.path is None:
            return None
        # the cached vocabulary reference keeps its id from being reused
        key = (id(dataset.vocab), dim)
        with self._lock:
            if key not in self._cache:
                self._cache[key] = (dataset.vocab, taskdata.load_embeddings(self.path, dataset.vocab, dim, self.seed))
            return self._cache[key][1]


# ---------------------------------------------------------------------------
# taskgen
# ---------------------------------------------------------------------------

def cmd_taskgen(experiment: ExperimentConfig, out_dir: Union[str, Path], seed: int = 0) -> dict:
    """
    Write task_<t>.{train,test}.tsv plus topic_distances.csv into `out_dir`.

    With a `taskgen` section the corpus is clustered by mean query-token embedding;
    otherwise the synthetic generator runs with the dataset's synthetic parameters.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split = experiment.taskgen
    if split is not None:
        logger.info("🔍 clustering corpus %s into k=%d topics", split.corpus, split.k)
        corpus = taskdata.read_task_file(split.corpus)
        vocab = taskdata.Vocabulary.from_texts(text for s in corpus for text in (s.query_text, s.doc_text))
        embeddings = taskdata.load_embeddings(split.embeddings, vocab, seed=seed)
        dataset, distances, inertia = taskdata.split_corpus_by_topic(
            corpus, vocab, embeddings, split.k, seed=seed, restarts=split.restarts,
            test_fraction=split.test_fraction, max_iter=split.max_iter,
        )
        details = {"mode": "corpus", "corpus": split.corpus, "k": split.k, "inertia": inertia}
    else:
        dataset, distances = taskdata.generate_synthetic(experiment.dataset.synthetic, seed=seed)
        details = {"mode": "synthetic", **experiment.dataset.synthetic.model_dump(mode="json")}

    written = taskdata.write_tasks(out_dir, dataset)
    distances.to_csv(out_dir / "topic_distances.csv")
    summary = {**details, "seed": seed, "tasks": len(dataset), "files": [p.name for p in written],
               "fingerprints": dataset.fingerprints()}
    (out_dir / "taskgen.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    logger.info("✅ wrote %d task files and topic_distances.csv to %s", len(written), out_dir)
    return summary


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

@dataclass
class RunCell:
    """One run to execute: its config, task sequence, directory and sweep point."""

    run: RunConfig
    dataset: ContinualDataset
    run_dir: Path
    dataset_info: dict
    sweep: Optional[dict] = None


def _execute(cell: RunCell, embeddings: EmbeddingCache, threads: int, dry_run: bool) -> Optional[dict]:
    """Run one cell; returns its failure record, or None when it completed."""
    run = cell.run
    if cell.sweep is not None:
        cell.run_dir.mkdir(parents=True, exist_ok=True)
        (cell.run_dir / "sweep.json").write_text(json.dumps(cell.sweep, indent=2) + "\n", encoding="utf-8")
    try:
        runner.run_continual(run, cell.dataset, cell.run_dir, embeddings.get(cell.dataset, run.ranker.embedding_dim),
                             threads, dry_run, cell.dataset_info, extra={"sweep": cell.sweep} if cell.sweep else None)
        return None
    except Exception as exc:  # a failed cell must not stop the grid
        payload = runner.error_payload(exc)
        logger.error("❌ %s failed: %s", run.run_id, payload["message"])
        return {"run_id": run.run_id, "error": payload}


def execute_cells(cells: List[RunCell], embeddings: EmbeddingCache, threads: int, dry_run: bool,
                  outcome: RunOutcome) -> None:
    """
    Run every cell and record it in `outcome` in cell order.

    With threads > 1 the cells share a pool of that many workers and each one evaluates
    on a single thread; otherwise they run one after another with a threaded evaluation.
    """
    if threads > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(cells))) as pool:
            failures = list(pool.map(lambda cell: _execute(cell, embeddings, 1, dry_run), cells))
    else:
        failures = [_execute(cell, embeddings, threads, dry_run) for cell in cells]
    for cell, failure in zip(cells, failures):
        if failure is None:
            outcome.completed.append(cell.run.run_id)
        else:
            outcome.failed.append(failure)


def cmd_run(experiment: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None, seed: Optional[int] = None,
            dry_run: bool = False, threads: Optional[int] = None) -> RunOutcome:
    """Run the experiment grid (one sub-directory per cell), then any configured sweeps."""
    if seed is not None:
        experiment = experiment.model_copy(update={"seeds": [seed]})
    out_dir = Path(out_dir or experiment.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    threads = threads or load_settings().threads
    outcome = RunOutcome(out_dir, dry_run=dry_run)

    dataset, distances, info = load_dataset(experiment)
    embeddings = EmbeddingCache(experiment.dataset.embeddings, experiment.dataset.seed)
    cells = [RunCell(run, dataset, out_dir / run.run_id, info) for run in experiment.runs()]
    if experiment.sweep is not None:
        if experiment.sweep.topic_shift is not None:
            cells += topic_shift_sweep(experiment, dataset, distances, out_dir)
        if experiment.sweep.data_volume is not None:
            cells += data_volume_sweep(experiment, dataset, out_dir)

    logger.info("🔍 %d runs into %s on %d threads", len(cells), out_dir, threads)
    execute_cells(cells, embeddings, threads, dry_run, outcome)

    (out_dir / "summary.json").write_text(json.dumps(outcome.to_dict(), indent=2) + "\n", encoding="utf-8")
    status = "✅" if outcome.ok else "⚠️"
    logger.info("%s %d runs completed, %d failed", status, len(outcome.completed), len(outcome.failed))
    return outcome


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def strategy_for(tag: str, experiment: ExperimentConfig) -> StrategyConfig:
    """The experiment's own config for a sweep strategy tag, or that tag's defaults."""
    for strategy in experiment.strategies:
        if strategy.tag == tag:
            return strategy
    if tag == "gem":
        raise ConfigError("sweep strategy 'gem' needs a strategies entry with a capacity", ["sweep"])
    return StrategyConfig(name=tag)


def _sweep_cells(experiment: ExperimentConfig, tags: List[str], prefix: str):
    for ranker in experiment.rankers:
        for tag in tags:
            strategy = strategy_for(tag, experiment)
            for seed in experiment.seeds:
                yield experiment.run_config(ranker, strategy, seed, f"{prefix}__{ranker.head}__{tag}__seed{seed}")


def renumber(tasks: List[TaskData], vocab: taskdata.Vocabulary) -> ContinualDataset:
    """A dataset over the given tasks in order, renumbered 1..n."""
    renumbered = [TaskData(i, task.train, task.test, topic=task.topic) for i, task in enumerate(tasks, start=1)]
    return ContinualDataset(renumbered, vocab)


def most_uniform_topic(distances: TopicDistanceMatrix) -> int:
    """1-based topic whose distances to the other topics have the smallest standard deviation."""
    matrix = distances.distances
    spreads = [np.std(np.delete(matrix[i], i)) for i in range(matrix.shape[0])]
    return int(np.argmin(spreads)) + 1


def topic_shift_sweep(experiment: ExperimentConfig, dataset: ContinualDataset,
                      distances: Optional[TopicDistanceMatrix], out_dir: Path) -> List[RunCell]:
    """Two-task cells at each configured alpha (synthetic) or topic pair (ingested tasks)."""
    sweep = experiment.sweep.topic_shift
    root = out_dir / SWEEP_DIR / "topic_shift"
    cells = []
    if experiment.dataset.source == "synthetic":
        for alpha in sweep.alphas:
            synthetic = experiment.dataset.synthetic.model_copy(update={"tasks": 2, "overlap": alpha,
                                                                        "train_volumes": None})
            pair, matrix = taskdata.generate_synthetic(synthetic, seed=experiment.dataset.seed)
            info = {"source": "synthetic", "seed": experiment.dataset.seed, **synthetic.model_dump(mode="json")}
            for run in _sweep_cells(experiment, sweep.strategies, f"alpha{alpha:.2f}"):
                point = {"axis": "alpha", "value": alpha, "distance": matrix[1, 2], "strategy": run.strategy.tag}
                cells.append(RunCell(run, pair, root / run.run_id, info, point))
        return cells

    if sweep.distances:
        distances = TopicDistanceMatrix.from_csv(sweep.distances)
    if distances is None:
        raise ConfigError("topic-shift sweep over ingested tasks needs topic_distances.csv", ["sweep.topic_shift"])
    if distances.distances.shape[0] != len(dataset):
        raise DataFormatError(f"distance matrix covers {distances.distances.shape[0]} topics, dataset has "
                              f"{len(dataset)} tasks")
    pairs = sweep.pairs
    if not pairs:
        anchor = most_uniform_topic(distances)
        pairs = [(anchor, other) for other in range(1, len(dataset) + 1) if other != anchor]
        logger.info("🔍 topic-shift anchor topic %d (most uniform distance profile)", anchor)
    bad = [p for p in pairs if p[0] == p[1] or not all(1 <= t <= len(dataset) for t in p)]
    if bad:
        raise ConfigError(f"topic pairs must name two different topics in 1..{len(dataset)}: {bad}",
                          ["sweep.topic_shift.pairs"])
    for anchor, other in pairs:
        pair = renumber([dataset.task(anchor), dataset.task(other)], dataset.vocab)
        info = {"source": "ingest", "path": experiment.dataset.path, "topics": [anchor, other]}
        for run in _sweep_cells(experiment, sweep.strategies, f"pair{anchor}-{other}"):
            point = {"axis": "topic_pair", "value": [anchor, other], "distance": distances[anchor, other],
                     "strategy": run.strategy.tag}
            cells.append(RunCell(run, pair, root / run.run_id, info, point))
    return cells


def scale_training_queries(task: TaskData, multiplier: float, seed: int) -> TaskData:
    """Keep round(multiplier * n) of a task's training queries (at least 1, at most n)."""
    query_ids = list(dict.fromkeys(s.query_id for s in task.train))
    target = max(1, int(round(multiplier * len(query_ids))))
    if target > len(query_ids):
        logger.warning("⚠️ task %d has %d training queries; multiplier %.2f capped", task.task_id, len(query_ids),
                       multiplier)
        target = len(query_ids)
    rng = np.random.default_rng(seed)
    keep = {query_ids[int(i)] for i in rng.choice(len(query_ids), size=target, replace=False)}
    return TaskData(task.task_id, [s for s in task.train if s.query_id in keep], task.test, topic=task.topic)


def data_volume_sweep(experiment: ExperimentConfig, dataset: ContinualDataset, out_dir: Path) -> List[RunCell]:
    """Two-task cells with the second task's training queries scaled by each multiplier."""
    sweep = experiment.sweep.data_volume
    root = out_dir / SWEEP_DIR / "data_volume"
    cells = []
    synthetic_source = experiment.dataset.source == "synthetic"
    for multiplier in sweep.multipliers:
        if synthetic_source:
            base = experiment.dataset.synthetic
            volume = max(1, int(round(multiplier * base.train_queries)))
            synthetic = base.model_copy(update={"tasks": 2, "train_volumes": [base.train_queries, volume]})
            pair, matrix = taskdata.generate_synthetic(synthetic, seed=experiment.dataset.seed)
            distance = matrix[1, 2]
            info = {"source": "synthetic", "seed": experiment.dataset.seed, **synthetic.model_dump(mode="json")}
        else:
            if len(dataset) < 2:
                raise ConfigError("data-volume sweep needs at least 2 tasks", ["sweep.data_volume"])
            second = scale_training_queries(dataset.task(2), multiplier, experiment.dataset.seed)
            pair = renumber([dataset.task(1), second], dataset.vocab)
            distance = None
            info = {"source": "ingest", "path": experiment.dataset.path, "multiplier": multiplier}
        for run in _sweep_cells(experiment, sweep.strategies, f"volume{multiplier:g}"):
            point = {"axis": "multiplier", "value": multiplier, "distance": distance, "strategy": run.strategy.tag}
            cells.append(RunCell(run, pair, root / run.run_id, info, point))
    return cells


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _standard_error(values: pd.Series) -> Optional[float]:
    return float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else None


def _format_cell(mean: float, se: Optional[float]) -> str:
    return f"{mean:.4f}" if se is None else f"{mean:.4f} ± {se:.4f}"


def collect_runs(run_root: Union[str, Path]) -> pd.DataFrame:
    """One row per completed run directory below `run_root`, with its metrics and sweep point."""
    run_root = Path(run_root)
    rows = []
    for manifest_path in sorted(run_root.rglob("manifest.json")):
        run_dir = manifest_path.parent
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            logger.warning("⚠️ unreadable manifest %s skipped", manifest_path)
            continue
        if manifest.get("status") != "completed" or not (run_dir / "metrics.txt").is_file():
            continue
        values = runner.read_metrics(run_dir / "metrics.txt")
        matrix = metrics.PerformanceMatrix.from_csv(run_dir / "P_matrix.csv")
        row = {
            "run": str(run_dir.relative_to(run_root)),
            "model": manifest["config"]["ranker"]["head"],
            "strategy": manifest["config"]["strategy"]["name"],
            "seed": manifest["seed"],
            **{m: values.get(m) for m in METRICS},
            "benchmark_mrr": matrix[1, 1],
            "mrr": matrix[2, 1] if matrix.tasks >= 2 else None,
            "sweep": None,
        }
        sweep_file = run_dir / "sweep.json"
        if sweep_file.is_file():
            point = json.loads(sweep_file.read_text(encoding="utf-8"))
            row.update(sweep=point["axis"], axis_value=point["value"], distance=point.get("distance"))
        rows.append(row)
    return pd.DataFrame(rows)


def _strategy_order(tag: str) -> int:
    return STRATEGIES.index(tag) if tag in STRATEGIES else len(STRATEGIES)


def summarize_grid(grid: pd.DataFrame) -> pd.DataFrame:
    """Long table: model, strategy, metric, mean, se, n, runs (provenance)."""
    rows = []
    for (model, strategy), group in grid.groupby(["model", "strategy"], sort=True):
        for metric in METRICS:
            values = group[metric].dropna().astype(float)
            if values.empty:
                continue
            rows.append({"model": model, "strategy": strategy, "metric": metric, "mean": float(values.mean()),
                         "se": _standard_error(values), "n": int(len(values)),
                         "runs": ";".join(group.loc[values.index, "run"])})
    return pd.DataFrame(rows, columns=["model", "strategy", "metric", "mean", "se", "n", "runs"])


def metric_table(summary: pd.DataFrame, metric: str) -> pd.DataFrame:
    """strategy x model table of `mean ± se` cells for one metric."""
    part = summary[summary["metric"] == metric]
    if part.empty:
        return pd.DataFrame()
    cells = part.assign(cell=[_format_cell(m, None if pd.isna(s) else s) for m, s in zip(part["mean"], part["se"])])
    table = cells.pivot(index="strategy", columns="model", values="cell")
    order = sorted(table.index, key=_strategy_order)
    return table.loc[order].fillna("")


def best_strategies(summary: pd.DataFrame) -> pd.DataFrame:
    rows = []
    for (model, metric), group in summary.groupby(["model", "metric"], sort=True):
        ranked = group.assign(order=group["strategy"].map(_strategy_order)).sort_values(
            ["mean", "order"], ascending=[False, True])
        best = ranked.iloc[0]
        rows.append({"model": model, "metric": metric, "strategy": best["strategy"], "mean": best["mean"],
                     "se": best["se"], "runs": best["runs"]})
    return pd.DataFrame(rows, columns=["model", "metric", "strategy", "mean", "se", "runs"])


def sweep_correlations(points: pd.DataFrame, sweep: str, axis: str) -> List[dict]:
    """Pearson of seed-averaged MRR against the sweep axis, per model and strategy."""
    rows = []
    for (model, strategy), group in points.groupby(["model", "strategy"], sort=True):
        averaged = group.groupby(axis, sort=True)["mrr"].mean()
        try:
            r = metrics.pearson(averaged.index.to_numpy(dtype=float), averaged.to_numpy(dtype=float))
        except ValueError as exc:
            logger.warning("⚠️ no correlation for %s/%s/%s: %s", sweep, model, strategy, exc)
            r = None
        rows.append({"sweep": sweep, "model": model, "strategy": strategy, "pearson": r,
                     "mrr_variance": float(averaged.var(ddof=0)) if len(averaged) else None,
                     "points": int(len(averaged))})
    return rows


@dataclass
class Report:
    per_seed: pd.DataFrame
    summary: pd.DataFrame
    tables: Dict[str, pd.DataFrame]
    best: pd.DataFrame
    topic_shift: pd.DataFrame
    data_volume: pd.DataFrame
    correlations: pd.DataFrame

    def to_dict(self) -> dict:
        def records(frame: pd.DataFrame) -> list:
            return json.loads(frame.to_json(orient="records"))

        return {
            "tables": {m: json.loads(t.to_json(orient="index")) if not t.empty else {}
                       for m, t in self.tables.items()},
            "summary": records(self.summary),
            "best_strategies": records(self.best),
            "correlations": records(self.correlations),
        }


def build_report(run_root: Union[str, Path]) -> Report:
    """Aggregate every completed run below `run_root`. Reads run directories only."""
    runs = collect_runs(run_root)
    if runs.empty:
        raise ReportError(f"no completed runs found under {run_root}")
    grid = runs[runs["sweep"].isna()]
    summary = summarize_grid(grid) if not grid.empty else pd.DataFrame(
        columns=["model", "strategy", "metric", "mean", "se", "n", "runs"])
    tables = {metric: metric_table(summary, metric) for metric in METRICS}

    shift_columns = ["model", "strategy", "seed", "distance", "benchmark_mrr", "mrr", "run"]
    volume_columns = ["model", "strategy", "seed", "multiplier", "benchmark_mrr", "mrr", "run"]
    shift = runs[runs["sweep"].isin(["alpha", "topic_pair"])]
    volume = runs[runs["sweep"] == "multiplier"].rename(columns={"axis_value": "multiplier"})
    shift = shift[shift_columns] if not shift.empty else pd.DataFrame(columns=shift_columns)
    volume = volume[volume_columns] if not volume.empty else pd.DataFrame(columns=volume_columns)

    correlations = []
    if not shift.empty:
        correlations += sweep_correlations(shift, "topic_shift", "distance")
    if not volume.empty:
        correlations += sweep_correlations(volume, "data_volume", "multiplier")
    correlation_frame = pd.DataFrame(correlations,
                                     columns=["sweep", "model", "strategy", "pearson", "mrr_variance", "points"])
    per_seed = runs[["run", "model", "strategy", "seed", *METRICS, "sweep"]]
    return Report(per_seed, summary, tables, best_strategies(summary) if not summary.empty else pd.DataFrame(),
                  shift, volume, correlation_frame)


def cmd_report(run_root: Union[str, Path], out_dir: Optional[Union[str, Path]] = None) -> Dict[str, Path]:
    """Write report CSVs into `out_dir` (default <run_root>/report) and return their paths."""
    run_root = Path(run_root)
    report = build_report(run_root)
    out_dir = Path(out_dir) if out_dir else run_root / REPORT_DIR
    out_dir.mkdir(parents=True, exist_ok=True)
    written: Dict[str, Path] = {}

    def save(name: str, frame: pd.DataFrame, index: bool = False) -> None:
        path = out_dir / name
        frame.to_csv(path, index=index, lineterminator="\n", float_format="%.6f")
        written[name] = path

    for metric, table in report.tables.items():
        if not table.empty:
            save(f"{metric}_table.csv", table, index=True)
    save("summary.csv", report.summary)
    save("per_seed.csv", report.per_seed)
    if not report.best.empty:
        save("best_strategies.csv", report.best)
    if not report.topic_shift.empty:
        save("topic_shift.csv", report.topic_shift)
    if not report.data_volume.empty:
        save("data_volume.csv", report.data_volume)
    if not report.correlations.empty:
        save("correlations.csv", report.correlations)
    logger.info("✅ report over %d runs written to %s", len(report.per_seed), out_dir)
    return written
