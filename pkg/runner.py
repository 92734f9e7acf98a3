"""
Continual training agent.

For every task t in order: build the task's training triples, let the strategy
extend them (rehearsal), train for the configured epochs, run the strategy's
end-of-task hook (importance or memory update), then evaluate the frozen model
on all T test sets to fill row t of the performance matrix.

Run directory layout:
    manifest.json   resolved config, seeds, dataset fingerprints, timings, status
    P_matrix.csv    performance matrix, rewritten after every task
    metrics.txt     key=value aggregates and per-task wall clock
    log.txt         log records emitted while the run was active
"""

import contextvars
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

import autodiff as ad
import metrics
import strategies
from autodiff import NonFiniteError, OptimizerState
from config import RunConfig, __version__
from metrics import PerformanceMatrix, RankedRun
from rankers import Ranker, TripleEncoder, build_ranker
from taskdata import ContinualDataset, Sample, TaskData, Triple, batch_triples, build_triples

logger = logging.getLogger(__name__)

ScoreFn = Callable[[Sequence[Sample]], Sequence[float]]

EVAL_BATCH = 256
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# directory of the run whose log.txt takes records emitted in this context
_active_run: contextvars.ContextVar[Optional[str]] = contextvars.ContextVar("active_run", default=None)


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/inf loss or gradient; the task is aborted."""

    def __init__(self, message: str, task: int, epoch: int, batch: int):
        super().__init__(message)
        self.task = task
        self.epoch = epoch
        self.batch = batch

    def to_payload(self) -> dict:
        return {"type": "NON_FINITE_LOSS", "message": str(self), "task": self.task, "epoch": self.epoch,
                "batch": self.batch}


def error_payload(exc: BaseException) -> dict:
    """Typed failure record for manifests and CLI summaries."""
    to_payload = getattr(exc, "to_payload", None)
    if callable(to_payload):
        return to_payload()
    return {"type": "RUN_FAILED", "message": f"{type(exc).__name__}: {exc}"}


def derive_seed(seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([seed, *parts]).generate_state(1)[0])


@dataclass
class TrainStats:
    task: int
    triples: int
    batches: int = 0
    mean_loss: Optional[float] = None


@dataclass
class RunManifest:
    run_id: str
    config: dict
    seed: int
    dataset: dict = field(default_factory=dict)
    fingerprints: Dict[str, str] = field(default_factory=dict)
    version: str = __version__
    status: str = "started"
    started_at: str = field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))
    finished_at: Optional[str] = None
    task_seconds: List[float] = field(default_factory=list)
    training: List[dict] = field(default_factory=list)
    strategy_state: dict = field(default_factory=dict)
    error: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "version": self.version,
            "status": self.status,
            "seed": self.seed,
            "config": self.config,
            "dataset": self.dataset,
            "fingerprints": self.fingerprints,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "task_seconds": self.task_seconds,
            "training": self.training,
            "strategy_state": self.strategy_state,
            "error": self.error,
            **({"extra": self.extra} if self.extra else {}),
        }

    def write(self, run_dir: Union[str, Path]) -> Path:
        path = Path(run_dir) / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n", encoding="utf-8")
        return path


@dataclass
class RunResult:
    run_id: str
    run_dir: Path
    matrix: PerformanceMatrix
    summary: Optional[Dict[str, Optional[float]]]
    manifest: RunManifest


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate_task(score_fn: ScoreFn, test_set: Sequence[Sample], cutoff: Optional[int] = None) -> float:
    """MRR of `score_fn` over every query of a test set."""
    if not test_set:
        raise ValueError("cannot evaluate an empty test set")
    scores = np.asarray(score_fn(test_set), dtype=np.float64)
    if scores.shape != (len(test_set),):
        raise ad.ShapeError(f"score function returned {scores.shape} for {len(test_set)} rows")
    relevant: Dict[str, List[str]] = {}
    for sample in test_set:
        if sample.is_relevant:
            relevant.setdefault(sample.query_id, []).append(sample.doc_id)
    run = RankedRun.from_scores(((s.query_id, s.doc_id, v) for s, v in zip(test_set, scores)), relevant)
    return metrics.mrr(run, cutoff)


def ranker_scorer(ranker: Ranker, encoder: TripleEncoder, batch_size: int = EVAL_BATCH) -> ScoreFn:
    """Read-only score function: encodes (query, doc) rows and predicts in chunks."""

    def score(rows: Sequence[Sample]) -> np.ndarray:
        out = []
        for start in range(0, len(rows), batch_size):
            chunk = rows[start:start + batch_size]
            pairs = encoder.pairs([s.query_text for s in chunk], [s.doc_text for s in chunk])
            out.append(ranker.predict(pairs))
        return np.concatenate(out) if out else np.zeros(0)

    return score


# ---------------------------------------------------------------------------
# Agent
# ---------------------------------------------------------------------------

class ContinualAgent:
    """A ranker, its optimizer state and a strategy, trained task after task."""

    def __init__(self, run: RunConfig, ranker: Ranker, encoder: TripleEncoder,
                 strategy: Optional[strategies.Strategy] = None, threads: int = 1):
        self.run = run
        self.ranker = ranker
        self.encoder = encoder
        self.strategy = strategy or strategies.build_strategy(run.strategy, encoder, run.batch_size, run.seed)
        self.optimizer = OptimizerState(lr=run.optimizer.lr, momentum=run.optimizer.momentum)
        self.threads = max(1, threads)
        self.task = 0

    @property
    def seed(self) -> int:
        return self.run.seed

    def task_triples(self, task: TaskData) -> List[Triple]:
        triples, skipped = build_triples(task.train, self.run.negatives_per_positive,
                                         derive_seed(self.seed, task.task_id, 0), task.task_id)
        if skipped:
            logger.info("task %d: %d queries skipped during pair sampling", task.task_id, skipped)
        return triples

    def train_step(self, batch: Sequence[Triple], task: int, epoch: int, index: int) -> float:
        encoded = self.encoder(batch)
        try:
            with ad.recording() as record:
                loss = self.ranker.pair_loss(encoded)
                loss_grads = {name: g.values for name, g in record.backward(loss, self.ranker.params).items()}
            grads = loss_grads
            penalty = self.strategy.penalty_gradient(self.ranker)
            if penalty is not None:
                grads = {name: loss_grads[name] + penalty[name] for name in loss_grads}
            grads = self.strategy.adjust_gradient(self.ranker, grads)
            ad.optimizer_step(self.ranker.params, grads, self.optimizer)
        except NonFiniteError as exc:
            raise NonFiniteLossError(f"task {task} epoch {epoch} batch {index}: {exc}", task, epoch, index) from exc
        self.strategy.after_step(self.ranker, loss_grads)
        return loss.item()

    def evaluate(self, dataset: ContinualDataset) -> List[float]:
        """One MRR per test set, computed in parallel against the frozen parameters."""
        score = ranker_scorer(self.ranker, self.encoder)
        cutoff = self.run.mrr_cutoff
        with ThreadPoolExecutor(max_workers=min(self.threads, len(dataset))) as pool:
            futures = [pool.submit(contextvars.copy_context().run, evaluate_task, score, task.test, cutoff)
                       for task in dataset.tasks]
            return [future.result() for future in futures]


def train_task(agent: ContinualAgent, triples: Sequence[Triple], epochs: int, task: int = 0) -> TrainStats:
    """
    Train on one task's (possibly merged) training triples.

    Raises:
        ValueError: no training triples
        NonFiniteLossError: NaN/inf loss, gradient or update
    """
    if not triples:
        raise ValueError(f"task {task} has an empty training set")
    stats = TrainStats(task, len(triples))
    losses = []
    for epoch in range(epochs):
        batches = batch_triples(triples, agent.run.batch_size, derive_seed(agent.seed, task, epoch + 1))
        progress = tqdm(batches, desc=f"task {task} epoch {epoch + 1}/{epochs}", leave=False, disable=None)
        for index, batch in enumerate(progress):
            losses.append(agent.train_step(batch, task, epoch + 1, index + 1))
        stats.batches += len(batches)
        logger.debug("task %d epoch %d mean loss %.6f", task, epoch + 1, float(np.mean(losses[-len(batches):])))
    stats.mean_loss = float(np.mean(losses)) if losses else None
    return stats


def write_metrics(path: Union[str, Path], summary: Dict[str, Optional[float]], task_seconds: Sequence[float]) -> None:
    lines = [f"{key}={'' if value is None else f'{value:.6f}'}" for key, value in summary.items()]
    lines += [f"task_{t}_seconds={seconds:.3f}" for t, seconds in enumerate(task_seconds, start=1)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metrics(path: Union[str, Path]) -> Dict[str, Optional[float]]:
    values: Dict[str, Optional[float]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" not in line:
            continue
        key, _, raw = line.partition("=")
        values[key.strip()] = float(raw) if raw.strip() else None
    return values


class RunLogFilter(logging.Filter):
    """Passes records emitted while the given run directory is the active run."""

    def __init__(self, run_key: str):
        super().__init__()
        self.run_key = run_key

    def filter(self, record: logging.LogRecord) -> bool:
        return _active_run.get() == self.run_key


def _attach_log(run_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(run_dir / "log.txt", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler.addFilter(RunLogFilter(str(run_dir.resolve())))
    logging.getLogger().addHandler(handler)
    return handler


def run_continual(run: RunConfig, dataset: ContinualDataset, run_dir: Union[str, Path],
                  embeddings: Optional[np.ndarray] = None, threads: int = 1, dry_run: bool = False,
                  dataset_info: Optional[dict] = None, extra: Optional[dict] = None) -> RunResult:
    """
    Train over all tasks of `dataset` and fill the T x T performance matrix.

    The manifest is written before training and finalized afterwards. On failure the
    partial matrix and a failed manifest are persisted and the error is re-raised.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    active = _active_run.set(str(run_dir.resolve()))
    handler = _attach_log(run_dir)
    tasks = len(dataset)
    matrix = PerformanceMatrix(tasks)
    manifest = RunManifest(
        run_id=run.run_id,
        config=run.model_dump(mode="json", by_alias=True),
        seed=run.seed,
        dataset={**(dataset_info or {}), "tasks": tasks, "vocab_size": len(dataset.vocab)},
        fingerprints=dataset.fingerprints(),
        extra=dict(extra or {}),
    )
    try:
        manifest.write(run_dir)
        if dry_run:
            manifest.status = "dry_run"
            logger.info("🔍 dry run %s: manifest written, no training", run.run_id)
            return RunResult(run.run_id, run_dir, matrix, None, manifest)

        logger.info("🔍 run %s: %s / %s, seed %d, %d tasks", run.run_id, run.ranker.head, run.strategy.tag,
                    run.seed, tasks)
        ranker = build_ranker(run.ranker, len(dataset.vocab), embeddings, seed=run.seed)
        encoder = TripleEncoder(dataset.vocab, run.ranker)
        agent = ContinualAgent(run, ranker, encoder, threads=threads)

        for task in dataset.tasks:
            t = task.task_id
            started = time.perf_counter()
            agent.task = t
            triples = agent.task_triples(task)
            training = agent.strategy.training_set(triples, t)
            ranker.prepare_task(encoder.documents(task.train_documents()))
            agent.strategy.begin_task(ranker, t)
            stats = train_task(agent, training, run.epochs, t)
            agent.strategy.end_task(ranker, triples, t)
            row = agent.evaluate(dataset)
            matrix.set_row(t, row)
            matrix.to_csv(run_dir / "P_matrix.csv")
            manifest.task_seconds.append(round(time.perf_counter() - started, 3))
            manifest.training.append(stats.__dict__)
            logger.info("✅ task %d/%d trained on %d triples; MRR row %s", t, tasks, len(training),
                        " ".join(f"{v:.4f}" for v in row))

        summary = metrics.summarize(matrix)
        write_metrics(run_dir / "metrics.txt", summary, manifest.task_seconds)
        manifest.strategy_state = agent.strategy.describe()
        manifest.status = "completed"
        logger.info("✅ run %s finished: %s", run.run_id,
                    ", ".join(f"{k}={'n/a' if v is None else f'{v:.4f}'}" for k, v in summary.items()))
        return RunResult(run.run_id, run_dir, matrix, summary, manifest)
    except Exception as exc:
        manifest.status = "failed"
        manifest.error = error_payload(exc)
        matrix.to_csv(run_dir / "P_matrix.csv")
        logger.error("❌ run %s failed: %s", run.run_id, exc)
        raise
    finally:
        manifest.finished_at = datetime.now().isoformat(timespec="seconds")
        manifest.write(run_dir)
        logging.getLogger().removeHandler(handler)
        handler.close()
        _active_run.reset(active)
