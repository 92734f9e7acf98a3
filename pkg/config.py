"""
Experiment configuration.

Every configuration object is a pydantic model that rejects unknown keys. Experiment
files are JSON; `load_experiment_config()` parses and validates one and turns any
validation failure into a ConfigError naming the offending fields.

Process-level settings (thread cap, log level, results root, service host/port)
come from the environment, optionally populated from a `.env` file.
"""

import json
import logging
import os
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

logger = logging.getLogger(__name__)

__version__ = "1.0.0"

HEADS = ("drmm", "knrm", "duet", "pooled_dot", "maxsim")
STRATEGIES = ("none", "l2", "ewc", "ewcol", "si", "mas", "nr", "gem")

# Penalty strength used when a strategy config leaves lambda unset.
DEFAULT_LAMBDA = {"l2": 0.01, "ewc": 100.0, "ewcol": 100.0, "si": 1.0, "mas": 1.0}

DEFAULT_KERNEL_MU = [1.0, 0.9, 0.7, 0.5, 0.3, 0.1, -0.1, -0.3, -0.5, -0.7, -0.9]
DEFAULT_KERNEL_SIGMA = [1e-3] + [0.1] * 10

DEFAULT_VOLUME_MULTIPLIERS = [round(0.1 * i, 1) for i in range(1, 11)] + [2.0, 3.0, 4.0, 5.0]


class ConfigError(ValueError):
    """Invalid experiment configuration."""

    def __init__(self, message: str, fields: Optional[List[str]] = None):
        super().__init__(message)
        self.fields = fields or []

    def to_payload(self) -> dict:
        return {"type": "CONFIG_ERROR", "message": str(self), "fields": self.fields}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RankerConfig(_Strict):
    """Hyperparameters of one ranking head."""

    head: Literal["drmm", "knrm", "duet", "pooled_dot", "maxsim"] = "knrm"
    embedding_dim: int = Field(300, ge=1, description="n, width of the embedding table")
    query_len: int = Field(20, ge=1, description="l(q)")
    doc_len: int = Field(128, ge=1, description="l(d)")
    bins: int = Field(30, ge=2, description="b, DRMM histogram bins")
    drmm_hidden: int = Field(5, ge=1)
    kernel_mu: List[float] = Field(default_factory=lambda: list(DEFAULT_KERNEL_MU))
    kernel_sigma: List[float] = Field(default_factory=lambda: list(DEFAULT_KERNEL_SIGMA))
    kernel_log: bool = Field(True, description="log(1+x) on pooled kernel values before the query sum")
    channels: int = Field(32, ge=1, description="c, Duet convolution channels")
    window: int = Field(3, ge=1, description="Duet convolution window")
    margin: float = Field(1.0, ge=0.0)

    @property
    def kernels(self) -> int:
        return len(self.kernel_mu)

    @model_validator(mode="after")
    def _check_kernels(self) -> "RankerConfig":
        if len(self.kernel_mu) < 1:
            raise ValueError("kernel_mu needs at least one kernel")
        if len(self.kernel_mu) != len(self.kernel_sigma):
            raise ValueError(f"kernel_mu has {len(self.kernel_mu)} entries, kernel_sigma has {len(self.kernel_sigma)}")
        if any(s <= 0 for s in self.kernel_sigma):
            raise ValueError("every kernel_sigma must be > 0")
        if any(not -1.0 <= m <= 1.0 for m in self.kernel_mu):
            raise ValueError("every kernel_mu must lie in [-1, 1]")
        return self


class StrategyConfig(_Strict):
    """Continual-learning strategy and its knobs."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    name: Literal["none", "l2", "ewc", "ewcol", "si", "mas", "nr", "gem"] = "none"
    lam: Optional[float] = Field(None, alias="lambda", ge=0.0)
    fisher_samples: Optional[int] = Field(None, ge=1, description="K; default min(1024, |S_t|)")
    si_xi: float = Field(1e-3, gt=0.0)
    capacity: int = Field(0, ge=0, description="memory buffer size in training triples")
    gem_gamma: float = Field(1e-3, ge=0.0)
    qp_tol: float = Field(1e-8, gt=0.0)
    qp_max_iter: int = Field(1000, ge=1)

    @model_validator(mode="after")
    def _resolve(self) -> "StrategyConfig":
        if self.lam is None:
            self.lam = DEFAULT_LAMBDA.get(self.name, 0.0)
        if self.name == "gem" and self.capacity == 0:
            raise ValueError("strategy 'gem' needs capacity > 0")
        if self.name == "nr" and self.capacity == 0:
            logger.warning("⚠️ strategy 'nr' with capacity 0 behaves like the baseline")
        return self

    @property
    def tag(self) -> str:
        return self.name


class OptimizerConfig(_Strict):
    lr: float = Field(1e-3, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)


class SyntheticConfig(_Strict):
    """Parameters of the generated multi-topic dataset."""

    tasks: int = Field(3, ge=1)
    vocab_per_topic: int = Field(40, ge=2)
    overlap: float = Field(0.0, ge=0.0, le=1.0, description="alpha, share of topic vocabulary drawn from a common pool")
    train_queries: int = Field(500, ge=1)
    test_queries: int = Field(100, ge=1)
    docs_per_query: int = Field(20, ge=2, description="test candidates per query (1 relevant + rest non-relevant)")
    train_negatives: int = Field(1, ge=1, description="non-relevant training docs per query")
    query_tokens: int = Field(3, ge=1)
    doc_tokens: int = Field(12, ge=1)
    train_volumes: Optional[List[int]] = Field(None, description="per-task training query counts, overrides train_queries")

    @field_validator("train_volumes")
    @classmethod
    def _positive_volumes(cls, value: Optional[List[int]]) -> Optional[List[int]]:
        if value is not None and any(v < 1 for v in value):
            raise ValueError("train_volumes entries must be >= 1")
        return value

    @model_validator(mode="after")
    def _volume_length(self) -> "SyntheticConfig":
        if self.train_volumes is not None and len(self.train_volumes) != self.tasks:
            raise ValueError(f"train_volumes has {len(self.train_volumes)} entries for {self.tasks} tasks")
        return self


class DatasetConfig(_Strict):
    source: Literal["synthetic", "ingest"] = "synthetic"
    path: Optional[str] = Field(None, description="directory of task_<t>.{train,test}.tsv files")
    embeddings: Optional[str] = Field(None, description="pretrained word-vector text file")
    max_train_queries: Optional[int] = Field(None, ge=1)
    max_test_queries: Optional[int] = Field(None, ge=1)
    seed: int = Field(0, description="seed for synthetic generation, query subsampling and embedding fill")
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)

    @model_validator(mode="after")
    def _needs_path(self) -> "DatasetConfig":
        if self.source == "ingest" and not self.path:
            raise ValueError("dataset.path is required when source is 'ingest'")
        return self


class CorpusSplitConfig(_Strict):
    """Corpus-mode task generation: cluster queries by mean token embedding."""

    corpus: str
    embeddings: str
    k: int = Field(..., ge=1)
    restarts: int = Field(10, ge=1)
    max_iter: int = Field(300, ge=1)
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)


class TopicShiftSweep(_Strict):
    alphas: List[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75])
    pairs: Optional[List[Tuple[int, int]]] = Field(None, description="(anchor, other) topics in corpus mode")
    distances: Optional[str] = Field(None, description="topic_distances.csv for corpus mode")
    strategies: List[str] = Field(default_factory=lambda: ["none", "si"])

    @field_validator("alphas")
    @classmethod
    def _alpha_range(cls, value: List[float]) -> List[float]:
        if any(not 0.0 <= a <= 1.0 for a in value):
            raise ValueError("alphas must lie in [0, 1]")
        return value


class DataVolumeSweep(_Strict):
    multipliers: List[float] = Field(default_factory=lambda: list(DEFAULT_VOLUME_MULTIPLIERS))
    strategies: List[str] = Field(default_factory=lambda: ["none", "si"])

    @field_validator("multipliers")
    @classmethod
    def _positive(cls, value: List[float]) -> List[float]:
        if any(m <= 0 for m in value):
            raise ValueError("multipliers must be > 0")
        return value


class SweepConfig(_Strict):
    topic_shift: Optional[TopicShiftSweep] = None
    data_volume: Optional[DataVolumeSweep] = None

    @model_validator(mode="after")
    def _known_strategies(self) -> "SweepConfig":
        for sweep in (self.topic_shift, self.data_volume):
            if sweep is None:
                continue
            unknown = [s for s in sweep.strategies if s not in STRATEGIES]
            if unknown:
                raise ValueError(f"unknown sweep strategies: {unknown}")
        return self


class RunConfig(_Strict):
    """One (ranker, strategy, seed) cell of an experiment grid."""

    run_id: str = "run"
    ranker: RankerConfig = Field(default_factory=RankerConfig)
    strategy: StrategyConfig = Field(default_factory=StrategyConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    epochs: int = Field(3, ge=0)
    batch_size: int = Field(32, ge=1)
    negatives_per_positive: int = Field(1, ge=1)
    mrr_cutoff: Optional[int] = Field(None, ge=1)
    seed: int = 0


class ExperimentConfig(_Strict):
    """One experiment: a (ranker x strategy x seed) grid over a dataset, plus optional sweeps."""

    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    rankers: List[RankerConfig] = Field(default_factory=lambda: [RankerConfig()])
    strategies: List[StrategyConfig] = Field(default_factory=lambda: [StrategyConfig()])
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    epochs: int = Field(3, ge=0)
    batch_size: int = Field(32, ge=1)
    negatives_per_positive: int = Field(1, ge=1)
    mrr_cutoff: Optional[int] = Field(None, ge=1)
    seeds: List[int] = Field(default_factory=lambda: [0])
    output_dir: str = "runs"
    taskgen: Optional[CorpusSplitConfig] = None
    sweep: Optional[SweepConfig] = None

    @field_validator("seeds")
    @classmethod
    def _some_seeds(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("seeds must list at least one seed")
        return value

    @field_validator("rankers", "strategies")
    @classmethod
    def _non_empty(cls, value: list) -> list:
        if not value:
            raise ValueError("must list at least one entry")
        return value

    def run_config(self, ranker: RankerConfig, strategy: StrategyConfig, seed: int, run_id: str) -> RunConfig:
        return RunConfig(
            run_id=run_id,
            ranker=ranker,
            strategy=strategy,
            optimizer=self.optimizer,
            epochs=self.epochs,
            batch_size=self.batch_size,
            negatives_per_positive=self.negatives_per_positive,
            mrr_cutoff=self.mrr_cutoff,
            seed=seed,
        )

    def runs(self) -> List[RunConfig]:
        """Every (ranker, strategy, seed) combination, ids `<head>__<strategy>__seed<n>`."""
        heads = [r.head for r in self.rankers]
        tags = [s.tag for s in self.strategies]
        runs = []
        for i, ranker in enumerate(self.rankers):
            head = ranker.head if heads.count(ranker.head) == 1 else f"{ranker.head}{i + 1}"
            for j, strategy in enumerate(self.strategies):
                tag = strategy.tag if tags.count(strategy.tag) == 1 else f"{strategy.tag}{j + 1}"
                for seed in self.seeds:
                    runs.append(self.run_config(ranker, strategy, seed, f"{head}__{tag}__seed{seed}"))
        return runs


def _field_paths(error: ValidationError) -> List[str]:
    return [".".join(str(part) for part in item["loc"]) or "<root>" for item in error.errors()]


def parse_experiment_config(data: Union[dict, None]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data or {})
    except ValidationError as exc:
        fields = _field_paths(exc)
        details = "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors())
        raise ConfigError(f"invalid experiment config: {details}", fields) from exc


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON (line {exc.lineno}: {exc.msg})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_experiment_config(data)


class Settings(BaseModel):
    """Process settings read from the environment."""

    threads: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)
    log_level: str = "INFO"
    run_root: str = "runs"
    host: str = "0.0.0.0"
    port: int = 8003


def load_settings() -> Settings:
    load_dotenv()
    values = {
        "threads": os.getenv("CONTIR_THREADS"),
        "log_level": os.getenv("CONTIR_LOG_LEVEL"),
        "run_root": os.getenv("CONTIR_RUN_ROOT"),
        "host": os.getenv("HOST"),
        "port": os.getenv("PORT"),
    }
    try:
        return Settings(**{k: v for k, v in values.items() if v not in (None, "")})
    except ValidationError as exc:
        raise ConfigError(f"invalid environment settings: {exc}", _field_paths(exc)) from exc
