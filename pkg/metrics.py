"""
Retrieval and continual-learning metrics.

MRR over ranked candidate lists, the T x T performance matrix with its CSV form,
the aggregate scores computed from it (final performance, backward transfer,
forward transfer) and Pearson correlation for the sweep analyses.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

logger = logging.getLogger(__name__)

CSV_INDEX_LABEL = "t\\s"


@dataclass
class RankedQuery:
    query_id: str
    ranking: List[str]
    relevant: Set[str] = field(default_factory=set)

    def first_relevant_rank(self, cutoff: Optional[int] = None) -> Optional[int]:
        candidates = self.ranking if cutoff is None else self.ranking[:cutoff]
        for rank, doc_id in enumerate(candidates, start=1):
            if doc_id in self.relevant:
                return rank
        return None


@dataclass
class RankedRun:
    """Per query: candidates ordered by descending score, ties by ascending doc id."""

    queries: List[RankedQuery] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.queries)

    @classmethod
    def from_scores(cls, scored: Iterable[Tuple[str, str, float]], relevant: Mapping[str, Iterable[str]]) -> "RankedRun":
        """Build from (query_id, doc_id, score) triples and the relevant doc ids per query."""
        per_query: Dict[str, List[Tuple[str, float]]] = {}
        for query_id, doc_id, score in scored:
            per_query.setdefault(query_id, []).append((doc_id, float(score)))
        queries = []
        for query_id in sorted(per_query):
            ordered = sorted(per_query[query_id], key=lambda item: (-item[1], item[0]))
            queries.append(RankedQuery(query_id, [doc_id for doc_id, _ in ordered], set(relevant.get(query_id, ()))))
        return cls(queries)


def mrr(run: RankedRun, cutoff: Optional[int] = None) -> float:
    """
    Mean reciprocal rank of the first relevant candidate.

    Queries whose candidates (within the cutoff, if any) hold no relevant doc contribute 0.
    """
    if not run.queries:
        raise ValueError("cannot compute MRR of an empty run")
    if cutoff is not None and cutoff < 1:
        raise ValueError(f"cutoff must be >= 1, got {cutoff}")
    total = 0.0
    for query in run.queries:
        if not query.ranking:
            raise ValueError(f"query {query.query_id!r} has no candidates")
        if not query.relevant:
            logger.warning("⚠️ query %s has no relevant documents; counted as 0", query.query_id)
            continue
        rank = query.first_relevant_rank(cutoff)
        if rank is not None:
            total += 1.0 / rank
    return total / len(run.queries)


class PerformanceMatrix:
    """T x T matrix of P_{t,s}: row t = model after task t, column s = test set of task s. 1-based access."""

    def __init__(self, tasks: int):
        if tasks < 1:
            raise ValueError("performance matrix needs T >= 1")
        self.values = np.full((tasks, tasks), np.nan)

    @property
    def tasks(self) -> int:
        return int(self.values.shape[0])

    def __getitem__(self, index: Tuple[int, int]) -> float:
        t, s = index
        return float(self.values[t - 1, s - 1])

    def __setitem__(self, index: Tuple[int, int], value: float) -> None:
        t, s = index
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"P[{t},{s}] = {value} outside [0, 1]")
        self.values[t - 1, s - 1] = value

    def set_row(self, t: int, row: Sequence[float]) -> None:
        if len(row) != self.tasks:
            raise ValueError(f"row {t} needs {self.tasks} entries, got {len(row)}")
        for s, value in enumerate(row, start=1):
            self[t, s] = value

    def is_complete(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def require_complete(self) -> None:
        if not self.is_complete():
            missing = [(t + 1, s + 1) for t, s in zip(*np.where(~np.isfinite(self.values)))]
            raise ValueError(f"performance matrix incomplete; missing entries {missing[:5]}")

    @classmethod
    def from_array(cls, values: Union[np.ndarray, Sequence[Sequence[float]]]) -> "PerformanceMatrix":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError(f"performance matrix must be square, got {values.shape}")
        finite = values[np.isfinite(values)]
        if np.any((finite < 0.0) | (finite > 1.0)):
            raise ValueError("performance matrix entries must lie in [0, 1]")
        matrix = cls(values.shape[0])
        matrix.values = values.copy()
        return matrix

    def to_frame(self) -> pd.DataFrame:
        labels = list(range(1, self.tasks + 1))
        frame = pd.DataFrame(self.values, index=labels, columns=labels)
        frame.index.name = CSV_INDEX_LABEL
        return frame

    def to_csv(self, path: Union[str, Path]) -> None:
        """Header `t\\s,1..T`, one row per t, 6 decimals, empty cells for missing entries."""
        self.to_frame().to_csv(path, float_format="%.6f", na_rep="", lineterminator="\n")

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "PerformanceMatrix":
        frame = pd.read_csv(path, index_col=0)
        return cls.from_array(frame.to_numpy(dtype=np.float64))


def p_final(matrix: PerformanceMatrix) -> float:
    """Mean of the last row: every task measured with the final model."""
    matrix.require_complete()
    return float(np.mean(matrix.values[-1]))


def _transfer_factor(matrix: PerformanceMatrix, name: str) -> float:
    tasks = matrix.tasks
    if tasks < 2:
        raise ValueError(f"{name} needs at least 2 tasks")
    matrix.require_complete()
    return 2.0 / (tasks * (tasks - 1))


def bwt(matrix: PerformanceMatrix) -> float:
    """Average change on past tasks: sum over t>s of (P_{t,s} - P_{s,s}), scaled by 2/(T(T-1))."""
    factor = _transfer_factor(matrix, "BWT")
    p = matrix.values
    lower = np.tril_indices(matrix.tasks, k=-1)
    return float(factor * np.sum(p[lower] - np.diag(p)[lower[1]]))


def fwt(matrix: PerformanceMatrix) -> float:
    """Average performance on not-yet-learned tasks: sum over s>t of P_{t,s}, scaled by 2/(T(T-1))."""
    factor = _transfer_factor(matrix, "FWT")
    return float(factor * np.sum(matrix.values[np.triu_indices(matrix.tasks, k=1)]))


def summarize(matrix: PerformanceMatrix) -> Dict[str, Optional[float]]:
    """p_final, bwt, fwt; the transfer scores are None for a single task."""
    return {
        "p_final": p_final(matrix),
        "bwt": bwt(matrix) if matrix.tasks >= 2 else None,
        "fwt": fwt(matrix) if matrix.tasks >= 2 else None,
    }


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"pearson needs equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError("pearson needs at least 2 points")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise ValueError("pearson undefined for zero-variance input")
    r, _ = stats.pearsonr(x, y)
    return float(np.clip(r, -1.0, 1.0))
