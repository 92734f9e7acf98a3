"""
Dataset pipeline for continual retrieval experiments.

Covers the task file codec (TSV), tokenization and vocabulary, pretrained
word-vector loading, pairwise <q, pos, neg> sampling, k-means topic splitting
with squared centroid distances, and the synthetic multi-topic generator.

Task files:
    task_<t>.train.tsv / task_<t>.test.tsv, t from 1, UTF-8, header row
    query_id<TAB>query_text<TAB>doc_id<TAB>doc_text<TAB>relevance
"""

import csv
import hashlib
import io
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist
from sklearn.cluster import KMeans

from config import SyntheticConfig

logger = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

COLUMNS = ["query_id", "query_text", "doc_id", "doc_text", "relevance"]
_TOKEN = re.compile(r"[^\W_]+")
_TASK_FILE = re.compile(r"^task_(\d+)\.(train|test)\.tsv$")
# the only characters the TSV layout cannot carry
_FIELD_BREAKS = re.compile(r"[\t\r\n]")


class DataFormatError(ValueError):
    """Malformed dataset or embedding file."""

    def __init__(self, message: str, path: Optional[Union[str, Path]] = None, line: Optional[int] = None):
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")
        self.path = str(path) if path is not None else None
        self.line = line

    def to_payload(self) -> dict:
        return {"type": "DATA_FORMAT_ERROR", "message": str(self), "path": self.path, "line": self.line}


# ---------------------------------------------------------------------------
# Samples, tasks, vocabulary
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    query_id: str
    query_text: str
    doc_id: str
    doc_text: str
    relevance: float

    @property
    def is_relevant(self) -> bool:
        return self.relevance > 0.0


@dataclass
class TaskData:
    task_id: int
    train: List[Sample]
    test: List[Sample]
    topic: str = ""

    def __post_init__(self) -> None:
        if not self.topic:
            self.topic = f"topic_{self.task_id}"

    def train_documents(self) -> List[str]:
        seen: Dict[str, str] = {}
        for sample in self.train:
            seen.setdefault(sample.doc_id, sample.doc_text)
        return list(seen.values())

    def validate(self) -> None:
        for split, samples in (("train", self.train), ("test", self.test)):
            keys = set()
            for sample in samples:
                key = (sample.query_id, sample.doc_id)
                if key in keys:
                    raise DataFormatError(f"task {self.task_id} {split}: duplicate pair {key}")
                keys.add(key)
        flags: Dict[str, List[bool]] = {}
        for sample in self.test:
            flags.setdefault(sample.query_id, []).append(sample.is_relevant)
        for query_id, labels in flags.items():
            if not any(labels):
                raise DataFormatError(f"task {self.task_id} test: query {query_id!r} has no relevant document")
            if all(labels):
                raise DataFormatError(f"task {self.task_id} test: query {query_id!r} has no non-relevant document")


def tokenize(text: str) -> List[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN.findall(text.lower())


class Vocabulary:
    """token <-> id map; id 0 is padding, id 1 the unknown token."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: List[str] = [PAD_TOKEN, UNK_TOKEN]
        self.stoi: Dict[str, int] = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        self._cache: Dict[str, List[int]] = {}
        for token in tokens:
            self.add(token)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: object) -> bool:
        return token in self.stoi

    def encode(self, text: str) -> List[int]:
        ids = self._cache.get(text)
        if ids is None:
            ids = [self.stoi.get(token, UNK_ID) for token in tokenize(text)]
            self._cache[text] = ids
        return ids

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        tokens = set()
        for text in texts:
            tokens.update(tokenize(text))
        return cls(sorted(tokens))


@dataclass
class ContinualDataset:
    tasks: List[TaskData]
    vocab: Vocabulary = field(default_factory=Vocabulary)

    def __post_init__(self) -> None:
        if not self.tasks:
            raise DataFormatError("a continual dataset needs at least one task")

    def __len__(self) -> int:
        return len(self.tasks)

    def task(self, t: int) -> TaskData:
        return self.tasks[t - 1]

    def fingerprints(self) -> Dict[str, str]:
        """sha256 of the canonical TSV text of every task split."""
        prints = {}
        for task in self.tasks:
            for split in ("train", "test"):
                text = samples_to_tsv(getattr(task, split))
                prints[f"task_{task.task_id}.{split}"] = hashlib.sha256(text.encode("utf-8")).hexdigest()
        return prints


def build_dataset(tasks: List[TaskData]) -> ContinualDataset:
    texts = []
    for task in tasks:
        for sample in task.train + task.test:
            texts.extend((sample.query_text, sample.doc_text))
    return ContinualDataset(tasks, Vocabulary.from_texts(texts))


# ---------------------------------------------------------------------------
# TSV codec
# ---------------------------------------------------------------------------

def _clean(text: str) -> str:
    return _FIELD_BREAKS.sub(" ", str(text))


def _format_relevance(value: float) -> str:
    return repr(float(value)) if not float(value).is_integer() else str(int(value))


def samples_to_tsv(samples: Sequence[Sample]) -> str:
    buffer = io.StringIO()
    buffer.write("\t".join(COLUMNS) + "\n")
    for s in samples:
        row = [_clean(s.query_id), _clean(s.query_text), _clean(s.doc_id), _clean(s.doc_text), _format_relevance(s.relevance)]
        buffer.write("\t".join(row) + "\n")
    return buffer.getvalue()


def write_task_file(path: Union[str, Path], samples: Sequence[Sample]) -> None:
    Path(path).write_text(samples_to_tsv(samples), encoding="utf-8")


def read_task_file(path: Union[str, Path]) -> List[Sample]:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError("file not found", path)
    try:
        frame = pd.read_csv(path, sep="\t", quoting=csv.QUOTE_NONE, dtype=str, keep_default_na=False,
                            on_bad_lines="error", encoding="utf-8")
    except pd.errors.ParserError as exc:
        match = re.search(r"line (\d+)", str(exc))
        raise DataFormatError(f"bad column count ({exc})", path, int(match.group(1)) if match else None) from exc
    except pd.errors.EmptyDataError as exc:
        raise DataFormatError("empty file", path) from exc
    if list(frame.columns) != COLUMNS:
        raise DataFormatError(f"header must be {COLUMNS}, got {list(frame.columns)}", path, 1)

    relevance = pd.to_numeric(frame["relevance"], errors="coerce")
    bad = relevance.isna() | ~np.isfinite(relevance.fillna(0.0))
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataFormatError(f"non-numeric relevance {frame['relevance'].iloc[row]!r}", path, row + 2)
    out_of_range = (relevance < 0.0) | (relevance > 1.0)
    if out_of_range.any():
        row = int(np.flatnonzero(out_of_range.to_numpy())[0])
        raise DataFormatError(f"relevance {relevance.iloc[row]} outside [0, 1]", path, row + 2)

    return [
        Sample(qid, qtext, did, dtext, float(rel))
        for qid, qtext, did, dtext, rel in zip(frame["query_id"], frame["query_text"], frame["doc_id"],
                                               frame["doc_text"], relevance)
    ]


def _subsample_queries(samples: List[Sample], limit: Optional[int], rng: np.random.Generator) -> List[Sample]:
    if limit is None:
        return samples
    query_ids = list(dict.fromkeys(s.query_id for s in samples))
    if len(query_ids) <= limit:
        return samples
    keep = set(rng.choice(np.array(query_ids, dtype=object), size=limit, replace=False).tolist())
    return [s for s in samples if s.query_id in keep]


def ingest_tasks(root: Union[str, Path], max_train_queries: Optional[int] = None,
                 max_test_queries: Optional[int] = None, seed: int = 0) -> ContinualDataset:
    """
    Read task_<t>.{train,test}.tsv files from `root` into a validated ContinualDataset.

    Optional query caps keep a uniformly random subset of queries per task split.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataFormatError("dataset directory not found", root)
    found: Dict[int, set] = {}
    for path in root.iterdir():
        match = _TASK_FILE.match(path.name)
        if match:
            found.setdefault(int(match.group(1)), set()).add(match.group(2))
    if not found:
        raise DataFormatError("no task_<t>.{train,test}.tsv files", root)
    ids = sorted(found)
    if ids != list(range(1, len(ids) + 1)):
        raise DataFormatError(f"task ids must run 1..T without gaps, found {ids}", root)

    rng = np.random.default_rng(seed)
    tasks = []
    for t in ids:
        for split in ("train", "test"):
            if split not in found[t]:
                raise DataFormatError(f"missing task_{t}.{split}.tsv", root)
        train = _subsample_queries(read_task_file(root / f"task_{t}.train.tsv"), max_train_queries, rng)
        test = _subsample_queries(read_task_file(root / f"task_{t}.test.tsv"), max_test_queries, rng)
        task = TaskData(t, train, test)
        task.validate()
        tasks.append(task)
        logger.info("✅ task %d: %d train rows, %d test rows", t, len(train), len(test))
    return build_dataset(tasks)


def write_tasks(root: Union[str, Path], dataset: ContinualDataset) -> List[Path]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for task in dataset.tasks:
        for split in ("train", "test"):
            path = root / f"task_{task.task_id}.{split}.tsv"
            write_task_file(path, getattr(task, split))
            written.append(path)
    return written


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

def load_embeddings(path: Optional[Union[str, Path]], vocab: Vocabulary, dim: Optional[int] = None,
                    seed: int = 0) -> np.ndarray:
    """
    |V| x n embedding matrix.

    Tokens found in the word-vector file take their file vector; every other row is
    uniform in [-0.25, 0.25] drawn from `seed`; the padding row is zero. A leading
    "<count> <dim>" header line is skipped.
    """
    vectors: Dict[str, np.ndarray] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise DataFormatError("embedding file not found", path)
        with path.open(encoding="utf-8") as handle:
            for number, line in enumerate(handle, start=1):
                parts = line.rstrip("\n").split()
                if not parts:
                    continue
                if number == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                    continue
                try:
                    values = np.array(parts[1:], dtype=np.float64)
                except ValueError as exc:
                    raise DataFormatError("non-numeric vector entry", path, number) from exc
                if dim is None:
                    dim = values.size
                if values.size != dim or dim == 0:
                    raise DataFormatError(f"expected {dim} values, got {values.size}", path, number)
                if parts[0] in vocab:
                    vectors[parts[0]] = values
        logger.info("🔍 %d of %d vocabulary tokens found in %s", len(vectors), len(vocab), path.name)
    if dim is None:
        raise ValueError("embedding dimension unknown: pass dim or a non-empty embedding file")

    rng = np.random.default_rng(seed)
    matrix = rng.uniform(-0.25, 0.25, size=(len(vocab), dim))
    for token, values in vectors.items():
        matrix[vocab.stoi[token]] = values
    matrix[PAD_ID] = 0.0
    return matrix


# ---------------------------------------------------------------------------
# Pairwise sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Triple:
    """One <q, pos, neg> training row; `task` is the task it was drawn from."""

    query_id: str
    query_text: str
    pos_doc_id: str
    pos_text: str
    pos_relevance: float
    neg_doc_id: str
    neg_text: str
    neg_relevance: float
    task: int = 0


@dataclass
class PairwiseBatches:
    batches: List[List[Triple]]
    skipped_queries: int = 0

    def __iter__(self) -> Iterator[List[Triple]]:
        return iter(self.batches)

    def __len__(self) -> int:
        return len(self.batches)

    @property
    def triples(self) -> List[Triple]:
        return [triple for batch in self.batches for triple in batch]


def build_triples(samples: Sequence[Sample], negatives_per_positive: int, seed: int,
                  task: int = 0) -> Tuple[List[Triple], int]:
    """
    Every positive is paired with `negatives_per_positive` negatives of lower relevance from
    the same query, or, when the query has none, with docs of other queries in the task.
    Returns the triples in generation order and the number of skipped queries.
    """
    if negatives_per_positive < 1:
        raise ValueError("negatives_per_positive must be >= 1")
    rng = np.random.default_rng(seed)
    by_query: Dict[str, List[Sample]] = {}
    for sample in samples:
        by_query.setdefault(sample.query_id, []).append(sample)

    triples: List[Triple] = []
    skipped = 0
    for query_id, rows in by_query.items():
        positives = [s for s in rows if s.is_relevant]
        own_docs = {s.doc_id for s in rows}
        foreign: Optional[List[Sample]] = None
        emitted = False
        for pos in positives:
            pool = [s for s in rows if s.relevance < pos.relevance]
            foreign_pool = False
            if not pool:
                if foreign is None:
                    seen = set()
                    foreign = []
                    for s in samples:
                        if s.query_id != query_id and s.doc_id not in own_docs and s.doc_id not in seen:
                            seen.add(s.doc_id)
                            foreign.append(s)
                pool, foreign_pool = foreign, True
            if not pool:
                continue
            picks = rng.choice(len(pool), size=negatives_per_positive, replace=len(pool) < negatives_per_positive)
            for index in picks:
                neg = pool[int(index)]
                triples.append(Triple(query_id, pos.query_text, pos.doc_id, pos.doc_text, pos.relevance,
                                      neg.doc_id, neg.doc_text, 0.0 if foreign_pool else neg.relevance, task))
                emitted = True
        if not emitted:
            skipped += 1
    if skipped:
        logger.warning("⚠️ %d queries without a usable positive/negative pair were skipped", skipped)
    return triples, skipped


def batch_triples(triples: Sequence[Triple], batch_size: int, seed: int) -> List[List[Triple]]:
    """Shuffle deterministically by `seed` and cut into batches (the last may be short)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(triples))
    shuffled = [triples[int(i)] for i in order]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]


def sample_pairwise(samples: Sequence[Sample], negatives_per_positive: int, batch_size: int, seed: int,
                    task: int = 0) -> PairwiseBatches:
    triples, skipped = build_triples(samples, negatives_per_positive, seed, task)
    return PairwiseBatches(batch_triples(triples, batch_size, seed + 1), skipped)


# ---------------------------------------------------------------------------
# Clustering and topic distances
# ---------------------------------------------------------------------------

@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations: int
    seed: int


def kmeans(points: np.ndarray, k: int, max_iter: int = 300, seed: int = 0) -> KMeansResult:
    """Lloyd's iterations from k-means++ seeding, until assignments stabilize or max_iter."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"points must be an m x d matrix, got shape {points.shape}")
    if not 1 <= k <= points.shape[0]:
        raise ValueError(f"k={k} must lie in [1, m={points.shape[0]}]")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    model = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=max_iter, tol=0.0,
                   algorithm="lloyd", random_state=seed)
    assignments = model.fit_predict(points)
    centroids = model.cluster_centers_
    inertia = float(((points - centroids[assignments]) ** 2).sum())
    return KMeansResult(assignments, centroids, inertia, int(model.n_iter_), seed)


def kmeans_restarts(points: np.ndarray, k: int, restarts: int = 10, max_iter: int = 300,
                    seed: int = 0) -> KMeansResult:
    """Best (lowest inertia) of `restarts` runs seeded seed..seed+restarts-1."""
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    best: Optional[KMeansResult] = None
    for offset in range(restarts):
        result = kmeans(points, k, max_iter, seed + offset)
        if best is None or result.inertia < best.inertia:
            best = result
    logger.info("🔍 k-means k=%d: best inertia %.6f (seed %d)", k, best.inertia, best.seed)
    return best


@dataclass
class TopicDistanceMatrix:
    """Symmetric matrix of squared centroid distances, zero diagonal."""

    distances: np.ndarray
    centroids: np.ndarray
    topics: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.topics:
            self.topics = [str(i) for i in range(1, self.distances.shape[0] + 1)]

    def __getitem__(self, index: Tuple[int, int]) -> float:
        a, b = index
        return float(self.distances[a - 1, b - 1])

    def to_csv(self, path: Union[str, Path]) -> None:
        frame = pd.DataFrame(self.distances, index=self.topics, columns=self.topics)
        frame.index.name = "topic"
        frame.to_csv(path, float_format="%.6f", lineterminator="\n")

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "TopicDistanceMatrix":
        frame = pd.read_csv(path, index_col=0)
        distances = frame.to_numpy(dtype=np.float64)
        if distances.shape[0] != distances.shape[1]:
            raise DataFormatError("distance matrix must be square", path)
        return cls(distances, np.empty((distances.shape[0], 0)), [str(c) for c in frame.columns])


def topic_distance_matrix(centroids: np.ndarray, topics: Optional[List[str]] = None) -> TopicDistanceMatrix:
    centroids = np.asarray(centroids, dtype=np.float64)
    if centroids.ndim != 2 or centroids.shape[0] < 2:
        raise ValueError("need at least 2 centroids")
    distances = cdist(centroids, centroids, metric="sqeuclidean")
    distances = (distances + distances.T) / 2.0
    np.fill_diagonal(distances, 0.0)
    return TopicDistanceMatrix(distances, centroids, list(topics or []))


def mean_token_embedding(text: str, vocab: Vocabulary, embeddings: np.ndarray) -> np.ndarray:
    ids = [i for i in vocab.encode(text) if i not in (PAD_ID, UNK_ID)]
    if not ids:
        return np.zeros(embeddings.shape[1])
    return embeddings[ids].mean(axis=0)


def split_corpus_by_topic(corpus: Sequence[Sample], vocab: Vocabulary, embeddings: np.ndarray, k: int,
                          seed: int = 0, restarts: int = 10, test_fraction: float = 0.2,
                          max_iter: int = 300) -> Tuple[ContinualDataset, TopicDistanceMatrix, float]:
    """
    Cluster queries by their mean token embedding and turn each cluster into a task.

    Task t holds cluster t-1. Within a task, a `test_fraction` share of the queries that
    have both relevant and non-relevant rows goes to the test split.
    """
    rows_by_query: Dict[str, List[Sample]] = {}
    for sample in corpus:
        rows_by_query.setdefault(sample.query_id, []).append(sample)
    query_ids = sorted(rows_by_query)
    points = np.stack([mean_token_embedding(rows_by_query[q][0].query_text, vocab, embeddings) for q in query_ids])
    result = kmeans_restarts(points, k, restarts, max_iter, seed)

    rng = np.random.default_rng(seed)
    tasks = []
    for cluster in range(k):
        members = [q for q, label in zip(query_ids, result.assignments) if label == cluster]
        testable = [q for q in members
                    if any(s.is_relevant for s in rows_by_query[q]) and not all(s.is_relevant for s in rows_by_query[q])]
        order = rng.permutation(len(testable))
        test_count = min(len(testable), math.ceil(test_fraction * len(members))) if len(members) > 1 else 0
        test_ids = {testable[int(i)] for i in order[:test_count]}
        train = [s for q in members if q not in test_ids for s in rows_by_query[q]]
        test = [s for q in members if q in test_ids for s in rows_by_query[q]]
        tasks.append(TaskData(cluster + 1, train, test, topic=f"cluster_{cluster}"))
    dataset = ContinualDataset(tasks, vocab)
    distances = topic_distance_matrix(result.centroids, [str(t.task_id) for t in tasks])
    return dataset, distances, result.inertia


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

def _topic_pool(topic: int, vocab_size: int, shared: int) -> List[str]:
    """`shared` common tokens then private ones; positions 2i and 2i+1 are partners."""
    return [f"s{j:04d}" for j in range(shared)] + [f"t{topic}w{j:04d}" for j in range(vocab_size - shared)]


def shared_token_count(vocab_size: int, overlap: float) -> int:
    """round(alpha * V) rounded to an even count so partner pairs stay whole."""
    return int(2 * round(overlap * vocab_size / 2.0))


def generate_synthetic(config: SyntheticConfig, seed: int = 0) -> Tuple[ContinualDataset, TopicDistanceMatrix]:
    """
    Generate T topical retrieval tasks.

    Every topic owns V tokens: about alpha*V (an even count) from a pool shared by all topics
    and the rest private. Tokens come in fixed partner pairs. A relevant doc holds the
    query tokens and their partners; non-relevant candidates are filler from the same topic
    and never contain a query token or a partner. Centroids are the mean one-hot vectors
    of the topic pools, giving distance 2(V-s)/V^2 for s shared tokens.
    """
    V = config.vocab_per_topic
    if V % 2:
        raise ValueError(f"vocab_per_topic must be even, got {V}")
    if V < 2 * config.query_tokens + 1 or config.doc_tokens < 2 * config.query_tokens:
        raise ValueError(
            f"vocabulary too small: need vocab_per_topic > 2*query_tokens and doc_tokens >= 2*query_tokens "
            f"(V={V}, query_tokens={config.query_tokens}, doc_tokens={config.doc_tokens})"
        )
    shared = shared_token_count(V, config.overlap)
    rng = np.random.default_rng(seed)
    volumes = config.train_volumes or [config.train_queries] * config.tasks

    tasks = []
    for t in range(1, config.tasks + 1):
        tokens = _topic_pool(t, V, shared)

        def make_query(split: str, number: int, candidates: int) -> List[Sample]:
            # one token from each of query_tokens distinct partner pairs
            pairs = rng.choice(V // 2, size=config.query_tokens, replace=False)
            query_pos = 2 * pairs + rng.integers(0, 2, size=config.query_tokens)
            partners = [int(p) ^ 1 for p in query_pos]
            blocked = {int(p) for p in query_pos} | set(partners)
            filler = np.array([p for p in range(V) if p not in blocked])
            query_words = [tokens[int(p)] for p in query_pos]
            query_id = f"t{t}-{split}-q{number:05d}"
            query_text = " ".join(query_words)

            def doc(core: List[int]) -> str:
                extra = rng.choice(filler, size=config.doc_tokens - len(core), replace=True).tolist()
                words = [tokens[int(p)] for p in list(core) + extra]
                return " ".join(words[int(i)] for i in rng.permutation(len(words)))

            relevant = doc([int(p) for p in query_pos] + partners)
            rows = [Sample(query_id, query_text, f"{query_id}-d00", relevant, 1.0)]
            for j in range(1, candidates):
                rows.append(Sample(query_id, query_text, f"{query_id}-d{j:02d}", doc([]), 0.0))
            return rows

        train = [row for i in range(volumes[t - 1]) for row in make_query("train", i, 1 + config.train_negatives)]
        test = [row for i in range(config.test_queries) for row in make_query("test", i, config.docs_per_query)]
        tasks.append(TaskData(t, train, test, topic=f"topic_{t}"))

    dataset = build_dataset(tasks)
    universe = {token: i for i, token in enumerate(sorted({tok for t in range(1, config.tasks + 1)
                                                           for tok in _topic_pool(t, V, shared)}))}
    centroids = np.zeros((config.tasks, len(universe)))
    for t in range(1, config.tasks + 1):
        for token in _topic_pool(t, V, shared):
            centroids[t - 1, universe[token]] = 1.0 / V
    distances = topic_distance_matrix(centroids, [str(t) for t in range(1, config.tasks + 1)]) \
        if config.tasks >= 2 else TopicDistanceMatrix(np.zeros((1, 1)), centroids, ["1"])
    logger.info("✅ generated %d synthetic tasks (alpha=%.2f, %d shared tokens per topic)", config.tasks,
                config.overlap, shared)
    return dataset, distances
