"""
Embedding-based neural rankers R(q, d; theta).

Heads:
    drmm        cosine matching histogram -> MLP, gated by a term-weighting path
    knrm        RBF kernel pooling over the normalized interaction matrix
    duet        exact-match local path plus convolutional distributed path
    pooled_dot  dot product of mean-pooled query and doc embeddings
    maxsim      late interaction: per query term max cosine over doc terms

Each head registers an initializer and a forward function. `score_batch()` is the
single dispatch point; `Ranker` bundles a ParameterSet with its config and the
per-task idf table used by the duet local path.

Padding positions are replaced by zero vectors right after the embedding lookup
and excluded from every pooling step, so token ids under the mask never reach a
score.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

import autodiff as ad
from autodiff import ParameterSet, ShapeError, Tensor
from config import RankerConfig
from taskdata import PAD_ID, UNK_ID, Triple, Vocabulary

logger = logging.getLogger(__name__)

MASK_FILL = -1e9


class UnknownHeadError(ValueError):
    """Ranker head tag with no registered implementation."""


@dataclass(frozen=True)
class TokenizedPairs:
    """A batch of fixed-length (query, doc) token id sequences with their masks."""

    query_ids: np.ndarray
    doc_ids: np.ndarray
    query_mask: np.ndarray
    doc_mask: np.ndarray

    def __post_init__(self) -> None:
        for name in ("query_ids", "doc_ids"):
            ids = getattr(self, name)
            if ids.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
                raise ShapeError(f"{name} must be a 2-d integer array, got {ids.dtype} {ids.shape}")
        if self.query_mask.shape != self.query_ids.shape or self.doc_mask.shape != self.doc_ids.shape:
            raise ShapeError("mask shapes must equal token shapes")
        if self.query_ids.shape[0] != self.doc_ids.shape[0]:
            raise ShapeError("query and doc batches differ in size")
        if len(self) and (not self.query_mask.any(axis=1).all() or not self.doc_mask.any(axis=1).all()):
            raise ShapeError("every pair needs at least one unmasked query token and one unmasked doc token")

    def __len__(self) -> int:
        return int(self.query_ids.shape[0])

    @classmethod
    def from_sequences(cls, queries: Sequence[Sequence[int]], docs: Sequence[Sequence[int]],
                       query_len: int, doc_len: int) -> "TokenizedPairs":
        """Truncate/pad token id lists to fixed lengths. Empty sequences become a single unknown token."""
        q_ids, q_mask = _pad(queries, query_len)
        d_ids, d_mask = _pad(docs, doc_len)
        return cls(q_ids, d_ids, q_mask, d_mask)

    def take(self, rows: np.ndarray) -> "TokenizedPairs":
        return TokenizedPairs(self.query_ids[rows], self.doc_ids[rows], self.query_mask[rows], self.doc_mask[rows])


def _pad(sequences: Sequence[Sequence[int]], length: int):
    ids = np.full((len(sequences), length), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(sequences), length), dtype=bool)
    for row, seq in enumerate(sequences):
        seq = list(seq)[:length] or [UNK_ID]
        ids[row, :len(seq)] = seq
        mask[row, :len(seq)] = True
    return ids, mask


# ---------------------------------------------------------------------------
# Shared building blocks
# ---------------------------------------------------------------------------

def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _add_linear(params: ParameterSet, prefix: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
    params.add(f"{prefix}.weight", xavier_uniform(rng, (fan_in, fan_out), fan_in, fan_out))
    params.add(f"{prefix}.bias", np.zeros(fan_out))


def _linear(params: ParameterSet, prefix: str, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{prefix}.weight"]), params[f"{prefix}.bias"])


def embed(params: ParameterSet, ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """(B, L) ids -> (B, L, n) embeddings with padding rows set to exactly zero."""
    rows = ad.embedding(params["embedding"], ids, padding_idx=PAD_ID)
    return ad.masked_fill(rows, ~mask[..., None], 0.0)


def matching_histogram(cosine: np.ndarray, doc_mask: np.ndarray, bins: int,
                       query_mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Log-count matching histogram, computed outside the gradient path.

    Bin j of row i counts unmasked doc positions whose cosine lies in
    [-1 + 2j/b, -1 + 2(j+1)/b); the last bin is right-closed. Output is log(1+count).

    Args:
        cosine: (..., lq, ld) similarities, clamped to [-1, 1]
        doc_mask: (..., ld)
        bins: b >= 2
        query_mask: optional (..., lq); masked query rows give all-zero histograms
    """
    if bins < 2:
        raise ValueError(f"histogram needs at least 2 bins, got {bins}")
    cosine = np.asarray(cosine.values if isinstance(cosine, Tensor) else cosine, dtype=np.float64)
    doc_mask = np.asarray(doc_mask, dtype=bool)
    if cosine.shape[-1] != doc_mask.shape[-1]:
        raise ShapeError(f"doc mask length {doc_mask.shape[-1]} != cosine width {cosine.shape[-1]}")
    values = np.clip(cosine, -1.0, 1.0)
    index = np.minimum(np.floor((values + 1.0) * bins / 2.0).astype(np.int64), bins - 1)
    one_hot = (index[..., None] == np.arange(bins)) & doc_mask[..., None, :, None]
    counts = one_hot.sum(axis=-2).astype(np.float64)
    if query_mask is not None:
        counts = np.where(np.asarray(query_mask, dtype=bool)[..., None], counts, 0.0)
    return ad.stop_gradient(Tensor(np.log1p(counts)))


def kernel_pooling(interaction: Tensor, query_mask: np.ndarray, doc_mask: np.ndarray,
                   mu: Sequence[float], sigma: Sequence[float], use_log: bool = True) -> Tensor:
    """
    RBF kernel pooling of a (B, lq, ld) interaction matrix into (B, k) soft-match features.

    K_j(i) = sum_d m_d * exp(-(M[i, d] - mu_j)^2 / (2 sigma_j^2)), then optionally
    log(1 + .), then a masked sum over query positions.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if mu.shape != sigma.shape or mu.ndim != 1 or mu.size == 0:
        raise ShapeError("kernel mu and sigma must be equal-length non-empty vectors")
    if np.any(sigma <= 0):
        raise ValueError("kernel widths must be > 0")
    diff = ad.subtract(ad.expand_dims(interaction, -1), mu)  # (B, lq, ld, k)
    kernels = ad.exp(ad.multiply(ad.square(diff), -1.0 / (2.0 * sigma ** 2)))
    kernels = ad.multiply(kernels, np.asarray(doc_mask, dtype=np.float64)[:, None, :, None])
    per_term = ad.sum(kernels, axis=2)  # (B, lq, k)
    if use_log:
        per_term = ad.log1p(per_term)
    per_term = ad.multiply(per_term, np.asarray(query_mask, dtype=np.float64)[..., None])
    return ad.sum(per_term, axis=1)


def tfidf_match_matrix(pairs: TokenizedPairs, idf: np.ndarray) -> np.ndarray:
    """(B, lq*ld) exact-match matrix: tf(token in doc) * idf(token) where q[i] == d[j], both unmasked."""
    q, d = pairs.query_ids, pairs.doc_ids
    match = (q[:, :, None] == d[:, None, :]) & pairs.query_mask[:, :, None] & pairs.doc_mask[:, None, :]
    same_doc_token = (d[:, :, None] == d[:, None, :]) & pairs.doc_mask[:, None, :]
    tf = same_doc_token.sum(axis=2).astype(np.float64)  # occurrences of d[j] in its doc
    weights = tf * idf[d]
    local = np.where(match, weights[:, None, :], 0.0)
    return local.reshape(len(pairs), -1)


def inverse_document_frequency(documents: Iterable[Sequence[int]], vocab_size: int) -> np.ndarray:
    """idf = log(1 + N / (1 + df)) over the given token id documents."""
    df = np.zeros(vocab_size, dtype=np.float64)
    count = 0
    for doc in documents:
        count += 1
        tokens = np.unique(np.asarray(doc, dtype=np.int64))
        df[tokens[(tokens >= 0) & (tokens < vocab_size)]] += 1.0
    return np.log1p(count / (1.0 + df))


# ---------------------------------------------------------------------------
# Head registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Head:
    name: str
    init_params: Callable[[ParameterSet, RankerConfig, np.random.Generator], None]
    forward: Callable[[TokenizedPairs, ParameterSet, RankerConfig, np.ndarray], Tensor]


HEADS: Dict[str, Head] = {}


def register(name: str, init_params: Callable):
    def decorator(forward: Callable) -> Callable:
        HEADS[name] = Head(name, init_params, forward)
        return forward
    return decorator


def get_head(name: str) -> Head:
    try:
        return HEADS[name]
    except KeyError:
        raise UnknownHeadError(f"unknown ranker head {name!r}; known: {sorted(HEADS)}") from None


def _init_drmm(params: ParameterSet, config: RankerConfig, rng: np.random.Generator) -> None:
    _add_linear(params, "drmm.hidden", config.bins, config.drmm_hidden, rng)
    _add_linear(params, "drmm.out", config.drmm_hidden, 1, rng)
    _add_linear(params, "drmm.gate", config.embedding_dim, 1, rng)


@register("drmm", _init_drmm)
def _drmm(pairs: TokenizedPairs, params: ParameterSet, config: RankerConfig, idf: np.ndarray) -> Tensor:
    batch, q_len = pairs.query_ids.shape
    e_q = embed(params, pairs.query_ids, pairs.query_mask)
    e_d = embed(params, pairs.doc_ids, pairs.doc_mask)
    cosine = ad.cosine_matrix(ad.stop_gradient(e_q), ad.stop_gradient(e_d))
    histogram = matching_histogram(cosine, pairs.doc_mask, config.bins, pairs.query_mask)
    hidden = ad.tanh(_linear(params, "drmm.hidden", histogram))
    relevance = ad.reshape(ad.tanh(_linear(params, "drmm.out", hidden)), (batch, q_len))
    gate = ad.reshape(ad.tanh(_linear(params, "drmm.gate", e_q)), (batch, q_len))
    gated = ad.multiply(ad.multiply(relevance, gate), pairs.query_mask.astype(np.float64))
    return ad.sum(gated, axis=1)


def _init_knrm(params: ParameterSet, config: RankerConfig, rng: np.random.Generator) -> None:
    _add_linear(params, "knrm.out", config.kernels, 1, rng)


@register("knrm", _init_knrm)
def _knrm(pairs: TokenizedPairs, params: ParameterSet, config: RankerConfig, idf: np.ndarray) -> Tensor:
    e_q = ad.l2_normalize(embed(params, pairs.query_ids, pairs.query_mask))
    e_d = ad.l2_normalize(embed(params, pairs.doc_ids, pairs.doc_mask))
    interaction = ad.matmul(e_q, ad.transpose(e_d))
    pooled = kernel_pooling(interaction, pairs.query_mask, pairs.doc_mask,
                            config.kernel_mu, config.kernel_sigma, config.kernel_log)
    logits = _linear(params, "knrm.out", pooled)
    return ad.reshape(ad.sigmoid(logits), (len(pairs),))


def _init_duet(params: ParameterSet, config: RankerConfig, rng: np.random.Generator) -> None:
    n, c, w = config.embedding_dim, config.channels, config.window
    _add_linear(params, "duet.local", config.query_len * config.doc_len, n, rng)
    _add_linear(params, "duet.local_out", n, 1, rng)
    for side in ("query", "doc"):
        params.add(f"duet.conv_{side}.weight", xavier_uniform(rng, (w, n, c), w * n, w * c))
        params.add(f"duet.conv_{side}.bias", np.zeros(c))
    _add_linear(params, "duet.query_proj", c, n, rng)
    _add_linear(params, "duet.dist_out", c, 1, rng)


@register("duet", _init_duet)
def _duet(pairs: TokenizedPairs, params: ParameterSet, config: RankerConfig, idf: np.ndarray) -> Tensor:
    batch = len(pairs)
    # local model
    local = Tensor(tfidf_match_matrix(pairs, idf))
    local = ad.tanh(_linear(params, "duet.local", local))
    local_score = _linear(params, "duet.local_out", local)  # (B, 1)

    # distributed model
    e_q = embed(params, pairs.query_ids, pairs.query_mask)
    e_d = embed(params, pairs.doc_ids, pairs.doc_mask)
    h_q = ad.tanh(ad.conv1d(e_q, params["duet.conv_query.weight"], params["duet.conv_query.bias"]))
    h_q = ad.max(ad.masked_fill(h_q, ~pairs.query_mask[..., None], MASK_FILL), axis=1)  # (B, c)
    m_q = ad.tanh(_linear(params, "duet.query_proj", h_q))  # (B, n)

    h_d = ad.tanh(ad.conv1d(e_d, params["duet.conv_doc.weight"], params["duet.conv_doc.bias"]))
    h_d = ad.masked_fill(h_d, ~pairs.doc_mask[..., None], 0.0)  # (B, ld, c)
    doc_lengths = pairs.doc_mask.sum(axis=1).astype(np.float64)[:, None, None]
    m_d = ad.divide(ad.matmul(ad.transpose(e_d), h_d), doc_lengths)  # (B, n, c)

    joint = ad.reshape(ad.matmul(ad.expand_dims(m_q, 1), m_d), (batch, config.channels))
    distributed_score = _linear(params, "duet.dist_out", joint)
    return ad.reshape(ad.add(distributed_score, local_score), (batch,))


@register("pooled_dot", lambda params, config, rng: None)
def _pooled_dot(pairs: TokenizedPairs, params: ParameterSet, config: RankerConfig, idf: np.ndarray) -> Tensor:
    def pooled(ids, mask):
        total = ad.sum(embed(params, ids, mask), axis=1)
        return ad.divide(total, mask.sum(axis=1).astype(np.float64)[:, None])

    b_q = pooled(pairs.query_ids, pairs.query_mask)
    b_d = pooled(pairs.doc_ids, pairs.doc_mask)
    return ad.sum(ad.multiply(b_q, b_d), axis=1)


@register("maxsim", lambda params, config, rng: None)
def _maxsim(pairs: TokenizedPairs, params: ParameterSet, config: RankerConfig, idf: np.ndarray) -> Tensor:
    e_q = ad.l2_normalize(embed(params, pairs.query_ids, pairs.query_mask))
    e_d = ad.l2_normalize(embed(params, pairs.doc_ids, pairs.doc_mask))
    interaction = ad.masked_fill(ad.matmul(e_q, ad.transpose(e_d)), ~pairs.doc_mask[:, None, :], MASK_FILL)
    best = ad.masked_fill(ad.max(interaction, axis=2), ~pairs.query_mask, 0.0)
    return ad.sum(best, axis=1)


def score_batch(pairs: TokenizedPairs, params: ParameterSet, config: RankerConfig,
                idf: Optional[np.ndarray] = None) -> Tensor:
    """One finite relevance score per pair, shape (B,), differentiable w.r.t. params."""
    head = get_head(config.head)
    if pairs.query_ids.shape[1] != config.query_len or pairs.doc_ids.shape[1] != config.doc_len:
        raise ShapeError(
            f"pair lengths {pairs.query_ids.shape[1]}/{pairs.doc_ids.shape[1]} "
            f"!= configured {config.query_len}/{config.doc_len}"
        )
    if idf is None:
        idf = np.ones(params["embedding"].shape[0])
    return head.forward(pairs, params, config, idf)


def margin_ranking_loss(pos: Tensor, neg: Tensor, margin: float = 1.0, y: float = 1.0) -> Tensor:
    """mean over the batch of max(0, -y * (pos - neg) + margin)."""
    if pos.shape != neg.shape:
        raise ShapeError(f"score vectors differ in shape: {pos.shape} vs {neg.shape}")
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    hinge = ad.maximum_zero(ad.add(ad.multiply(ad.subtract(pos, neg), -y), margin))
    return ad.mean(hinge)


# ---------------------------------------------------------------------------
# Ranker
# ---------------------------------------------------------------------------

class Ranker:
    """A configured head with its trainable parameters."""

    def __init__(self, config: RankerConfig, params: ParameterSet):
        self.config = config
        self.params = params
        self.idf = np.ones(params["embedding"].shape[0])

    @property
    def head(self) -> str:
        return self.config.head

    @property
    def vocab_size(self) -> int:
        return int(self.params["embedding"].shape[0])

    def prepare_task(self, documents: Iterable[Sequence[int]]) -> None:
        """Refresh corpus statistics from the current task's training documents."""
        self.idf = inverse_document_frequency(documents, self.vocab_size)

    def score(self, pairs: TokenizedPairs) -> Tensor:
        return score_batch(pairs, self.params, self.config, self.idf)

    def predict(self, pairs: TokenizedPairs) -> np.ndarray:
        """Plain score values; call outside an active record for read-only evaluation."""
        return self.score(pairs).values.copy()

    def pair_loss(self, batch: "TripleBatch") -> Tensor:
        """Unregularized margin loss of a (query, pos, neg) batch."""
        return margin_ranking_loss(self.score(batch.positive), self.score(batch.negative), self.config.margin)

    def score_gap(self, batch: "TripleBatch") -> Tensor:
        return ad.subtract(self.score(batch.positive), self.score(batch.negative))


@dataclass(frozen=True)
class TripleBatch:
    """<q, pos, neg> triples as two aligned pair batches."""

    positive: TokenizedPairs
    negative: TokenizedPairs

    def __len__(self) -> int:
        return len(self.positive)


class TripleEncoder:
    """Maps sampled triples to TripleBatch objects at a ranker's fixed query/doc lengths."""

    def __init__(self, vocab: Vocabulary, config: RankerConfig):
        self.vocab = vocab
        self.query_len = config.query_len
        self.doc_len = config.doc_len

    def pairs(self, queries: Sequence[str], docs: Sequence[str]) -> TokenizedPairs:
        return TokenizedPairs.from_sequences(
            [self.vocab.encode(q) for q in queries],
            [self.vocab.encode(d) for d in docs],
            self.query_len,
            self.doc_len,
        )

    def __call__(self, triples: Sequence[Triple]) -> TripleBatch:
        if not triples:
            raise ValueError("cannot encode an empty triple batch")
        queries = [t.query_text for t in triples]
        return TripleBatch(
            self.pairs(queries, [t.pos_text for t in triples]),
            self.pairs(queries, [t.neg_text for t in triples]),
        )

    def documents(self, texts: Iterable[str]) -> List[List[int]]:
        return [self.vocab.encode(text) for text in texts]


def build_ranker(config: RankerConfig, vocab_size: int, embeddings: Optional[np.ndarray] = None,
                 seed: int = 0) -> Ranker:
    """Create a ranker; weights are xavier-uniform from `seed`, biases 0, embedding table from `embeddings`."""
    head = get_head(config.head)
    rng = np.random.default_rng(seed)
    if embeddings is None:
        table = rng.uniform(-0.25, 0.25, size=(vocab_size, config.embedding_dim))
    else:
        table = np.array(embeddings, dtype=np.float64)
        if table.shape != (vocab_size, config.embedding_dim):
            raise ShapeError(f"embedding matrix {table.shape} != ({vocab_size}, {config.embedding_dim})")
    table[PAD_ID] = 0.0
    params = ParameterSet()
    params.add("embedding", table)
    head.init_params(params, config, rng)
    logger.debug("built %s ranker with %d parameters", config.head, params.size)
    return Ranker(config, params)
