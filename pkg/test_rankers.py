"""Tests for the ranking heads, their pooling blocks and the margin loss."""

import math

import numpy as np
import pytest

import autodiff as ad
import rankers
from autodiff import Tensor
from config import RankerConfig
from rankers import TokenizedPairs, TripleBatch

VOCAB = 12
ALL_HEADS = ["drmm", "knrm", "duet", "pooled_dot", "maxsim"]


def small_config(head: str, **overrides) -> RankerConfig:
    values = dict(head=head, embedding_dim=4, query_len=3, doc_len=5, bins=5, channels=3, window=3)
    values.update(overrides)
    return RankerConfig(**values)


def toy_pairs(config: RankerConfig) -> TokenizedPairs:
    # query and doc vocabularies are disjoint so no exact-match kernel sits on its peak
    return TokenizedPairs.from_sequences(
        [[2, 3], [4, 2, 5]],
        [[6, 7, 8, 9], [10, 11, 6]],
        config.query_len,
        config.doc_len,
    )


# ---------------------------------------------------------------------------
# Matching histogram
# ---------------------------------------------------------------------------

def test_histogram_hand_binning():
    hist = rankers.matching_histogram(np.array([[-1.0, -0.2, 0.3, 1.0]]), np.ones(4, dtype=bool), 5)
    np.testing.assert_allclose(np.expm1(hist.values), [[1, 0, 1, 1, 1]])


def test_histogram_fully_masked_row_is_zero():
    hist = rankers.matching_histogram(np.array([[0.5, -0.5]]), np.zeros(2, dtype=bool), 4)
    np.testing.assert_array_equal(hist.values, np.zeros((1, 4)))


def test_histogram_exact_one_goes_to_last_bin():
    hist = rankers.matching_histogram(np.array([[1.0]]), np.ones(1, dtype=bool), 3)
    np.testing.assert_allclose(hist.values, [[0.0, 0.0, math.log(2.0)]])


def test_histogram_needs_two_bins():
    with pytest.raises(ValueError):
        rankers.matching_histogram(np.zeros((1, 1)), np.ones(1, dtype=bool), 1)


# ---------------------------------------------------------------------------
# Kernel pooling
# ---------------------------------------------------------------------------

def test_kernel_exact_match_value():
    pooled = rankers.kernel_pooling(Tensor(np.ones((1, 1, 1))), np.ones((1, 1), bool), np.ones((1, 1), bool),
                                    [1.0], [1e-3], use_log=False)
    assert pooled.values[0, 0] == pytest.approx(1.0)


def test_kernel_far_from_center():
    pooled = rankers.kernel_pooling(Tensor(np.zeros((1, 1, 1))), np.ones((1, 1), bool), np.ones((1, 1), bool),
                                    [1.0], [0.1], use_log=False)
    assert pooled.values[0, 0] == pytest.approx(1.93e-22, rel=1e-2)
    assert pooled.values[0, 0] == pytest.approx(math.exp(-50.0))


def test_kernel_all_doc_masked_gives_zero():
    pooled = rankers.kernel_pooling(Tensor(np.full((1, 2, 3), 0.4)), np.ones((1, 2), bool), np.zeros((1, 3), bool),
                                    [1.0, 0.5], [1e-3, 0.1])
    np.testing.assert_array_equal(pooled.values, np.zeros((1, 2)))


def test_kernel_rejects_zero_width():
    with pytest.raises(ValueError):
        rankers.kernel_pooling(Tensor(np.zeros((1, 1, 1))), np.ones((1, 1), bool), np.ones((1, 1), bool), [1.0], [0.0])


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------

def test_knrm_zero_head_scores_one_half():
    config = small_config("knrm")
    ranker = rankers.build_ranker(config, VOCAB, seed=0)
    ranker.params.assign({"knrm.out.weight": np.zeros((11, 1)), "knrm.out.bias": np.zeros(1)})
    np.testing.assert_allclose(ranker.predict(toy_pairs(config)), [0.5, 0.5])


def test_maxsim_identical_sequences_score_query_length():
    config = small_config("maxsim")
    ranker = rankers.build_ranker(config, VOCAB, seed=1)
    pairs = TokenizedPairs.from_sequences([[2, 3, 4], [5, 6]], [[2, 3, 4], [5, 6]], 3, 5)
    np.testing.assert_allclose(ranker.predict(pairs), [3.0, 2.0], rtol=1e-12)


@pytest.mark.parametrize("head", ["drmm", "knrm", "pooled_dot", "maxsim"])
def test_scores_invariant_to_doc_permutation(head):
    config = small_config(head)
    ranker = rankers.build_ranker(config, VOCAB, seed=3)
    original = TokenizedPairs.from_sequences([[2, 3, 4]], [[6, 7, 8, 9, 10]], 3, 5)
    shuffled = TokenizedPairs.from_sequences([[2, 3, 4]], [[9, 6, 10, 8, 7]], 3, 5)
    np.testing.assert_allclose(ranker.predict(original), ranker.predict(shuffled), rtol=1e-12)


def test_duet_depends_on_doc_order():
    config = small_config("duet")
    ranker = rankers.build_ranker(config, VOCAB, seed=3)
    ranker.prepare_task([[2, 6, 7], [8, 9]])
    original = TokenizedPairs.from_sequences([[2, 3, 4]], [[2, 7, 8, 9, 10]], 3, 5)
    shuffled = TokenizedPairs.from_sequences([[2, 3, 4]], [[9, 10, 8, 7, 2]], 3, 5)
    assert ranker.predict(original)[0] != ranker.predict(shuffled)[0]


@pytest.mark.parametrize("head", ALL_HEADS)
def test_tokens_under_mask_never_change_scores(head):
    config = small_config(head)
    ranker = rankers.build_ranker(config, VOCAB, seed=5)
    clean = toy_pairs(config)
    garbage_q = np.where(clean.query_mask, clean.query_ids, 11)
    garbage_d = np.where(clean.doc_mask, clean.doc_ids, 7)
    noisy = TokenizedPairs(garbage_q, garbage_d, clean.query_mask, clean.doc_mask)
    np.testing.assert_array_equal(ranker.predict(clean), ranker.predict(noisy))


@pytest.mark.parametrize("head", ["drmm", "knrm", "pooled_dot", "maxsim"])
def test_extra_padding_leaves_scores_unchanged(head):
    config = small_config(head)
    longer = small_config(head, query_len=5, doc_len=9)
    ranker = rankers.build_ranker(config, VOCAB, seed=6)
    queries, docs = [[2, 3], [4, 2, 5]], [[6, 7, 8, 9], [10, 11, 6]]
    short = rankers.score_batch(TokenizedPairs.from_sequences(queries, docs, 3, 5), ranker.params, config)
    padded = rankers.score_batch(TokenizedPairs.from_sequences(queries, docs, 5, 9), ranker.params, longer)
    np.testing.assert_allclose(short.values, padded.values, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("head", ALL_HEADS)
@pytest.mark.parametrize("seed", range(5))
def test_margin_loss_gradients_match_finite_differences(head, seed):
    config = small_config(head)
    ranker = rankers.build_ranker(config, VOCAB, seed=seed)
    ranker.prepare_task([[6, 7, 2], [8, 9, 10]])
    positive = toy_pairs(config)
    negative = TokenizedPairs.from_sequences([[2, 3], [4, 2, 5]], [[11, 10], [9, 8, 7, 6]], 3, 5)
    batch = TripleBatch(positive, negative)

    def loss(params):
        return rankers.margin_ranking_loss(
            rankers.score_batch(batch.positive, params, config, ranker.idf),
            rankers.score_batch(batch.negative, params, config, ranker.idf),
            margin=2.0,
        )

    assert ad.grad_check(loss, ranker.params, 1e-6) < 1e-4


def test_drmm_histogram_path_gives_no_embedding_gradient():
    config = small_config("drmm")
    ranker = rankers.build_ranker(config, VOCAB, seed=2)
    pairs = TokenizedPairs.from_sequences([[2, 3]], [[4, 5, 6]], 3, 5)
    with ad.recording() as record:
        grads = record.backward(ad.sum(ranker.score(pairs)), ranker.params)
    table_grad = grads["embedding"].values
    np.testing.assert_array_equal(table_grad[[4, 5, 6]], 0.0)
    assert np.abs(table_grad[[2, 3]]).sum() > 0
    for name in ("drmm.gate.weight", "drmm.hidden.weight", "drmm.out.weight"):
        assert np.abs(grads[name].values).sum() > 0


def test_unknown_head_rejected():
    with pytest.raises(rankers.UnknownHeadError):
        rankers.get_head("bm25")
    bogus = RankerConfig.model_construct(head="bm25")
    with pytest.raises(rankers.UnknownHeadError):
        rankers.build_ranker(bogus, VOCAB)


def test_pair_length_must_match_config():
    config = small_config("knrm")
    ranker = rankers.build_ranker(config, VOCAB)
    with pytest.raises(ad.ShapeError):
        ranker.score(TokenizedPairs.from_sequences([[2]], [[3]], 4, 5))


def test_tokenized_pairs_validation():
    pairs = TokenizedPairs.from_sequences([[]], [[5, 6, 7, 8, 9, 10]], 2, 4)
    assert pairs.query_ids.tolist() == [[1, 0]]
    assert pairs.doc_mask.tolist() == [[True, True, True, True]]
    with pytest.raises(ad.ShapeError):
        TokenizedPairs(np.zeros((1, 2), np.int64), np.ones((1, 2), np.int64),
                       np.zeros((1, 2), bool), np.ones((1, 2), bool))


def test_inverse_document_frequency():
    idf = rankers.inverse_document_frequency([[2, 3, 3], [2]], 5)
    assert idf[2] == pytest.approx(math.log(1 + 2 / 3))
    assert idf[3] == pytest.approx(math.log(2.0))
    assert idf[4] == pytest.approx(math.log(3.0))


def test_tfidf_match_matrix_entries():
    pairs = TokenizedPairs.from_sequences([[2, 3]], [[3, 3, 4]], 2, 3)
    idf = np.arange(5, dtype=float)
    local = rankers.tfidf_match_matrix(pairs, idf).reshape(2, 3)
    # token 3 appears twice in the doc: tf 2 * idf 3
    np.testing.assert_array_equal(local, [[0, 0, 0], [6, 6, 0]])


def test_build_ranker_is_seeded_and_zeroes_padding_row():
    config = small_config("duet")
    a = rankers.build_ranker(config, VOCAB, seed=9)
    b = rankers.build_ranker(config, VOCAB, seed=9)
    np.testing.assert_array_equal(a.params.flatten(), b.params.flatten())
    np.testing.assert_array_equal(a.params["embedding"].values[0], np.zeros(4))
    assert np.all(a.params["duet.local.bias"].values == 0.0)


@pytest.mark.parametrize("pos, neg, expected", [(2.0, 0.5, 0.0), (1.0, 1.0, 1.0), (0.0, 0.5, 1.5)])
def test_margin_ranking_loss_hand_values(pos, neg, expected):
    loss = rankers.margin_ranking_loss(Tensor([pos]), Tensor([neg]), margin=1.0, y=1.0)
    assert loss.item() == pytest.approx(expected)


def test_margin_ranking_loss_length_mismatch():
    with pytest.raises(ad.ShapeError):
        rankers.margin_ranking_loss(Tensor([1.0, 2.0]), Tensor([1.0]))
