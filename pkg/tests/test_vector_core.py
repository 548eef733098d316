"""Tests for toploc_search.vector_core module.

Note: This code was generated with assistance from AI coding tools
and has been reviewed and tested by a human.
"""

import numpy as np
import pytest

from tests.conftest import quadratic_top_ids, random_store
from toploc_search.errors import InvalidInputError
from toploc_search.vector_core import (
    VectorStore,
    WorkCounter,
    as_vector,
    exact_search,
    exact_search_batch,
    normalize_l2,
    score_rows,
    select_top,
    similarity,
    top_k,
)


def test_similarity_values() -> None:
    """Test dot products on hand-computed examples."""
    assert similarity(as_vector([1, 0, 0]), as_vector([0, 1, 0])) == 0.0
    assert similarity(as_vector([3, 4]), as_vector([3, 4])) == 25.0
    value = similarity(as_vector([0.2, 0.5, -0.1]), as_vector([1.0, -2.0, 3.0]))
    assert value == pytest.approx(-1.1, rel=1e-5)


def test_similarity_is_symmetric_and_counted() -> None:
    """Test symmetry and that each call counts one evaluation."""
    rng = np.random.default_rng(1)
    a, b = as_vector(rng.standard_normal(32)), as_vector(rng.standard_normal(32))
    counter = WorkCounter()
    assert similarity(a, b, counter) == similarity(b, a, counter)
    assert counter.similarity_evaluations == 2


def test_similarity_matches_sequential_float32_reference() -> None:
    """Test the vectorized dot product against index-order float32 accumulation."""
    rng = np.random.default_rng(2)
    a, b = as_vector(rng.standard_normal(64)), as_vector(rng.standard_normal(64))
    total = np.float32(0.0)
    for x, y in zip(a, b, strict=True):
        total = np.float32(total + x * y)
    assert similarity(a, b) == pytest.approx(float(total), rel=1e-5, abs=1e-6)


def test_similarity_dimension_mismatch() -> None:
    """Test that vectors of different lengths are rejected."""
    with pytest.raises(InvalidInputError):
        similarity(as_vector([1, 2]), as_vector([1, 2, 3]))


def test_store_rejects_bad_input() -> None:
    """Test duplicate ids, id count and non-finite rows."""
    with pytest.raises(InvalidInputError):
        VectorStore(np.zeros((2, 3)), ("a", "a"))
    with pytest.raises(InvalidInputError):
        VectorStore(np.zeros((2, 3)), ("a",))
    with pytest.raises(InvalidInputError, match="b"):
        VectorStore(np.array([[1.0, 2.0], [np.nan, 0.0]]), ("a", "b"))


def test_store_is_read_only() -> None:
    """Test that the store's matrix cannot be modified in place."""
    store = random_store(5, 4)
    with pytest.raises(ValueError):
        store.data[0, 0] = 1.0


def test_top_k_matches_quadratic_oracle() -> None:
    """Test top-10 of 100 random 16-dim vectors against a quadratic scan."""
    store = random_store(100, 16, seed=3, normalize=False)
    rng = np.random.default_rng(4)
    for _ in range(20):
        q = as_vector(rng.standard_normal(16))
        hits = top_k(q, store, 10)
        assert [h.id for h in hits] == quadratic_top_ids(store.data, store.ids, q, 10)


def test_top_k_self_retrieval() -> None:
    """Test that a normalized stored vector retrieves itself first."""
    store = random_store(50, 8, seed=5)
    for doc_id in ("v00000", "v00017", "v00049"):
        assert top_k(store.vector(doc_id), store, 1)[0].id == doc_id


def test_top_k_exhaustive_and_counted() -> None:
    """Test k >= n returns every row sorted, counting n evaluations."""
    store = random_store(30, 6, seed=6)
    counter = WorkCounter()
    hits = top_k(store.vector("v00003"), store, 100, counter=counter)
    assert len(hits) == 30
    scores = [h.score for h in hits]
    assert scores == sorted(scores, reverse=True)
    assert counter.similarity_evaluations == 30


def test_top_k_prefix_property() -> None:
    """Test that a smaller k yields a prefix of a larger k."""
    store = random_store(200, 8, seed=7)
    q = as_vector(np.random.default_rng(8).standard_normal(8))
    ids = [h.id for h in top_k(q, store, 50)]
    for k in (1, 5, 20):
        assert [h.id for h in top_k(q, store, k)] == ids[:k]


def test_top_k_ties_break_by_ascending_id() -> None:
    """Test that equal scores are ordered by id, not row position."""
    data = np.array([[1.0, 0.0], [1.0, 0.0], [0.5, 0.0], [1.0, 0.0]])
    store = VectorStore(data, ("c", "a", "z", "b"))
    hits = top_k(as_vector([1.0, 0.0]), store, 3)
    assert [h.id for h in hits] == ["a", "b", "c"]


def test_top_k_subset_and_empty_subset() -> None:
    """Test scoring a row subset, and that an empty subset is not an error."""
    store = random_store(40, 4, seed=9)
    q = store.vector("v00010")
    counter = WorkCounter()
    rows = np.array([3, 10, 20], dtype=np.int64)
    hits = top_k(q, store, 10, rows=rows, counter=counter)
    assert {h.id for h in hits} == {"v00003", "v00010", "v00020"}
    assert hits[0].id == "v00010"
    assert counter.similarity_evaluations == 3
    assert top_k(q, store, 10, rows=np.empty(0, dtype=np.int64)) == []


def test_top_k_rejects_bad_k_and_dimension() -> None:
    """Test k < 1 and dimension mismatch errors."""
    store = random_store(10, 4)
    with pytest.raises(InvalidInputError):
        top_k(as_vector([1, 0, 0, 0]), store, 0)
    with pytest.raises(InvalidInputError):
        exact_search(store, as_vector([1, 0, 0]), 3)


def test_select_top_keeps_all_ties_at_cutoff() -> None:
    """Test that ties at the k-th score resolve by tiebreak key, not partition luck."""
    scores = np.array([0.5, 0.9, 0.5, 0.5, 0.1])
    assert select_top(scores, 2).tolist() == [1, 0]
    tiebreak = np.array([4, 0, 3, 1, 2], dtype=np.int64)
    assert select_top(scores, 2, tiebreak).tolist() == [1, 3]


def test_select_top_whole_tie_block() -> None:
    """Test a cutoff inside a block of equal scores, with and without keys."""
    scores = np.full(50, 0.25)
    scores[7] = 0.75
    assert select_top(scores, 5).tolist() == [7, 0, 1, 2, 3]
    reverse = np.arange(50, 0, -1, dtype=np.int64)
    assert select_top(scores, 5, reverse).tolist() == [7, 49, 48, 47, 46]
    assert select_top(scores, 0).tolist() == []


def test_select_top_reads_tiebreak_only_on_ties() -> None:
    """Test that distinct scores never consult the tiebreak keys."""
    scores = np.array([0.3, 0.8, 0.1, 0.6, 0.7])
    unused = np.empty(0, dtype=np.int64)
    assert select_top(scores, 3, unused).tolist() == [1, 4, 3]
    assert select_top(scores, 10, unused).tolist() == [1, 4, 3, 0, 2]


def test_score_rows_within_float32_tolerance() -> None:
    """Test float32 accumulation against float64 within 1e-5 of the summed magnitudes."""
    store = random_store(300, 128, seed=12, normalize=False)
    q = as_vector(np.random.default_rng(13).standard_normal(128))
    rows = np.arange(0, 300, 3, dtype=np.int64)
    reference = store.data64[rows] @ q.astype(np.float64)
    magnitude = np.abs(store.data64[rows]) @ np.abs(q.astype(np.float64))
    scores = score_rows(store, q, rows)
    assert scores.dtype == np.float64
    assert np.all(np.abs(scores - reference) <= 1e-5 * magnitude)


def test_exact_search_batch_matches_single_queries() -> None:
    """Test that one matrix product per batch gives each query's exact top-k."""
    store = random_store(500, 16, seed=14)
    queries = np.random.default_rng(15).standard_normal((6, 16)).astype(np.float32)
    counters = [WorkCounter() for _ in range(6)]
    batched = exact_search_batch(store, queries, 10, counters)
    for q, hits, counter in zip(queries, batched, counters, strict=True):
        single = exact_search(store, q, 10)
        assert [h.id for h in hits] == [h.id for h in single]
        np.testing.assert_allclose([h.score for h in hits], [h.score for h in single],
                                   rtol=1e-5, atol=1e-6)
        assert counter.similarity_evaluations == 500
    with pytest.raises(InvalidInputError):
        exact_search_batch(store, queries[:, :8], 10)


def test_normalize_l2() -> None:
    """Test the 3-4-5 row, idempotence and norms of a random store."""
    store = VectorStore(np.array([[3.0, 4.0], [1.0, 0.0]]), ("a", "b"))
    normalized = normalize_l2(store)
    np.testing.assert_allclose(normalized.vector("a"), [0.6, 0.8], atol=1e-7)
    np.testing.assert_allclose(normalized.vector("b"), [1.0, 0.0], atol=1e-7)
    assert normalized.ids == store.ids

    big = normalize_l2(random_store(50, 32, seed=10, normalize=False))
    norms = np.linalg.norm(big.data.astype(np.float64), axis=1)
    assert np.all(np.abs(norms - 1.0) <= 1e-6)
    for i in range(0, 50, 7):
        for j in range(0, 50, 11):
            assert abs(similarity(big.data[i], big.data[j])) <= 1 + 1e-6


def test_normalize_l2_zero_row_names_id() -> None:
    """Test that a zero-norm row is reported by id."""
    store = VectorStore(np.array([[1.0, 1.0], [0.0, 0.0]]), ("ok", "empty"))
    with pytest.raises(InvalidInputError, match="empty"):
        normalize_l2(store)
