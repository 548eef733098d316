"""Dense vector storage, dot-product scoring and exact top-k extraction.

Every search structure in the package scores through this module so that
similarity evaluations are counted in one place.

Note: This code was generated with assistance from AI coding tools
and has been reviewed and tested by a human.
"""

from collections.abc import Sequence
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
import numpy.typing as npt

from toploc_search.errors import InvalidInputError

FloatArray = npt.NDArray[np.float32]
IndexArray = npt.NDArray[np.int64]
ScoreArray = npt.NDArray[np.float64]
Vector = FloatArray


@dataclass(frozen=True)
class ScoredHit:
    """A document id with its similarity to the query."""

    id: str
    score: float


@dataclass
class WorkCounter:
    """Similarity evaluations performed by one search call.

    ``centroid_evaluations`` is the share of ``similarity_evaluations`` spent
    scoring IVF centroids.
    """

    similarity_evaluations: int = 0
    centroid_evaluations: int = 0

    def add(self, count: int, *, centroids: bool = False) -> None:
        self.similarity_evaluations += count
        if centroids:
            self.centroid_evaluations += count

    def snapshot(self) -> "WorkCounter":
        return replace(self)


@dataclass(frozen=True, eq=False)
class VectorStore:
    """Immutable n x d float32 matrix with one unique string id per row."""

    data: FloatArray
    ids: tuple[str, ...]

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2 or data.shape[1] < 1:
            raise InvalidInputError(f"Expected an n x d matrix with d >= 1, got {data.shape}")
        if len(self.ids) != data.shape[0]:
            raise InvalidInputError(f"{len(self.ids)} ids given for {data.shape[0]} rows")
        if not np.isfinite(data).all():
            bad = int(np.flatnonzero(~np.isfinite(data).all(axis=1))[0])
            raise InvalidInputError(f"Non-finite component in vector {self.ids[bad]!r}")
        if len(set(self.ids)) != len(self.ids):
            raise InvalidInputError("Document ids must be unique")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    @property
    def count(self) -> int:
        return int(self.data.shape[0])

    def __len__(self) -> int:
        return self.count

    @cached_property
    def data64(self) -> ScoreArray:
        """Float64 copy of the rows for graph search and k-means."""
        return self.data.astype(np.float64)

    @cached_property
    def id_rank(self) -> IndexArray:
        """Position of each row's id in ascending id order (the tie-break key)."""
        order = np.argsort(np.array(self.ids, dtype=object), kind="stable")
        rank = np.empty(self.count, dtype=np.int64)
        rank[order] = np.arange(self.count, dtype=np.int64)
        return rank

    @cached_property
    def _rows_by_id(self) -> dict[str, int]:
        return {doc_id: row for row, doc_id in enumerate(self.ids)}

    def row_of(self, doc_id: str) -> int:
        try:
            return self._rows_by_id[doc_id]
        except KeyError:
            raise InvalidInputError(f"Unknown document id: {doc_id!r}") from None

    def vector(self, doc_id: str) -> Vector:
        return self.data[self.row_of(doc_id)]


def as_vector(values: Sequence[float] | npt.ArrayLike, dim: int | None = None) -> Vector:
    """Convert ``values`` to a finite float32 vector, optionally checking its length."""
    vector = np.ascontiguousarray(values, dtype=np.float32)
    if vector.ndim != 1:
        raise InvalidInputError(f"Expected a 1-d vector, got shape {vector.shape}")
    if dim is not None and vector.shape[0] != dim:
        raise InvalidInputError(f"Dimension mismatch: expected {dim}, got {vector.shape[0]}")
    if not np.isfinite(vector).all():
        raise InvalidInputError("Vector has non-finite components")
    return vector


def similarity(q: Vector, x: Vector, counter: WorkCounter | None = None) -> float:
    """Dot product of two vectors of equal dimensionality."""
    if q.shape != x.shape:
        raise InvalidInputError(f"Dimension mismatch: {q.shape[0]} vs {x.shape[0]}")
    if counter is not None:
        counter.add(1)
    return float(np.dot(q.astype(np.float64), x.astype(np.float64)))


def select_top(
    scores: ScoreArray,
    k: int,
    tiebreak: IndexArray | None = None,
) -> IndexArray:
    """Positions of the ``k`` best scores, descending, ties by ascending ``tiebreak``.

    Without ``tiebreak`` ties fall back to ascending position. Entries tied
    with the k-th score are pulled back in after the partition step, so the
    order is total and a smaller ``k`` always yields a prefix of a larger one.

    Args:
        scores: One score per position
        k: Number of positions to return
        tiebreak: Optional key per position; only read when scores tie

    Returns:
        At most ``k`` positions into ``scores``, best first
    """
    n = int(scores.shape[0])
    if n == 0 or k < 1:
        return np.empty(0, dtype=np.int64)
    if k < n:
        candidates: IndexArray = np.argpartition(-scores, k - 1)[:k].astype(np.int64, copy=False)
        kth = scores[candidates].min()
        if np.count_nonzero(scores >= kth) > k:
            candidates = np.flatnonzero(scores >= kth).astype(np.int64, copy=False)
    else:
        candidates = np.arange(n, dtype=np.int64)
    values = scores[candidates]
    order = np.argsort(-values, kind="stable")
    ranked_values = values[order]
    if np.any(ranked_values[1:] == ranked_values[:-1]):
        keys = candidates if tiebreak is None else tiebreak[candidates]
        order = np.lexsort((keys, -values))
    return candidates[order[:k]]


def score_rows(
    store: VectorStore,
    q: Vector,
    rows: IndexArray | None = None,
    counter: WorkCounter | None = None,
) -> ScoreArray:
    """Dot products of ``q`` with the given rows (all rows when ``rows`` is None).

    Accumulates in float32 and widens the result to float64.
    """
    if q.shape[0] != store.dim:
        raise InvalidInputError(f"Dimension mismatch: expected {store.dim}, got {q.shape[0]}")
    matrix = store.data if rows is None else store.data.take(rows, axis=0)
    scores: ScoreArray = (matrix @ q.astype(np.float32, copy=False)).astype(np.float64)
    if counter is not None:
        counter.add(int(matrix.shape[0]))
    return scores


def score_rows_batch(
    store: VectorStore,
    queries: FloatArray,
    counters: Sequence[WorkCounter] | None = None,
) -> ScoreArray:
    """Scores of a b x d query matrix against every row, as a b x n matrix.

    One matrix product serves the whole batch; each query's counter is
    charged n evaluations.

    Args:
        store: Rows to score
        queries: One query per row
        counters: Optional counter per query

    Returns:
        Float64 scores, row i holding query i's scores
    """
    if queries.ndim != 2 or queries.shape[1] != store.dim:
        raise InvalidInputError(
            f"Expected a b x {store.dim} query matrix, got shape {queries.shape}"
        )
    scores: ScoreArray = (queries.astype(np.float32, copy=False) @ store.data.T).astype(
        np.float64
    )
    for counter in counters or ():
        counter.add(store.count)
    return scores


def hits_from_scores(
    store: VectorStore,
    scores: ScoreArray,
    k: int,
    rows: IndexArray | None = None,
) -> list[ScoredHit]:
    """Top-k hits for scores over ``rows`` of ``store`` (every row when None)."""
    keys = store.id_rank if rows is None else store.id_rank[rows]
    best = select_top(scores, k, keys)
    chosen = best if rows is None else rows[best]
    ids = store.ids
    return [
        ScoredHit(ids[row], score)
        for row, score in zip(chosen.tolist(), scores[best].tolist(), strict=True)
    ]


def top_k(
    q: Vector,
    store: VectorStore,
    k: int,
    rows: IndexArray | None = None,
    counter: WorkCounter | None = None,
) -> list[ScoredHit]:
    """Exact top-k of ``q`` over ``rows`` of ``store`` (the whole store by default).

    Scores every row exactly once. An empty subset yields an empty result.

    Args:
        q: Query vector
        store: Vectors to search
        k: Number of hits
        rows: Optional subset of store rows
        counter: Optional work counter, charged one evaluation per scored row

    Returns:
        Up to ``k`` hits ordered by descending score, then ascending id

    Raises:
        InvalidInputError: If k < 1 or the query dimension is wrong
    """
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    if rows is not None and rows.shape[0] == 0:
        return []
    scores = score_rows(store, q, rows, counter)
    return hits_from_scores(store, scores, k, rows)


def exact_search(
    store: VectorStore, q: Vector, k: int, counter: WorkCounter | None = None
) -> list[ScoredHit]:
    """Exhaustive search over the whole store."""
    return top_k(q, store, k, counter=counter)


def exact_search_batch(
    store: VectorStore,
    queries: FloatArray,
    k: int,
    counters: Sequence[WorkCounter] | None = None,
) -> list[list[ScoredHit]]:
    """Exhaustive search for a batch of queries through one matrix product."""
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    scores = score_rows_batch(store, queries, counters)
    return [hits_from_scores(store, row_scores, k) for row_scores in scores]


def normalize_l2(store: VectorStore) -> VectorStore:
    """Scale every row to unit Euclidean norm, keeping ids and row order."""
    data = store.data.astype(np.float64)
    norms = np.linalg.norm(data, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise InvalidInputError(f"Cannot normalize zero-norm vector {store.ids[int(zero[0])]!r}")
    return VectorStore((data / norms[:, None]).astype(np.float32), store.ids)
