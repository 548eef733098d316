"""Inverted File (IVF) index: probe the top-np centroids, scan their lists.

Index file layout (little-endian): b"TLIVF1", d u64, n u64, p u64,
centroids p*d float32, list lengths p*u64, concatenated store rows u64.

Note: This code was generated with assistance from AI coding tools
and has been reviewed and tested by a human.
"""

import struct
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from toploc_search.clustering import (
    DEFAULT_MAX_ITERS,
    CentroidSet,
    PostingLists,
    assign_lists,
    train_kmeans,
)
from toploc_search.errors import InvalidInputError, ParseError
from toploc_search.io_formats import BinaryReader, atomic_write
from toploc_search.logging_config import get_logger
from toploc_search.vector_core import (
    FloatArray,
    IndexArray,
    ScoreArray,
    ScoredHit,
    Vector,
    VectorStore,
    WorkCounter,
    select_top,
    top_k,
)

logger = get_logger(__name__)

IVF_MAGIC = b"TLIVF1"


@dataclass(frozen=True, eq=False)
class IvfIndex:
    """Centroids plus posting lists over a backing store. Immutable after build."""

    centroids: CentroidSet
    lists: PostingLists
    store: VectorStore

    def __post_init__(self) -> None:
        if len(self.lists) != self.centroids.p:
            raise InvalidInputError(
                f"{len(self.lists)} posting lists for {self.centroids.p} centroids"
            )
        if self.centroids.dim != self.store.dim:
            raise InvalidInputError(
                f"Centroid dimension {self.centroids.dim} != store dimension {self.store.dim}"
            )

    @property
    def p(self) -> int:
        return self.centroids.p


def build_ivf(
    store: VectorStore,
    p: int,
    max_iters: int = DEFAULT_MAX_ITERS,
    seed: int = 0,
) -> IvfIndex:
    """Train p centroids over ``store`` and assign every row to its best one.

    Args:
        store: Vectors to index
        p: Number of centroids (posting lists)
        max_iters: Lloyd iterations after k-means++ seeding
        seed: Seed for the k-means++ initialization

    Returns:
        IvfIndex whose posting lists partition the store

    Raises:
        InvalidInputError: If p is not in [1, n]
    """
    centroids = train_kmeans(store, p, max_iters, seed)
    lists = assign_lists(store, centroids)
    sizes = lists.sizes()
    logger.info(
        "Built IVF index: p=%d, n=%d, list sizes min/median/max=%d/%d/%d",
        p, store.count, sizes.min(), int(np.median(sizes)), sizes.max(),
    )
    return IvfIndex(centroids, lists, store)


def score_centroids(
    index: IvfIndex, q: Vector, counter: WorkCounter | None = None
) -> ScoreArray:
    """Dot products of ``q`` with every centroid (p centroid evaluations)."""
    if q.shape[0] != index.centroids.dim:
        raise InvalidInputError(
            f"Dimension mismatch: expected {index.centroids.dim}, got {q.shape[0]}"
        )
    scores: ScoreArray = (index.centroids.centroids @ q.astype(np.float32, copy=False)).astype(
        np.float64
    )
    if counter is not None:
        counter.add(index.p, centroids=True)
    return scores


def score_centroids_batch(
    index: IvfIndex,
    queries: FloatArray,
    counters: Sequence[WorkCounter] | None = None,
) -> ScoreArray:
    """Centroid scores of a b x d query matrix as a b x p matrix.

    Args:
        index: IVF index whose centroids are scored
        queries: One query per row
        counters: Optional counter per query, each charged p centroid evaluations

    Returns:
        Float64 scores, row i holding query i's centroid scores
    """
    if queries.ndim != 2 or queries.shape[1] != index.centroids.dim:
        raise InvalidInputError(
            f"Expected a b x {index.centroids.dim} query matrix, got shape {queries.shape}"
        )
    scores: ScoreArray = (
        queries.astype(np.float32, copy=False) @ index.centroids.centroids.T
    ).astype(np.float64)
    for counter in counters or ():
        counter.add(index.p, centroids=True)
    return scores


def scan_lists(
    index: IvfIndex,
    q: Vector,
    list_nos: IndexArray,
    k: int,
    counter: WorkCounter | None = None,
) -> list[ScoredHit]:
    """Exact top-k over the union of the given posting lists.

    Lists are gathered in ascending list order, so the same set of lists
    always yields the same scores whatever order they were probed in.
    """
    if len(list_nos) == 0:
        return []
    lists = index.lists.lists
    rows = np.concatenate([lists[i] for i in sorted(list_nos.tolist())])
    return top_k(q, index.store, k, rows=rows, counter=counter)


def search_ivf(
    index: IvfIndex,
    q: Vector,
    k: int,
    nprobe: int,
    counter: WorkCounter | None = None,
) -> list[ScoredHit]:
    """Top-k over the lists of the ``nprobe`` centroids most similar to ``q``.

    Returns fewer than k hits when the probed lists hold fewer points.

    Args:
        index: IVF index to search
        q: Query vector
        k: Number of hits
        nprobe: Number of posting lists to scan
        counter: Optional work counter

    Returns:
        Up to ``k`` hits ordered by descending score, then ascending id

    Raises:
        InvalidInputError: If nprobe is not in [1, p] or k < 1
    """
    _check_probe(index, k, nprobe)
    probed = select_top(score_centroids(index, q, counter), nprobe)
    return scan_lists(index, q, probed, k, counter)


def search_ivf_batch(
    index: IvfIndex,
    queries: FloatArray,
    k: int,
    nprobe: int,
    counters: Sequence[WorkCounter] | None = None,
) -> list[list[ScoredHit]]:
    """``search_ivf`` for every row of ``queries``, scoring centroids in one product.

    Raises:
        InvalidInputError: If nprobe is not in [1, p] or k < 1
    """
    _check_probe(index, k, nprobe)
    scores = score_centroids_batch(index, queries, counters)
    tallies: Sequence[WorkCounter | None] = counters or [None] * len(queries)
    return [
        scan_lists(index, q, select_top(row_scores, nprobe), k, counter)
        for q, row_scores, counter in zip(queries, scores, tallies, strict=True)
    ]


def _check_probe(index: IvfIndex, k: int, nprobe: int) -> None:
    if not 1 <= nprobe <= index.p:
        raise InvalidInputError(f"nprobe must be in [1, {index.p}], got {nprobe}")
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")


def save_ivf(index: IvfIndex, path: Path) -> None:
    with atomic_write(path) as handle:
        handle.write(IVF_MAGIC)
        handle.write(struct.pack("<QQQ", index.store.dim, index.store.count, index.p))
        handle.write(index.centroids.centroids.astype("<f4").tobytes())
        handle.write(index.lists.sizes().astype("<u8").tobytes())
        for rows in index.lists.lists:
            handle.write(rows.astype("<u8").tobytes())
    logger.info("Saved IVF index to %s", path)


def load_ivf(path: Path, store: VectorStore) -> IvfIndex:
    """Load an index file and attach it to the store it was built from.

    Raises:
        ParseError: If the file is malformed or does not match ``store``
    """
    reader = BinaryReader(path)
    reader.expect_magic(IVF_MAGIC)
    d, n, p = reader.u64(), reader.u64(), reader.u64()
    if (d, n) != (store.dim, store.count):
        raise reader.fail(f"index built for n={n}, d={d} but store has n={store.count}, "
                          f"d={store.dim}")
    if p < 1:
        raise reader.fail("index has no centroids")
    centroids = reader.f32_matrix(p, d)
    sizes = reader.u64_array(p)
    if int(sizes.sum()) != n:
        raise reader.fail(f"list sizes sum to {int(sizes.sum())}, expected {n}")
    rows = reader.u64_array(n)
    reader.finish()
    if n and (rows.max() >= n or np.bincount(rows, minlength=n).max() != 1):
        raise ParseError(path, "posting lists do not partition the store")
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    lists = tuple(rows[bounds[i] : bounds[i + 1]] for i in range(p))
    return IvfIndex(CentroidSet(centroids), PostingLists(lists), store)
