"""K-means training for the IVF coarse partition.

Note: This code was generated with assistance from AI coding tools
and has been reviewed and tested by a human.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from sklearn.cluster import kmeans_plusplus

from toploc_search.errors import InvalidInputError
from toploc_search.logging_config import get_logger
from toploc_search.vector_core import FloatArray, IndexArray, ScoreArray, VectorStore

logger = get_logger(__name__)

DEFAULT_MAX_ITERS = 25
# Rows per block when scoring points against centroids; bounds the n x p buffer.
ASSIGN_BLOCK_ROWS = 1024


@dataclass(frozen=True, eq=False)
class CentroidSet:
    """The p centroids of an IVF partition, indexed 0..p-1."""

    centroids: FloatArray

    def __post_init__(self) -> None:
        centroids = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if centroids.ndim != 2 or centroids.shape[0] < 1:
            raise InvalidInputError(f"Expected a p x d centroid matrix, got {centroids.shape}")
        if not np.isfinite(centroids).all():
            raise InvalidInputError("Centroids contain non-finite values")
        centroids.flags.writeable = False
        object.__setattr__(self, "centroids", centroids)

    @property
    def p(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])

    @cached_property
    def data64(self) -> ScoreArray:
        return self.centroids.astype(np.float64)


@dataclass(frozen=True, eq=False)
class PostingLists:
    """One list of store rows per centroid; together they partition the store."""

    lists: tuple[IndexArray, ...]

    def __len__(self) -> int:
        return len(self.lists)

    def sizes(self) -> IndexArray:
        return np.array([len(rows) for rows in self.lists], dtype=np.int64)

    def ids(self, store: VectorStore, list_no: int) -> list[str]:
        return [store.ids[int(row)] for row in self.lists[list_no]]


def _best_centroid(
    data: ScoreArray, centroids: ScoreArray, bias: ScoreArray | None = None
) -> IndexArray:
    """argmax over centroids of ``x . c + bias`` per row; first index wins ties."""
    labels = np.empty(data.shape[0], dtype=np.int64)
    for start in range(0, data.shape[0], ASSIGN_BLOCK_ROWS):
        block = data[start : start + ASSIGN_BLOCK_ROWS] @ centroids.T
        if bias is not None:
            block += bias
        labels[start : start + ASSIGN_BLOCK_ROWS] = np.argmax(block, axis=1)
    return labels


def _nearest_euclidean(data: ScoreArray, centroids: ScoreArray) -> IndexArray:
    # argmin |x - c|^2 == argmax x.c - |c|^2 / 2
    bias = -0.5 * np.einsum("ij,ij->i", centroids, centroids)
    return _best_centroid(data, centroids, bias)


def _repair_empty(data: ScoreArray, centroids: ScoreArray, labels: IndexArray, p: int) -> None:
    """Give every empty cluster the farthest point of the current largest cluster."""
    counts = np.bincount(labels, minlength=p)
    for empty in np.flatnonzero(counts == 0):
        donor = int(np.argmax(counts))
        members = np.flatnonzero(labels == donor)
        offsets = data[members] - centroids[donor]
        farthest = int(members[np.argmax(np.einsum("ij,ij->i", offsets, offsets))])
        labels[farthest] = empty
        counts[donor] -= 1
        counts[empty] = 1
        logger.debug("Cluster %d was empty, took row %d from cluster %d", empty, farthest, donor)


def _cluster_means(data: ScoreArray, labels: IndexArray, p: int) -> ScoreArray:
    counts = np.bincount(labels, minlength=p).astype(np.float64)
    sums = np.stack(
        [np.bincount(labels, weights=data[:, j], minlength=p) for j in range(data.shape[1])],
        axis=1,
    )
    means: ScoreArray = sums / counts[:, None]
    return means


def train_kmeans(
    store: VectorStore,
    p: int,
    max_iters: int = DEFAULT_MAX_ITERS,
    seed: int = 0,
) -> CentroidSet:
    """Lloyd k-means with k-means++ seeding.

    Training minimizes squared Euclidean distance. Iteration stops early once
    an assignment pass changes nothing. Empty clusters are repaired after
    every assignment pass, so none is empty at return.

    Args:
        store: Vectors to cluster
        p: Number of centroids
        max_iters: Upper bound on Lloyd iterations
        seed: Seed for k-means++

    Returns:
        CentroidSet of p centroids

    Raises:
        InvalidInputError: If p is not in [1, n] or max_iters < 1
    """
    if not 1 <= p <= store.count:
        raise InvalidInputError(f"p must be in [1, {store.count}], got {p}")
    if max_iters < 1:
        raise InvalidInputError(f"max_iters must be >= 1, got {max_iters}")

    data = store.data64
    # sklearn seeds from a 32-bit state; fold the 64-bit seed into one.
    random_state = int(np.random.default_rng(seed).integers(0, 2**31 - 1))
    init, _ = kmeans_plusplus(data, n_clusters=p, random_state=random_state)
    centroids = np.ascontiguousarray(init, dtype=np.float64)

    labels: IndexArray | None = None
    for iteration in range(1, max_iters + 1):
        new_labels = _nearest_euclidean(data, centroids)
        _repair_empty(data, centroids, new_labels, p)
        if labels is not None and np.array_equal(labels, new_labels):
            logger.debug("k-means converged after %d iterations", iteration - 1)
            break
        labels = new_labels
        centroids = _cluster_means(data, labels, p)
    else:
        logger.debug("k-means stopped at max_iters=%d", max_iters)

    return CentroidSet(centroids)


def assign_lists(store: VectorStore, centroids: CentroidSet) -> PostingLists:
    """Assign each row to its top-1 centroid by dot product (lowest index on ties)."""
    if store.dim != centroids.dim:
        raise InvalidInputError(
            f"Dimension mismatch: store has d={store.dim}, centroids d={centroids.dim}"
        )
    labels = _best_centroid(store.data64, centroids.data64)
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(centroids.p + 1))
    lists = tuple(
        order[bounds[i] : bounds[i + 1]].astype(np.int64) for i in range(centroids.p)
    )
    return PostingLists(lists)
