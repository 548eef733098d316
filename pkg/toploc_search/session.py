"""Per-conversation search state that exploits topical locality.

IVF sessions replace the full centroid set with the h centroids closest to
the conversation's anchor query and probe only those on later turns. The
overlap between a turn's top-np cached centroids and the anchor's (|I0|)
tracks topic drift; when it falls below alpha * np the cache is rebuilt
around the current turn.

HNSW sessions answer the first turn with an enlarged candidate list and
seed every later turn's base-layer search with the first turn's best hit.

Note: This code was generated with assistance from AI coding tools
and has been reviewed and tested by a human.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from toploc_search.errors import InternalError, InvalidInputError, InvalidStateError
from toploc_search.hnsw_index import HnswGraph, SearchParams, search_hnsw, search_hnsw_from
from toploc_search.ivf_index import (
    IvfIndex,
    scan_lists,
    score_centroids,
    score_centroids_batch,
)
from toploc_search.logging_config import get_logger
from toploc_search.vector_core import (
    FloatArray,
    IndexArray,
    ScoreArray,
    ScoredHit,
    Vector,
    WorkCounter,
    select_top,
)

logger = get_logger(__name__)


@dataclass
class TurnResult:
    """Hits of one turn plus its telemetry. ``i0_size`` is -1 on opening turns."""

    hits: list[ScoredHit]
    refreshed: bool
    i0_size: int
    work: WorkCounter


@dataclass
class IvfSession:
    """Cached centroids of one conversation and the anchor's top-np among them."""

    h: int
    nprobe: int
    alpha: float
    cached: IndexArray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    cached_vectors: FloatArray = field(
        default_factory=lambda: np.empty((0, 0), dtype=np.float32)
    )
    anchor_top_np: frozenset[int] = frozenset()
    refresh_count: int = 0
    is_open: bool = False


@dataclass
class HnswSession:
    """Privileged entry point established by the conversation's first turn."""

    up: float
    entry: str | None = None
    first_done: bool = False
    opening_ef: int | None = None


def _fill_cache(session: IvfSession, index: IvfIndex, scores: ScoreArray) -> IndexArray:
    """Cache the top-h centroids for ``scores``; return the anchor's top-np."""
    h = min(session.h, index.p)
    session.cached = select_top(scores, h)
    session.cached_vectors = index.centroids.centroids[session.cached]
    top_np = session.cached[: session.nprobe]
    session.anchor_top_np = frozenset(top_np.tolist())
    return top_np


def _cached_top_np(
    session: IvfSession, q: Vector, counter: WorkCounter | None
) -> IndexArray:
    """Original indices of the np cached centroids closest to ``q`` (h evaluations)."""
    if not session.is_open:
        raise InvalidStateError("IVF session has not been opened")
    if q.shape[0] != session.cached_vectors.shape[1]:
        raise InvalidInputError(
            f"Dimension mismatch: expected {session.cached_vectors.shape[1]}, got {q.shape[0]}"
        )
    scores = (session.cached_vectors @ q.astype(np.float32, copy=False)).astype(np.float64)
    if counter is not None:
        counter.add(len(session.cached), centroids=True)
    positions = select_top(scores, session.nprobe, session.cached)
    return session.cached[positions]


def _check_session_params(index: IvfIndex, h: int, nprobe: int, k: int, alpha: float) -> None:
    if not 1 <= nprobe <= h <= index.p:
        raise InvalidInputError(f"Need 1 <= nprobe <= h <= p, got np={nprobe}, h={h}, "
                                f"p={index.p}")
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"alpha must be in [0, 1], got {alpha}")


def _open_from_scores(
    index: IvfIndex,
    q0: Vector,
    scores: ScoreArray,
    counter: WorkCounter,
    h: int,
    nprobe: int,
    k: int,
    alpha: float,
) -> tuple[TurnResult, IvfSession]:
    session = IvfSession(h=h, nprobe=nprobe, alpha=alpha)
    probed = _fill_cache(session, index, scores)
    session.is_open = True
    hits = scan_lists(index, q0, probed, k, counter)
    return TurnResult(hits, refreshed=False, i0_size=-1, work=counter), session


def open_ivf_session(
    index: IvfIndex,
    q0: Vector,
    h: int,
    nprobe: int,
    k: int,
    alpha: float = 0.0,
) -> tuple[TurnResult, IvfSession]:
    """Answer the first turn with plain IVF and cache its top-h centroids.

    One pass over all p centroids serves both the answer and the cache, since
    the top-np centroids are a prefix of the top-h.

    Args:
        index: IVF index the conversation runs against
        q0: First-turn query, which becomes the anchor
        h: Number of centroids to cache
        nprobe: Posting lists scanned per turn
        k: Number of hits
        alpha: Refresh threshold as a share of nprobe; 0 never refreshes

    Returns:
        The first turn's result and the open session

    Raises:
        InvalidInputError: Unless 1 <= nprobe <= h <= p, k >= 1 and alpha in [0, 1]
    """
    _check_session_params(index, h, nprobe, k, alpha)
    counter = WorkCounter()
    scores = score_centroids(index, q0, counter)
    return _open_from_scores(index, q0, scores, counter, h, nprobe, k, alpha)


def open_ivf_sessions(
    index: IvfIndex,
    queries: FloatArray,
    h: int,
    nprobe: int,
    k: int,
    alpha: float = 0.0,
) -> list[tuple[TurnResult, IvfSession]]:
    """Open one session per row of ``queries``, scoring all centroids in one product.

    Raises:
        InvalidInputError: Unless 1 <= nprobe <= h <= p, k >= 1 and alpha in [0, 1]
    """
    _check_session_params(index, h, nprobe, k, alpha)
    counters = [WorkCounter() for _ in range(len(queries))]
    scores = score_centroids_batch(index, queries, counters)
    return [
        _open_from_scores(index, q0, row_scores, counter, h, nprobe, k, alpha)
        for q0, row_scores, counter in zip(queries, scores, counters, strict=True)
    ]


def i0_size(session: IvfSession, qj: Vector, counter: WorkCounter | None = None) -> int:
    """|top_np(qj, C0) & top_np(anchor, C0)|, costing exactly h evaluations."""
    top_np = _cached_top_np(session, qj, counter)
    return len(session.anchor_top_np.intersection(top_np.tolist()))


def refresh_ivf_cache(
    session: IvfSession,
    index: IvfIndex,
    qj: Vector,
    counter: WorkCounter | None = None,
) -> IndexArray:
    """Rebuild the cache around ``qj``, which becomes the new anchor.

    Returns the new anchor's top-np centroids so the caller can answer the
    triggering turn without scoring again.
    """
    if not session.is_open:
        raise InvalidStateError("IVF session has not been opened")
    probed = _fill_cache(session, index, score_centroids(index, qj, counter))
    session.refresh_count += 1
    logger.debug("Centroid cache refreshed (refresh #%d)", session.refresh_count)
    return probed


def search_ivf_session(
    session: IvfSession, index: IvfIndex, qj: Vector, k: int
) -> TurnResult:
    """Answer a follow-up turn from the cached centroids.

    Refreshes first when |I0| < alpha * np; the triggering turn is then
    answered from the refreshed cache. Centroid work is h, or h + p on a
    refresh.

    Args:
        session: Open session of this conversation
        index: The index the session was opened on
        qj: Query of the current turn
        k: Number of hits

    Returns:
        TurnResult carrying |I0| and whether the cache was refreshed
    """
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    counter = WorkCounter()
    probed = _cached_top_np(session, qj, counter)
    overlap = len(session.anchor_top_np.intersection(probed.tolist()))
    refreshed = overlap < session.alpha * session.nprobe
    if refreshed:
        probed = refresh_ivf_cache(session, index, qj, counter)
    hits = scan_lists(index, qj, probed, k, counter)
    return TurnResult(hits, refreshed=refreshed, i0_size=overlap, work=counter)


def true_intersection_size(session: IvfSession, index: IvfIndex, qj: Vector) -> int:
    """|top_np(qj, C0) & top_np(qj, C)|: the quantity |I0| approximates.

    Scores the full centroid set, so it belongs in offline diagnostics only.
    """
    cached = _cached_top_np(session, qj, None)
    full = select_top(score_centroids(index, qj), session.nprobe)
    return len(set(cached.tolist()).intersection(full.tolist()))


def upscaled_ef(ef: int, up: float) -> int:
    return math.ceil(up * ef)


def open_hnsw_session(
    graph: HnswGraph,
    q0: Vector,
    ef: int,
    up: float,
    k: int,
) -> tuple[TurnResult, HnswSession]:
    """Answer the first turn with ef_search = ceil(up * ef) and keep its top hit.

    Raises:
        InvalidInputError: If up < 1 or ceil(up * ef) < k
        InternalError: If the opening search returns nothing
    """
    if up < 1.0:
        raise InvalidInputError(f"up must be >= 1, got {up}")
    opening_ef = upscaled_ef(ef, up)
    counter = WorkCounter()
    hits = search_hnsw(graph, q0, k, SearchParams(opening_ef), counter)
    if not hits:
        raise InternalError("Opening HNSW search returned no hits")
    session = HnswSession(up=up, entry=hits[0].id, first_done=True, opening_ef=opening_ef)
    logger.debug("HNSW session entry point %s (ef=%d)", session.entry, opening_ef)
    return TurnResult(hits, refreshed=False, i0_size=-1, work=counter), session


def search_hnsw_session(
    session: HnswSession,
    graph: HnswGraph,
    qj: Vector,
    ef: int,
    k: int,
) -> TurnResult:
    """Base-layer search seeded with the session's entry point."""
    if not session.first_done or session.entry is None:
        raise InvalidStateError("HNSW session has not been opened")
    counter = WorkCounter()
    hits = search_hnsw_from(graph, qj, k, SearchParams(ef), session.entry, counter)
    return TurnResult(hits, refreshed=False, i0_size=-1, work=counter)
