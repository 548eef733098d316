"""Search engine configuration and per-conversation execution.

A ConversationEngine answers the turns of a conversation in order through
the configured mode, timing only the search calls. Batches of conversations
run in lockstep so that same-position turns share one scoring call.

Note: This code was generated with assistance from AI coding tools
and has been reviewed and tested by a human.
"""

import time
from dataclasses import asdict, dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Any

import numpy as np

from toploc_search.errors import InvalidInputError
from toploc_search.hnsw_index import HnswGraph, SearchParams, search_hnsw
from toploc_search.io_formats import Conversation
from toploc_search.ivf_index import IvfIndex, search_ivf, search_ivf_batch
from toploc_search.logging_config import get_logger
from toploc_search.session import (
    HnswSession,
    IvfSession,
    TurnResult,
    open_hnsw_session,
    open_ivf_session,
    open_ivf_sessions,
    search_hnsw_session,
    search_ivf_session,
    true_intersection_size,
    upscaled_ef,
)
from toploc_search.vector_core import (
    FloatArray,
    ScoredHit,
    Vector,
    VectorStore,
    WorkCounter,
    exact_search,
    exact_search_batch,
)

logger = get_logger(__name__)


class SearchMode(StrEnum):
    EXACT = "exact"
    IVF = "ivf"
    TOPLOC_IVF = "toploc-ivf"
    TOPLOC_IVF_PLUS = "toploc-ivf-plus"
    HNSW = "hnsw"
    TOPLOC_HNSW = "toploc-hnsw"

    @property
    def uses_ivf(self) -> bool:
        return self in (SearchMode.IVF, SearchMode.TOPLOC_IVF, SearchMode.TOPLOC_IVF_PLUS)

    @property
    def uses_hnsw(self) -> bool:
        return self in (SearchMode.HNSW, SearchMode.TOPLOC_HNSW)


@dataclass(frozen=True)
class EngineConfig:
    """Search mode plus the parameters that mode needs.

    ``threads`` = 1 is reproducible-latency mode; larger values run whole
    conversations concurrently. ``batch_size`` conversations are answered
    in lockstep, their same-position turns scored together.
    """

    mode: SearchMode
    index_path: Path | None = None
    k: int = 10
    nprobe: int | None = None
    h: int | None = None
    alpha: float | None = None
    ef: int | None = None
    up: float | None = None
    threads: int = 1
    batch_size: int = 1

    def validate(self) -> None:
        """Check that the mode's parameters are present and in range.

        Raises:
            InvalidInputError: On a missing or out-of-range parameter
        """
        required: dict[SearchMode, tuple[str, ...]] = {
            SearchMode.EXACT: (),
            SearchMode.IVF: ("nprobe",),
            SearchMode.TOPLOC_IVF: ("nprobe", "h"),
            SearchMode.TOPLOC_IVF_PLUS: ("nprobe", "h", "alpha"),
            SearchMode.HNSW: ("ef",),
            SearchMode.TOPLOC_HNSW: ("ef", "up"),
        }
        missing = [name for name in required[self.mode] if getattr(self, name) is None]
        if missing:
            raise InvalidInputError(
                f"Mode {self.mode} requires: {', '.join('--' + m for m in missing)}"
            )
        if self.mode != SearchMode.EXACT and self.index_path is None:
            raise InvalidInputError(f"Mode {self.mode} requires an index")
        if self.k < 1:
            raise InvalidInputError("k must be >= 1")
        if self.threads < 1 or self.batch_size < 1:
            raise InvalidInputError("threads and batch size must be >= 1")
        if self.nprobe is not None and self.nprobe < 1:
            raise InvalidInputError("nprobe must be >= 1")
        if self.h is not None and self.nprobe is not None and self.h < self.nprobe:
            raise InvalidInputError(f"h ({self.h}) must be >= nprobe ({self.nprobe})")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise InvalidInputError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.ef is not None and self.ef < self.k:
            raise InvalidInputError(f"ef ({self.ef}) must be >= k ({self.k})")
        if self.up is not None and self.up < 1.0:
            raise InvalidInputError(f"up must be >= 1, got {self.up}")

    def to_json(self) -> dict[str, Any]:
        data = asdict(self)
        data["mode"] = str(self.mode)
        data["index_path"] = str(self.index_path) if self.index_path else None
        return data


@dataclass
class TurnRecord:
    """Outcome and telemetry of one answered turn."""

    topic_id: str
    result: TurnResult
    elapsed_us: float
    ef_search: int | None = None
    true_intersection: int | None = None

    def to_json(self) -> dict[str, Any]:
        record: dict[str, Any] = {
            "topic": self.topic_id,
            "elapsed_us": round(self.elapsed_us, 3),
            "similarity_evaluations": self.result.work.similarity_evaluations,
            "centroid_evaluations": self.result.work.centroid_evaluations,
        }
        if self.result.i0_size >= 0:
            record["i0"] = self.result.i0_size
            record["refreshed"] = self.result.refreshed
        if self.ef_search is not None:
            record["ef_search"] = self.ef_search
        if self.true_intersection is not None:
            record["i_true"] = self.true_intersection
        return record


@dataclass
class ConversationOutcome:
    conversation_id: str
    turns: list[TurnRecord] = field(default_factory=list)
    refresh_count: int = 0
    entry_point: str | None = None


class ConversationEngine:
    """Runs conversations against one loaded index in the configured mode."""

    def __init__(
        self,
        config: EngineConfig,
        store: VectorStore,
        index: IvfIndex | HnswGraph | None = None,
        diagnose: bool = False,
    ) -> None:
        config.validate()
        if config.mode.uses_ivf and not isinstance(index, IvfIndex):
            raise InvalidInputError(f"Mode {config.mode} needs an IVF index")
        if config.mode.uses_hnsw and not isinstance(index, HnswGraph):
            raise InvalidInputError(f"Mode {config.mode} needs an HNSW graph")
        self.config = config
        self.store = store
        self.index = index
        self.diagnose = diagnose
        # Lazy lookup tables are built here so the first timed turn does not pay for them.
        _ = store.id_rank
        if isinstance(index, HnswGraph):
            _ = index.store.data64

    @property
    def method(self) -> str:
        return str(self.config.mode)

    def run_conversation(self, conversation: Conversation) -> ConversationOutcome:
        """Answer every turn in order; session state lives only inside this call."""
        mode = self.config.mode
        if mode in (SearchMode.TOPLOC_IVF, SearchMode.TOPLOC_IVF_PLUS):
            return self._run_ivf_session(conversation)
        if mode == SearchMode.TOPLOC_HNSW:
            return self._run_hnsw_session(conversation)

        outcome = ConversationOutcome(conversation.conversation_id)
        k = self.config.k
        for turn in conversation.turns:
            self._check_turn(conversation, turn.turn_id, turn.query)
            counter = WorkCounter()
            started = time.perf_counter_ns()
            if mode == SearchMode.EXACT:
                hits = exact_search(self.store, turn.query, k, counter)
            elif mode == SearchMode.IVF:
                assert isinstance(self.index, IvfIndex) and self.config.nprobe is not None
                hits = search_ivf(self.index, turn.query, k, self.config.nprobe, counter)
            else:
                assert isinstance(self.index, HnswGraph) and self.config.ef is not None
                hits = search_hnsw(self.index, turn.query, k, SearchParams(self.config.ef),
                                   counter)
            elapsed = (time.perf_counter_ns() - started) / 1_000
            outcome.turns.append(
                TurnRecord(
                    conversation.topic_id(turn),
                    TurnResult(hits, refreshed=False, i0_size=-1, work=counter),
                    elapsed,
                    ef_search=self.config.ef if mode == SearchMode.HNSW else None,
                )
            )
        return outcome

    def run_batch(self, conversations: list[Conversation]) -> list[ConversationOutcome]:
        """Answer a batch of conversations in lockstep, one turn position at a time.

        The j-th turns of every conversation long enough to have one are
        answered together: exact and IVF modes score them with one matrix
        product, TopLoc-IVF opens all sessions that way. Each turn is charged
        the batched call's time divided by the number of queries in it. A
        batch of one goes through ``run_conversation``.

        Args:
            conversations: Conversations to answer; each keeps its turn order

        Returns:
            One outcome per conversation, in input order

        Raises:
            InvalidInputError: If any turn lacks a usable embedding
        """
        if len(conversations) <= 1:
            return [self.run_conversation(c) for c in conversations]
        for conversation in conversations:
            for turn in conversation.turns:
                self._check_turn(conversation, turn.turn_id, turn.query)

        outcomes = [ConversationOutcome(c.conversation_id) for c in conversations]
        ivf_sessions: dict[int, IvfSession] = {}
        hnsw_sessions: dict[int, HnswSession] = {}
        for position in range(max(len(c.turns) for c in conversations)):
            active = [i for i, c in enumerate(conversations) if position < len(c.turns)]
            queries = np.stack([conversations[i].turns[position].query for i in active])
            started = time.perf_counter_ns()
            results = self._answer_position(position, active, queries, ivf_sessions,
                                            hnsw_sessions)
            elapsed = (time.perf_counter_ns() - started) / 1_000 / len(active)
            for i, result in zip(active, results, strict=True):
                conversation = conversations[i]
                turn = conversation.turns[position]
                record = TurnRecord(conversation.topic_id(turn), result, elapsed,
                                    ef_search=self._ef_at(position))
                if i in ivf_sessions:
                    self._note_ivf_turn(record, ivf_sessions[i], turn.query)
                outcomes[i].turns.append(record)
        logger.debug("Batch of %d conversations answered in lockstep", len(conversations))

        for i, session in ivf_sessions.items():
            outcomes[i].refresh_count = session.refresh_count
        for i, hnsw_session in hnsw_sessions.items():
            outcomes[i].entry_point = hnsw_session.entry
        return outcomes

    def _answer_position(
        self,
        position: int,
        active: list[int],
        queries: FloatArray,
        ivf_sessions: dict[int, IvfSession],
        hnsw_sessions: dict[int, HnswSession],
    ) -> list[TurnResult]:
        """Answer one turn position for the ``active`` conversations of a batch."""
        mode, k = self.config.mode, self.config.k
        if mode == SearchMode.EXACT:
            counters = [WorkCounter() for _ in active]
            batch_hits = exact_search_batch(self.store, queries, k, counters)
            return [_plain_result(hits, c) for hits, c in zip(batch_hits, counters, strict=True)]
        if mode == SearchMode.IVF:
            assert isinstance(self.index, IvfIndex) and self.config.nprobe is not None
            counters = [WorkCounter() for _ in active]
            batch_hits = search_ivf_batch(self.index, queries, k, self.config.nprobe, counters)
            return [_plain_result(hits, c) for hits, c in zip(batch_hits, counters, strict=True)]
        if mode == SearchMode.HNSW:
            assert isinstance(self.index, HnswGraph) and self.config.ef is not None
            params = SearchParams(self.config.ef)
            results: list[TurnResult] = []
            for q in queries:
                counter = WorkCounter()
                results.append(_plain_result(search_hnsw(self.index, q, k, params, counter),
                                             counter))
            return results
        if mode == SearchMode.TOPLOC_HNSW:
            assert isinstance(self.index, HnswGraph)
            assert self.config.ef is not None and self.config.up is not None
            results = []
            for i, q in zip(active, queries, strict=True):
                if position == 0:
                    result, hnsw_sessions[i] = open_hnsw_session(self.index, q, self.config.ef,
                                                                 self.config.up, k)
                else:
                    result = search_hnsw_session(hnsw_sessions[i], self.index, q,
                                                 self.config.ef, k)
                results.append(result)
            return results

        assert isinstance(self.index, IvfIndex)
        assert self.config.nprobe is not None and self.config.h is not None
        if position == 0:
            opened = open_ivf_sessions(self.index, queries, self.config.h, self.config.nprobe,
                                       k, self._alpha)
            for i, (_, session) in zip(active, opened, strict=True):
                ivf_sessions[i] = session
            return [result for result, _ in opened]
        return [
            search_ivf_session(ivf_sessions[i], self.index, q, k)
            for i, q in zip(active, queries, strict=True)
        ]

    @property
    def _alpha(self) -> float:
        if self.config.mode == SearchMode.TOPLOC_IVF_PLUS:
            return self.config.alpha or 0.0
        return 0.0

    def _ef_at(self, position: int) -> int | None:
        mode, ef = self.config.mode, self.config.ef
        if mode == SearchMode.HNSW:
            return ef
        if mode == SearchMode.TOPLOC_HNSW:
            assert ef is not None and self.config.up is not None
            return upscaled_ef(ef, self.config.up) if position == 0 else ef
        return None

    def _check_turn(self, conversation: Conversation, turn_id: str, query: Any) -> None:
        if query is None or query.shape != (self.store.dim,):
            raise InvalidInputError(
                f"Missing or malformed embedding for conversation "
                f"{conversation.conversation_id!r} turn {turn_id!r}"
            )

    def _note_ivf_turn(self, record: TurnRecord, session: IvfSession, query: Vector) -> None:
        """Attach diagnostics to a TopLoc-IVF turn and log it."""
        assert isinstance(self.index, IvfIndex)
        result = record.result
        if self.diagnose:
            record.true_intersection = true_intersection_size(session, self.index, query)
        if result.refreshed:
            logger.info("%s: centroid cache refreshed (|I0|=%d)", record.topic_id,
                        result.i0_size)
        logger.debug("%s: |I0|=%d, %d evaluations", record.topic_id, result.i0_size,
                     result.work.similarity_evaluations)

    def _run_ivf_session(self, conversation: Conversation) -> ConversationOutcome:
        assert isinstance(self.index, IvfIndex)
        assert self.config.nprobe is not None and self.config.h is not None
        index, k = self.index, self.config.k
        outcome = ConversationOutcome(conversation.conversation_id)
        session: IvfSession | None = None
        for turn in conversation.turns:
            self._check_turn(conversation, turn.turn_id, turn.query)
            started = time.perf_counter_ns()
            if session is None:
                result, session = open_ivf_session(
                    index, turn.query, self.config.h, self.config.nprobe, k, self._alpha
                )
            else:
                result = search_ivf_session(session, index, turn.query, k)
            elapsed = (time.perf_counter_ns() - started) / 1_000
            record = TurnRecord(conversation.topic_id(turn), result, elapsed)
            self._note_ivf_turn(record, session, turn.query)
            outcome.turns.append(record)
        assert session is not None
        outcome.refresh_count = session.refresh_count
        return outcome

    def _run_hnsw_session(self, conversation: Conversation) -> ConversationOutcome:
        assert isinstance(self.index, HnswGraph)
        assert self.config.ef is not None and self.config.up is not None
        graph, k, ef = self.index, self.config.k, self.config.ef
        outcome = ConversationOutcome(conversation.conversation_id)
        session: HnswSession | None = None
        for turn in conversation.turns:
            self._check_turn(conversation, turn.turn_id, turn.query)
            started = time.perf_counter_ns()
            if session is None:
                result, session = open_hnsw_session(graph, turn.query, ef, self.config.up, k)
                used_ef = upscaled_ef(ef, self.config.up)
            else:
                result = search_hnsw_session(session, graph, turn.query, ef, k)
                used_ef = ef
            elapsed = (time.perf_counter_ns() - started) / 1_000
            outcome.turns.append(
                TurnRecord(conversation.topic_id(turn), result, elapsed, ef_search=used_ef)
            )
        assert session is not None
        outcome.entry_point = session.entry
        return outcome


def _plain_result(hits: list[ScoredHit], counter: WorkCounter) -> TurnResult:
    return TurnResult(hits, refreshed=False, i0_size=-1, work=counter)
