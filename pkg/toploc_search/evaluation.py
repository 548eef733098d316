"""Effectiveness metrics over graded qrels and timing of conversation runs.

Note: This code was generated with assistance from AI coding tools
and has been reviewed and tested by a human.
"""

import math
import statistics
from collections.abc import Mapping, Sequence
from concurrent.futures import Future, ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Literal

from threadpoolctl import threadpool_limits
from tqdm import tqdm

from toploc_search.engine import ConversationEngine, ConversationOutcome
from toploc_search.errors import EmptyReportError, InvalidInputError
from toploc_search.io_formats import Conversation, Qrels, RankedRun
from toploc_search.logging_config import get_logger
from toploc_search.vector_core import ScoredHit

logger = get_logger(__name__)

Gain = Literal["linear", "exponential"]
METRIC_NAMES = ("mrr@10", "ndcg@3", "ndcg@10")


def mrr_at(ranking: Sequence[str], judged: Mapping[str, int], cutoff: int = 10) -> float:
    """Reciprocal rank of the first document graded >= 1 within ``cutoff``."""
    if cutoff < 1:
        raise InvalidInputError(f"cutoff must be >= 1, got {cutoff}")
    for rank, doc_id in enumerate(ranking[:cutoff], 1):
        if judged.get(doc_id, 0) >= 1:
            return 1.0 / rank
    return 0.0


def _gain(grade: int, gain: Gain) -> float:
    return float(2**grade - 1) if gain == "exponential" else float(grade)


def _dcg(grades: Sequence[int], gain: Gain) -> float:
    return sum(_gain(g, gain) / math.log2(rank + 1) for rank, g in enumerate(grades, 1))


def ndcg_at(
    ranking: Sequence[str],
    judged: Mapping[str, int],
    cutoff: int = 10,
    gain: Gain = "linear",
) -> float:
    """DCG@cutoff / IDCG@cutoff with discount 1/log2(rank + 1).

    Returns 0.0 when no document of the topic has a positive grade.
    """
    if cutoff < 1:
        raise InvalidInputError(f"cutoff must be >= 1, got {cutoff}")
    ideal = sorted((g for g in judged.values() if g > 0), reverse=True)[:cutoff]
    if not ideal:
        return 0.0
    idcg = _dcg(ideal, gain)
    dcg = _dcg([judged.get(doc_id, 0) for doc_id in ranking[:cutoff]], gain)
    return dcg / idcg


def recall_at(hits: Sequence[ScoredHit], reference: Sequence[ScoredHit], k: int = 10) -> float:
    """Share of the reference top-k ids that appear in the first k hits."""
    expected = {hit.id for hit in reference[:k]}
    if not expected:
        return 1.0
    found = {hit.id for hit in hits[:k]}
    return len(expected & found) / len(expected)


@dataclass
class MetricsReport:
    per_topic: dict[str, dict[str, float]]
    mean: dict[str, float]
    missing_topics: list[str] = field(default_factory=list)

    @property
    def topics(self) -> int:
        return len(self.per_topic)

    def to_json(self) -> dict[str, Any]:
        return {
            "per_topic": self.per_topic,
            "mean": self.mean,
            "topics": self.topics,
            "missing_topics": self.missing_topics,
        }


def evaluate_run(run: RankedRun, qrels: Qrels, gain: Gain = "linear") -> MetricsReport:
    """Score every qrels topic with at least one positive grade.

    Topics absent from the run score 0 and are listed in ``missing_topics``.
    Each topic is ranked in the order its run entries are listed, which is
    rank order for runs read from disk and for in-memory results alike.

    Args:
        run: Ranked document ids and scores per topic
        qrels: Graded judgments per topic
        gain: Linear or exponential NDCG gain

    Returns:
        MetricsReport with per-topic and mean MRR@10, NDCG@3 and NDCG@10

    Raises:
        EmptyReportError: If no evaluable topic appears in the run
    """
    evaluable = sorted(t for t, judged in qrels.items() if any(g > 0 for g in judged.values()))
    if not evaluable:
        raise EmptyReportError("Qrels contain no topic with a positive grade")
    present = [t for t in evaluable if t in run]
    if not present:
        raise EmptyReportError("Run and qrels share no evaluable topic")
    missing = [t for t in evaluable if t not in run]
    if missing:
        logger.warning("%d qrels topics missing from the run score 0: %s",
                       len(missing), ", ".join(missing))

    per_topic: dict[str, dict[str, float]] = {}
    for topic in evaluable:
        ranking = [doc_id for doc_id, _ in run.get(topic, [])]
        judged = qrels[topic]
        per_topic[topic] = {
            "mrr@10": mrr_at(ranking, judged, 10),
            "ndcg@3": ndcg_at(ranking, judged, 3, gain),
            "ndcg@10": ndcg_at(ranking, judged, 10, gain),
        }
    mean = {
        name: statistics.fmean(scores[name] for scores in per_topic.values())
        for name in METRIC_NAMES
    }
    return MetricsReport(per_topic, mean, missing)


@dataclass
class TimingReport:
    """Per-turn latency and work of one method over a set of conversations.

    ``outcomes`` keep the input conversation order regardless of the order
    in which worker threads finished them.
    """

    method: str
    outcomes: list[ConversationOutcome]
    threads: int = 1
    batch_size: int = 1
    speedup_vs: dict[str, float] = field(default_factory=dict)

    @property
    def per_turn_us(self) -> list[float]:
        return [turn.elapsed_us for o in self.outcomes for turn in o.turns]

    @property
    def mean_ms(self) -> float:
        times = self.per_turn_us
        return statistics.fmean(times) / 1_000 if times else 0.0

    @property
    def median_ms(self) -> float:
        times = self.per_turn_us
        return statistics.median(times) / 1_000 if times else 0.0

    @property
    def similarity_evaluations(self) -> int:
        return sum(t.result.work.similarity_evaluations for o in self.outcomes for t in o.turns)

    @property
    def centroid_evaluations(self) -> int:
        return sum(t.result.work.centroid_evaluations for o in self.outcomes for t in o.turns)

    @property
    def refresh_count(self) -> int:
        return sum(o.refresh_count for o in self.outcomes)

    def record_speedup(self, baseline_method: str, baseline_mean_ms: float) -> float:
        """Store and return ``baseline mean / this mean`` under the baseline's name."""
        if baseline_mean_ms <= 0.0 or self.mean_ms <= 0.0:
            raise InvalidInputError("Speedup needs positive mean times on both sides")
        ratio = baseline_mean_ms / self.mean_ms
        self.speedup_vs[baseline_method] = ratio
        return ratio

    def speedup_over(self, baseline: "TimingReport") -> float:
        return self.record_speedup(baseline.method, baseline.mean_ms)

    def to_run(self) -> RankedRun:
        return {
            turn.topic_id: [(hit.id, hit.score) for hit in turn.result.hits]
            for outcome in self.outcomes
            for turn in outcome.turns
        }

    def to_json(self) -> dict[str, Any]:
        turns = sum(len(o.turns) for o in self.outcomes)
        return {
            "method": self.method,
            "per_topic": {
                turn.topic_id: turn.to_json() for o in self.outcomes for turn in o.turns
            },
            "mean": {
                "time_ms": self.mean_ms,
                "median_ms": self.median_ms,
                "similarity_evaluations": self.similarity_evaluations / turns if turns else 0.0,
                "centroid_evaluations": self.centroid_evaluations / turns if turns else 0.0,
            },
            "speedup_vs": self.speedup_vs,
            "totals": {
                "turns": turns,
                "similarity_evaluations": self.similarity_evaluations,
                "centroid_evaluations": self.centroid_evaluations,
                "refresh_count": self.refresh_count,
            },
            "conversations": [
                {
                    "conversation": o.conversation_id,
                    "turns": len(o.turns),
                    "refresh_count": o.refresh_count,
                    "entry_point": o.entry_point,
                    "opening_ef": o.turns[0].ef_search if o.turns else None,
                }
                for o in self.outcomes
            ],
            "threads": self.threads,
            "batch_size": self.batch_size,
        }


def _check_embeddings(engine: ConversationEngine, conversations: list[Conversation]) -> None:
    dim = engine.store.dim
    for conversation in conversations:
        for turn in conversation.turns:
            if turn.query is None or turn.query.shape != (dim,):
                raise InvalidInputError(
                    f"Missing or malformed embedding for topic {conversation.topic_id(turn)!r}"
                )


def time_conversations(
    engine: ConversationEngine,
    conversations: list[Conversation],
    show_progress: bool = False,
) -> TimingReport:
    """Answer every conversation through ``engine`` and collect per-turn timings.

    Conversations are grouped into batches of ``batch_size`` and each batch
    runs in lockstep through ``ConversationEngine.run_batch``. With one
    thread batches run sequentially in input order; with more, batches run
    on a thread pool while each conversation's turns stay in order. Native
    BLAS pools are held to one thread throughout, so ``threads`` is the only
    source of parallelism.

    Args:
        engine: Configured engine with its index loaded
        conversations: Conversations to answer
        show_progress: Show a tqdm bar over batches

    Returns:
        TimingReport with outcomes in input order

    Raises:
        InvalidInputError: If any turn lacks a usable embedding, before any search runs
    """
    _check_embeddings(engine, conversations)
    config = engine.config
    batches = [
        conversations[i : i + config.batch_size]
        for i in range(0, len(conversations), config.batch_size)
    ]
    logger.info(
        "Running %d conversations in %d batches of up to %d on %d thread(s) with mode %s",
        len(conversations), len(batches), config.batch_size, config.threads, engine.method,
    )

    results: list[list[ConversationOutcome]] = [[] for _ in batches]
    progress = tqdm(total=len(batches), desc="Conversations", unit="batch",
                    disable=not show_progress)
    with progress, threadpool_limits(limits=1):
        if config.threads == 1:
            for idx, batch in enumerate(batches):
                results[idx] = engine.run_batch(batch)
                progress.update(1)
        else:
            future_to_index: dict[Future[list[ConversationOutcome]], int] = {}
            with ThreadPoolExecutor(max_workers=config.threads) as executor:
                for idx, batch in enumerate(batches):
                    future_to_index[executor.submit(engine.run_batch, batch)] = idx
                try:
                    for future in as_completed(future_to_index):
                        results[future_to_index[future]] = future.result()
                        progress.update(1)
                except Exception as e:
                    logger.error("Conversation batch failed: %s", e)
                    executor.shutdown(wait=False, cancel_futures=True)
                    raise

    outcomes = [outcome for batch_outcomes in results for outcome in batch_outcomes]
    report = TimingReport(engine.method, outcomes, config.threads, config.batch_size)
    logger.info(
        "%s: mean %.3f ms, median %.3f ms per turn, %d similarity evaluations",
        report.method, report.mean_ms, report.median_ms, report.similarity_evaluations,
    )
    return report
