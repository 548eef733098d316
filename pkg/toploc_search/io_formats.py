"""Readers and writers for vectors, conversations, qrels and runs, plus the
synthetic conversational workload generator.

Formats (all integers little-endian):

    vectors        b"TLVEC1", n u64, d u64, n*d float32 row-major,
                   n ids as (u32 byte length, UTF-8 bytes)
    conversations  UTF-8 lines "conversation_id<TAB>turn_id<TAB>embedding_id"
    qrels          whitespace-separated lines "topic 0 docid grade"
    runs           lines "topic Q0 docid rank score tag"

Qrels topic ids are "<conversation_id>_<turn_id>".

Note: This code was generated with assistance from AI coding tools
and has been reviewed and tested by a human.
"""

import os
import struct
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import IO

import numpy as np

from toploc_search.errors import InvalidInputError, ParseError
from toploc_search.logging_config import get_logger
from toploc_search.vector_core import (
    FloatArray,
    IndexArray,
    Vector,
    VectorStore,
    exact_search,
)

logger = get_logger(__name__)

VECTOR_MAGIC = b"TLVEC1"
QRELS_SCALE = frozenset({0, 1, 2})
# Qrels generated for synthetic workloads mark the exact top-10 as relevant.
SYNTHETIC_QRELS_DEPTH = 10
SYNTHETIC_GRADE = 2

Qrels = dict[str, dict[str, int]]
RankedRun = dict[str, list[tuple[str, float]]]


@dataclass(frozen=True, eq=False)
class Turn:
    turn_id: str
    query: Vector


@dataclass(frozen=True, eq=False)
class Conversation:
    """An ordered sequence of query turns; turn ids are unique within it."""

    conversation_id: str
    turns: tuple[Turn, ...]

    def __post_init__(self) -> None:
        if not self.turns:
            raise InvalidInputError(f"Conversation {self.conversation_id!r} has no turns")
        seen: set[str] = set()
        for turn in self.turns:
            if turn.turn_id in seen:
                raise InvalidInputError(
                    f"Duplicate turn id {turn.turn_id!r} in conversation {self.conversation_id!r}"
                )
            seen.add(turn.turn_id)

    def topic_id(self, turn: Turn) -> str:
        return topic_id(self.conversation_id, turn.turn_id)


def topic_id(conversation_id: str, turn_id: str) -> str:
    return f"{conversation_id}_{turn_id}"


@contextmanager
def atomic_write(path: Path) -> Iterator[IO[bytes]]:
    """Write to a sibling temp file and move it into place only on success."""
    tmp = path.with_name(path.name + ".tmp")
    try:
        with tmp.open("wb") as handle:
            yield handle
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


@contextmanager
def atomic_write_text(path: Path) -> Iterator[IO[str]]:
    tmp = path.with_name(path.name + ".tmp")
    try:
        with tmp.open("w", encoding="utf-8", newline="\n") as handle:
            yield handle
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


class BinaryReader:
    """Cursor over a little-endian binary file that reports byte offsets on failure."""

    def __init__(self, path: Path) -> None:
        self.path = path
        self.buffer = path.read_bytes()
        self.offset = 0

    def fail(self, message: str) -> ParseError:
        return ParseError(self.path, message, offset=self.offset)

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.buffer):
            raise self.fail(f"truncated file, needed {size} more bytes")
        chunk = self.buffer[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def expect_magic(self, magic: bytes) -> None:
        found = self.take(len(magic))
        if found != magic:
            self.offset -= len(magic)
            raise self.fail(f"bad magic {found!r}, expected {magic!r}")

    def u32(self) -> int:
        value: int = struct.unpack("<I", self.take(4))[0]
        return value

    def u64(self) -> int:
        value: int = struct.unpack("<Q", self.take(8))[0]
        return value

    def u64_array(self, count: int) -> IndexArray:
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<u8").astype(np.int64)

    def f32_matrix(self, rows: int, cols: int) -> FloatArray:
        start = self.offset
        raw = self.take(4 * rows * cols)
        matrix = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(rows, cols)
        if not np.isfinite(matrix).all():
            bad = int(np.flatnonzero(~np.isfinite(matrix.reshape(-1)))[0])
            raise ParseError(self.path, "non-finite float value", offset=start + 4 * bad)
        return matrix

    def finish(self) -> None:
        if self.offset != len(self.buffer):
            raise self.fail(f"{len(self.buffer) - self.offset} trailing bytes")


def read_vectors(path: Path) -> VectorStore:
    """Read a vector file written by write_vectors.

    Raises:
        ParseError: On bad magic, truncation, non-finite values or bad ids
    """
    reader = BinaryReader(path)
    reader.expect_magic(VECTOR_MAGIC)
    n = reader.u64()
    d = reader.u64()
    if d < 1:
        raise reader.fail("dimension must be >= 1")
    data = reader.f32_matrix(n, d)
    ids: list[str] = []
    for _ in range(n):
        length = reader.u32()
        start = reader.offset
        try:
            ids.append(reader.take(length).decode("utf-8"))
        except UnicodeDecodeError as e:
            raise ParseError(path, f"id is not valid UTF-8: {e}", offset=start) from e
    reader.finish()
    try:
        store = VectorStore(data, tuple(ids))
    except InvalidInputError as e:
        raise ParseError(path, str(e), offset=reader.offset) from e
    logger.debug("Read %d vectors of dimension %d from %s", n, d, path)
    return store


def write_vectors(store: VectorStore, path: Path) -> None:
    with atomic_write(path) as handle:
        handle.write(VECTOR_MAGIC)
        handle.write(struct.pack("<QQ", store.count, store.dim))
        handle.write(store.data.astype("<f4").tobytes())
        for doc_id in store.ids:
            encoded = doc_id.encode("utf-8")
            handle.write(struct.pack("<I", len(encoded)))
            handle.write(encoded)
    logger.debug("Wrote %d vectors to %s", store.count, path)


def read_conversations(path: Path, queries: VectorStore) -> list[Conversation]:
    """Read conversations, resolving each turn's embedding id in ``queries``.

    Turns keep file order; conversations are ordered by first appearance.

    Raises:
        ParseError: On a malformed line, an unknown embedding id or a repeated turn id
    """
    grouped: dict[str, list[Turn]] = {}
    with path.open(encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(path, f"expected 3 tab-separated fields, got {len(fields)}",
                                 line=line_no)
            conversation_id, turn_id, embedding_id = fields
            try:
                query = queries.vector(embedding_id)
            except InvalidInputError:
                raise ParseError(
                    path,
                    f"unknown embedding id {embedding_id!r} for conversation "
                    f"{conversation_id!r} turn {turn_id!r}",
                    line=line_no,
                ) from None
            turns = grouped.setdefault(conversation_id, [])
            if any(t.turn_id == turn_id for t in turns):
                raise ParseError(
                    path,
                    f"duplicate turn id {turn_id!r} in conversation {conversation_id!r}",
                    line=line_no,
                )
            turns.append(Turn(turn_id, query))
    conversations = [Conversation(cid, tuple(turns)) for cid, turns in grouped.items()]
    logger.debug("Read %d conversations from %s", len(conversations), path)
    return conversations


def write_conversations(conversations: list[Conversation], path: Path) -> None:
    """Write conversations whose query embeddings are keyed by topic id."""
    with atomic_write_text(path) as handle:
        for conversation in conversations:
            for turn in conversation.turns:
                handle.write(
                    f"{conversation.conversation_id}\t{turn.turn_id}\t"
                    f"{conversation.topic_id(turn)}\n"
                )


def read_qrels(path: Path) -> Qrels:
    """Read TREC qrels. Later duplicates override earlier ones with a warning."""
    qrels: Qrels = {}
    with path.open(encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, 1):
            fields = raw.split()
            if not fields:
                continue
            if len(fields) != 4:
                raise ParseError(path, f"expected 4 fields, got {len(fields)}", line=line_no)
            topic, _, doc_id, grade_text = fields
            try:
                grade = int(grade_text)
            except ValueError:
                raise ParseError(path, f"grade {grade_text!r} is not an integer",
                                 line=line_no) from None
            if grade < 0:
                raise ParseError(path, f"negative grade {grade}", line=line_no)
            if grade not in QRELS_SCALE:
                logger.warning("Line %d: grade %d outside the 0-2 scale", line_no, grade)
            judged = qrels.setdefault(topic, {})
            if doc_id in judged:
                logger.warning(
                    "Line %d: duplicate judgment for (%s, %s), %d overrides %d",
                    line_no, topic, doc_id, grade, judged[doc_id],
                )
            judged[doc_id] = grade
    return qrels


def write_qrels(qrels: Qrels, path: Path) -> None:
    with atomic_write_text(path) as handle:
        for topic, judged in qrels.items():
            for doc_id, grade in judged.items():
                handle.write(f"{topic} 0 {doc_id} {grade}\n")


def ranked(entries: list[tuple[str, float]]) -> list[tuple[str, float]]:
    """Descending score, ascending doc id on ties."""
    return sorted(entries, key=lambda entry: (-entry[1], entry[0]))


def write_run(run: RankedRun, tag: str, path: Path) -> None:
    """Write a TREC run file with 1-based ranks and 6-decimal scores."""
    with atomic_write_text(path) as handle:
        for topic, entries in run.items():
            seen: set[str] = set()
            for rank, (doc_id, score) in enumerate(ranked(entries), 1):
                if doc_id in seen:
                    raise InvalidInputError(f"Duplicate document {doc_id!r} in topic {topic!r}")
                seen.add(doc_id)
                handle.write(f"{topic} Q0 {doc_id} {rank} {score:.6f} {tag}\n")


def read_run(path: Path) -> RankedRun:
    """Read a TREC run file; entries come back in rank order."""
    rows: dict[str, list[tuple[int, str, float]]] = {}
    with path.open(encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, 1):
            fields = raw.split()
            if not fields:
                continue
            if len(fields) != 6:
                raise ParseError(path, f"expected 6 fields, got {len(fields)}", line=line_no)
            topic, _, doc_id, rank_text, score_text, _ = fields
            try:
                rank, score = int(rank_text), float(score_text)
            except ValueError:
                raise ParseError(path, "rank or score is not numeric", line=line_no) from None
            if not np.isfinite(score):
                raise ParseError(path, f"non-finite score {score_text}", line=line_no)
            rows.setdefault(topic, []).append((rank, doc_id, score))
    run: RankedRun = {}
    for topic, entries in rows.items():
        entries.sort()
        docs = [doc_id for _, doc_id, _ in entries]
        if len(set(docs)) != len(docs):
            raise ParseError(path, f"duplicate document in topic {topic!r}")
        run[topic] = [(doc_id, score) for _, doc_id, score in entries]
    return run


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a clustered corpus with topically local conversations.

    ``sigma`` is the per-coordinate standard deviation around a unit-norm
    cluster center. Each turn moves the query a ``drift`` fraction of the way
    toward a fresh sample of the conversation's cluster. From turn position
    ``shift_at`` on, the conversation jumps to a different cluster.
    """

    n: int = 100_000
    d: int = 128
    clusters: int = 256
    sigma: float = 0.05
    conversations: int = 50
    turns_per_conversation: int = 8
    drift: float = 0.1
    shift_at: int | None = None
    seed: int = 0
    normalize: bool = True

    def validate(self) -> None:
        for name in ("n", "d", "clusters", "conversations", "turns_per_conversation"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        if self.clusters > self.n:
            raise InvalidInputError(f"clusters ({self.clusters}) exceeds n ({self.n})")
        if not 0.0 <= self.drift <= 1.0:
            raise InvalidInputError(f"drift must be in [0, 1], got {self.drift}")
        if self.sigma < 0.0:
            raise InvalidInputError("sigma must be non-negative")
        if self.shift_at is not None:
            if not 1 <= self.shift_at < self.turns_per_conversation:
                raise InvalidInputError(
                    f"shift_at must be in [1, {self.turns_per_conversation - 1}]"
                )
            if self.clusters < 2:
                raise InvalidInputError("shift_at needs at least two clusters")


@dataclass(frozen=True, eq=False)
class SyntheticWorkload:
    corpus: VectorStore
    queries: VectorStore
    conversations: list[Conversation]
    qrels: Qrels
    centers: FloatArray
    # Cluster each turn's query was drawn from, keyed by topic id.
    turn_clusters: dict[str, int]


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    return matrix / np.linalg.norm(matrix, axis=1, keepdims=True)


def gen_synthetic(spec: SyntheticSpec) -> SyntheticWorkload:
    """Generate a deterministic clustered corpus, conversations and exact-top-10 qrels.

    Args:
        spec: Sizes, noise, drift and seed of the workload

    Returns:
        SyntheticWorkload; equal specs give identical workloads

    Raises:
        InvalidInputError: If ``spec`` is out of range
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    centers = _unit_rows(rng.standard_normal((spec.clusters, spec.d)))
    # Every cluster gets at least one point.
    membership = np.concatenate(
        [np.arange(spec.clusters), rng.integers(0, spec.clusters, spec.n - spec.clusters)]
    )
    points = centers[membership] + spec.sigma * rng.standard_normal((spec.n, spec.d))
    if spec.normalize:
        points = _unit_rows(points)
    width = len(str(spec.n - 1))
    corpus = VectorStore(
        points.astype(np.float32), tuple(f"d{i:0{width}d}" for i in range(spec.n))
    )

    def sample(cluster: int) -> np.ndarray:
        sampled: np.ndarray = centers[cluster] + spec.sigma * rng.standard_normal(spec.d)
        return sampled

    conversations: list[Conversation] = []
    query_rows: list[np.ndarray] = []
    query_ids: list[str] = []
    turn_clusters: dict[str, int] = {}
    conv_width = len(str(spec.conversations - 1))
    for c in range(spec.conversations):
        conversation_id = f"c{c:0{conv_width}d}"
        cluster = int(rng.integers(0, spec.clusters))
        raw = sample(cluster)
        turns: list[Turn] = []
        for position in range(spec.turns_per_conversation):
            if position == spec.shift_at:
                offset = int(rng.integers(1, spec.clusters))
                cluster = (cluster + offset) % spec.clusters
                raw = sample(cluster)
            elif position > 0 and spec.drift > 0.0:
                raw = raw + spec.drift * (sample(cluster) - raw)
            vector = raw / np.linalg.norm(raw) if spec.normalize else raw
            turn = Turn(str(position), vector.astype(np.float32))
            turns.append(turn)
            tid = topic_id(conversation_id, turn.turn_id)
            query_rows.append(turn.query)
            query_ids.append(tid)
            turn_clusters[tid] = cluster
        conversations.append(Conversation(conversation_id, tuple(turns)))

    queries = VectorStore(np.stack(query_rows), tuple(query_ids))
    qrels: Qrels = {}
    for conversation in conversations:
        for turn in conversation.turns:
            hits = exact_search(corpus, turn.query, SYNTHETIC_QRELS_DEPTH)
            qrels[conversation.topic_id(turn)] = {hit.id: SYNTHETIC_GRADE for hit in hits}
    logger.info(
        "Generated %d vectors in %d clusters and %d conversations",
        spec.n, spec.clusters, spec.conversations,
    )
    return SyntheticWorkload(
        corpus, queries, conversations, qrels, centers.astype(np.float32), turn_clusters
    )
