"""Hierarchical Navigable Small World graph over a VectorStore.

Similarity is the dot product, so "closer" means a larger score. Nodes are
store rows internally; the public search functions speak document ids.

Index file layout (little-endian): b"TLHNSW1", d, n, M, max_layer (u64 each),
node levels n*u64, then per layer 0..max_layer a CSR block (n+1 offsets u64,
neighbor rows u64), then the global entry row u64.

Note: This code was generated with assistance from AI coding tools
and has been reviewed and tested by a human.
"""

import heapq
import math
import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from tqdm import tqdm

from toploc_search.errors import InvalidInputError, ParseError
from toploc_search.io_formats import BinaryReader, atomic_write
from toploc_search.logging_config import get_logger
from toploc_search.vector_core import (
    IndexArray,
    ScoredHit,
    Vector,
    VectorStore,
    WorkCounter,
    select_top,
)

logger = get_logger(__name__)

HNSW_MAGIC = b"TLHNSW1"
DEFAULT_M = 16
DEFAULT_EF_CONSTRUCTION = 200

Adjacency = dict[int, list[int]]
Candidate = tuple[float, int]


@dataclass(frozen=True)
class SearchParams:
    ef_search: int


@dataclass(eq=False)
class HnswGraph:
    """Layered proximity graph. Layer 0 holds every node; read-only after build."""

    store: VectorStore
    m: int
    node_levels: IndexArray
    neighbors: list[Adjacency]
    global_entry: int
    ef_construction: int = DEFAULT_EF_CONSTRUCTION

    @property
    def max_layer(self) -> int:
        return len(self.neighbors) - 1

    @property
    def global_entry_id(self) -> str:
        return self.store.ids[self.global_entry]

    def max_degree(self, layer: int) -> int:
        return 2 * self.m if layer == 0 else self.m


def _search_layer(
    graph: HnswGraph,
    q: Vector,
    entry_points: list[Candidate],
    ef: int,
    layer: int,
    counter: WorkCounter | None,
) -> list[Candidate]:
    """Best-first expansion with a result list of capacity ``ef``.

    Returns up to ``ef`` (score, row) pairs, best first. Each node is scored
    at most once per call.
    """
    data = graph.store.data64
    adjacency = graph.neighbors[layer]
    visited = {row for _, row in entry_points}
    candidates = [(-score, row) for score, row in entry_points]
    heapq.heapify(candidates)
    results = list(entry_points)
    heapq.heapify(results)
    while len(results) > ef:
        heapq.heappop(results)

    while candidates:
        negated, current = heapq.heappop(candidates)
        if -negated < results[0][0]:
            break
        fresh = [row for row in adjacency[current] if row not in visited]
        if not fresh:
            continue
        visited.update(fresh)
        scores = data[fresh] @ q
        if counter is not None:
            counter.add(len(fresh))
        for row, score in zip(fresh, scores.tolist(), strict=True):
            if len(results) < ef or score > results[0][0]:
                heapq.heappush(candidates, (-score, row))
                heapq.heappush(results, (score, row))
                if len(results) > ef:
                    heapq.heappop(results)
    return sorted(results, key=lambda pair: (-pair[0], pair[1]))


def _greedy_step_down(
    graph: HnswGraph,
    q: Vector,
    entry: Candidate,
    layer: int,
    counter: WorkCounter | None,
) -> Candidate:
    """Move to the best neighbor until none improves (beam width 1)."""
    data = graph.store.data64
    adjacency = graph.neighbors[layer]
    best_score, best = entry
    while True:
        neighbors = adjacency[best]
        if not neighbors:
            return best_score, best
        scores = data[neighbors] @ q
        if counter is not None:
            counter.add(len(neighbors))
        top = int(np.argmax(scores))
        if float(scores[top]) <= best_score:
            return best_score, best
        best_score, best = float(scores[top]), neighbors[top]


def _score_row(graph: HnswGraph, q: Vector, row: int, counter: WorkCounter | None) -> float:
    if counter is not None:
        counter.add(1)
    return float(graph.store.data64[row] @ q)


def _check_query(graph: HnswGraph, q: Vector, k: int, params: SearchParams) -> None:
    if q.shape[0] != graph.store.dim:
        raise InvalidInputError(
            f"Dimension mismatch: expected {graph.store.dim}, got {q.shape[0]}"
        )
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    if params.ef_search < k:
        raise InvalidInputError(f"ef_search ({params.ef_search}) must be >= k ({k})")


def _to_hits(graph: HnswGraph, found: list[Candidate], k: int) -> list[ScoredHit]:
    rows = np.array([row for _, row in found], dtype=np.int64)
    scores = np.array([score for score, _ in found], dtype=np.float64)
    best = select_top(scores, k, graph.store.id_rank[rows])
    return [ScoredHit(graph.store.ids[int(rows[i])], float(found[i][0])) for i in best]


def descend(graph: HnswGraph, q: Vector, counter: WorkCounter | None = None) -> Candidate:
    """Greedy descent from the global entry through every layer above 0."""
    current = (_score_row(graph, q, graph.global_entry, counter), graph.global_entry)
    for layer in range(graph.max_layer, 0, -1):
        current = _greedy_step_down(graph, q, current, layer, counter)
    return current


def descend_to_base(graph: HnswGraph, q: Vector, counter: WorkCounter | None = None) -> str:
    """Id of the layer-0 node where plain search starts its expansion for ``q``."""
    return graph.store.ids[descend(graph, q, counter)[1]]


def search_hnsw(
    graph: HnswGraph,
    q: Vector,
    k: int,
    params: SearchParams,
    counter: WorkCounter | None = None,
) -> list[ScoredHit]:
    """Descend from the global entry, then expand layer 0 with ef_search candidates.

    Args:
        graph: Graph to search
        q: Query vector
        k: Number of hits
        params: Search parameters (ef_search)
        counter: Optional work counter

    Returns:
        Up to ``k`` hits ordered by descending score, then ascending id

    Raises:
        InvalidInputError: If ef_search < k or the query dimension is wrong
    """
    _check_query(graph, q, k, params)
    seed = descend(graph, q, counter)
    found = _search_layer(graph, q, [seed], params.ef_search, 0, counter)
    return _to_hits(graph, found, k)


def search_hnsw_from(
    graph: HnswGraph,
    q: Vector,
    k: int,
    params: SearchParams,
    entry: str,
    counter: WorkCounter | None = None,
) -> list[ScoredHit]:
    """Layer-0 expansion seeded directly with ``entry``; no upper-layer descent.

    Raises:
        InvalidInputError: If ``entry`` is not in the graph, or as search_hnsw
    """
    _check_query(graph, q, k, params)
    row = graph.store.row_of(entry)
    seed = (_score_row(graph, q, row, counter), row)
    found = _search_layer(graph, q, [seed], params.ef_search, 0, counter)
    return _to_hits(graph, found, k)


def _shrink(
    graph: HnswGraph, row: int, layer: int, in_degree: dict[int, int]
) -> None:
    """Drop one neighbor from an over-full list, farthest first.

    A neighbor that only ``row`` links to is kept while another can go.
    """
    data = graph.store.data64
    neighbors = graph.neighbors[layer][row]
    scores = data[neighbors] @ data[row]
    order = select_top(scores, len(neighbors)).tolist()
    victim = order[-1]
    for position in reversed(order):
        if in_degree[neighbors[position]] > 1:
            victim = position
            break
    dropped = neighbors.pop(victim)
    in_degree[dropped] -= 1


def build_hnsw(
    store: VectorStore,
    m: int = DEFAULT_M,
    ef_construction: int = DEFAULT_EF_CONSTRUCTION,
    seed: int = 0,
    show_progress: bool = False,
) -> HnswGraph:
    """Insert store rows in order into a new graph.

    Node levels are floor(-ln(u) / ln(M)) with u drawn in (0, 1] from the
    seeded generator. New nodes link to their M nearest candidates; lists are
    capped at M (2M on layer 0).

    Args:
        store: Vectors to insert, in row order
        m: Maximum out-degree above layer 0
        ef_construction: Candidate list size while inserting
        seed: Seed for level sampling
        show_progress: Show a tqdm bar over insertions

    Returns:
        HnswGraph over every row of ``store``

    Raises:
        InvalidInputError: If the store is empty, M < 2 or ef_construction < 1
    """
    if store.count == 0:
        raise InvalidInputError("Cannot build an HNSW graph over an empty store")
    if m < 2:
        raise InvalidInputError(f"M must be >= 2, got {m}")
    if ef_construction < 1:
        raise InvalidInputError(f"ef_construction must be >= 1, got {ef_construction}")

    rng = np.random.default_rng(seed)
    uniforms = 1.0 - rng.random(store.count)
    levels = np.floor(-np.log(uniforms) / math.log(m)).astype(np.int64)

    graph = HnswGraph(
        store=store,
        m=m,
        node_levels=levels,
        neighbors=[{0: []} for _ in range(int(levels[0]) + 1)],
        global_entry=0,
        ef_construction=ef_construction,
    )
    in_degree: list[dict[int, int]] = [{0: 0} for _ in range(int(levels[0]) + 1)]
    data = store.data64

    for row in tqdm(range(1, store.count), desc="Building HNSW", unit="node",
                    disable=not show_progress):
        level = int(levels[row])
        while graph.max_layer < level:
            graph.neighbors.append({})
            in_degree.append({})
        for layer in range(level + 1):
            graph.neighbors[layer][row] = []
            in_degree[layer][row] = 0

        q = data[row]
        current = (_score_row(graph, q, graph.global_entry, None), graph.global_entry)
        top = int(levels[graph.global_entry])
        for layer in range(top, level, -1):
            current = _greedy_step_down(graph, q, current, layer, None)

        entry_points = [current]
        for layer in range(min(level, top), -1, -1):
            found = _search_layer(graph, q, entry_points, ef_construction, layer, None)
            selected = [r for _, r in found if r != row][:m]
            graph.neighbors[layer][row] = list(selected)
            for neighbor in selected:
                in_degree[layer][neighbor] += 1
                graph.neighbors[layer][neighbor].append(row)
                in_degree[layer][row] += 1
                if len(graph.neighbors[layer][neighbor]) > graph.max_degree(layer):
                    _shrink(graph, neighbor, layer, in_degree[layer])
            entry_points = found

        if level > top:
            graph.global_entry = row

    logger.info(
        "Built HNSW graph: n=%d, M=%d, ef_construction=%d, layers=%d",
        store.count, m, ef_construction, graph.max_layer + 1,
    )
    return graph


def validate_graph(graph: HnswGraph) -> list[str]:
    """Return a description of every violated structural invariant (empty if valid)."""
    problems: list[str] = []
    levels = graph.node_levels
    if int(levels[graph.global_entry]) != graph.max_layer:
        problems.append(
            f"global entry level {int(levels[graph.global_entry])} != max layer {graph.max_layer}"
        )
    for layer, adjacency in enumerate(graph.neighbors):
        expected = set(np.flatnonzero(levels >= layer).tolist())
        if set(adjacency) != expected:
            problems.append(f"layer {layer}: node set disagrees with node levels")
        for row, neighbors in adjacency.items():
            if len(neighbors) > graph.max_degree(layer):
                problems.append(f"layer {layer}: node {row} has {len(neighbors)} neighbors")
            if len(set(neighbors)) != len(neighbors) or row in neighbors:
                problems.append(f"layer {layer}: node {row} has duplicate or self links")
            for neighbor in neighbors:
                if int(levels[neighbor]) < layer:
                    problems.append(f"layer {layer}: node {row} links to absent node {neighbor}")
    reached = {graph.global_entry}
    queue = deque([graph.global_entry])
    while queue:
        for neighbor in graph.neighbors[0][queue.popleft()]:
            if neighbor not in reached:
                reached.add(neighbor)
                queue.append(neighbor)
    if len(reached) != graph.store.count:
        problems.append(
            f"layer 0: {graph.store.count - len(reached)} nodes unreachable from the entry"
        )
    return problems


def save_hnsw(graph: HnswGraph, path: Path) -> None:
    n = graph.store.count
    with atomic_write(path) as handle:
        handle.write(HNSW_MAGIC)
        handle.write(struct.pack("<QQQQ", graph.store.dim, n, graph.m, graph.max_layer))
        handle.write(graph.node_levels.astype("<u8").tobytes())
        for adjacency in graph.neighbors:
            lengths = np.zeros(n + 1, dtype=np.int64)
            for row, neighbors in adjacency.items():
                lengths[row + 1] = len(neighbors)
            handle.write(np.cumsum(lengths).astype("<u8").tobytes())
            flat = [nb for row in sorted(adjacency) for nb in adjacency[row]]
            handle.write(np.array(flat, dtype="<u8").tobytes())
        handle.write(struct.pack("<Q", graph.global_entry))
    logger.info("Saved HNSW graph to %s", path)


def load_hnsw(path: Path, store: VectorStore) -> HnswGraph:
    """Load a graph file and attach it to the store it was built from.

    Raises:
        ParseError: If the file is malformed or does not match ``store``
    """
    reader = BinaryReader(path)
    reader.expect_magic(HNSW_MAGIC)
    d, n, m, max_layer = reader.u64(), reader.u64(), reader.u64(), reader.u64()
    if (d, n) != (store.dim, store.count):
        raise reader.fail(f"graph built for n={n}, d={d} but store has n={store.count}, "
                          f"d={store.dim}")
    levels = reader.u64_array(n)
    if n == 0 or int(levels.max()) != max_layer:
        raise reader.fail("node levels disagree with max_layer")
    neighbors: list[Adjacency] = []
    for layer in range(max_layer + 1):
        offsets = reader.u64_array(n + 1)
        if offsets[0] != 0 or np.any(np.diff(offsets) < 0):
            raise reader.fail(f"layer {layer}: offsets are not monotone")
        flat = reader.u64_array(int(offsets[-1]))
        if flat.size and int(flat.max()) >= n:
            raise reader.fail(f"layer {layer}: neighbor row out of range")
        members = np.flatnonzero(levels >= layer).tolist()
        neighbors.append(
            {row: flat[offsets[row] : offsets[row + 1]].tolist() for row in members}
        )
    global_entry = reader.u64()
    reader.finish()
    if global_entry >= n:
        raise ParseError(path, f"global entry {global_entry} out of range")
    return HnswGraph(store, int(m), levels, neighbors, int(global_entry))
