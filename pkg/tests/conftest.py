"""Shared fixtures: a small clustered workload with IVF and HNSW indexes.

Note: This code was generated with assistance from AI coding tools
and has been reviewed and tested by a human.
"""

import numpy as np
import pytest

from toploc_search.hnsw_index import HnswGraph, build_hnsw
from toploc_search.io_formats import SyntheticSpec, SyntheticWorkload, gen_synthetic
from toploc_search.ivf_index import IvfIndex, build_ivf
from toploc_search.vector_core import FloatArray, VectorStore


def quadratic_top_ids(data: FloatArray, ids: tuple[str, ...], q: FloatArray, k: int) -> list[str]:
    """Independent oracle: score rows one by one, sort by (-score, id)."""
    scored = []
    for row, doc_id in enumerate(ids):
        score = sum(float(a) * float(b) for a, b in zip(data[row], q, strict=True))
        scored.append((-score, doc_id))
    scored.sort()
    return [doc_id for _, doc_id in scored[:k]]


def random_store(n: int, d: int, seed: int = 0, normalize: bool = True) -> VectorStore:
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((n, d))
    if normalize:
        data /= np.linalg.norm(data, axis=1, keepdims=True)
    return VectorStore(data.astype(np.float32), tuple(f"v{i:05d}" for i in range(n)))


@pytest.fixture(scope="session")
def workload() -> SyntheticWorkload:
    return gen_synthetic(
        SyntheticSpec(n=2000, d=16, clusters=16, sigma=0.1, conversations=8,
                      turns_per_conversation=5, drift=0.1, seed=7)
    )


@pytest.fixture(scope="session")
def shift_workload() -> SyntheticWorkload:
    return gen_synthetic(
        SyntheticSpec(n=2000, d=16, clusters=16, sigma=0.05, conversations=8,
                      turns_per_conversation=6, drift=0.05, shift_at=3, seed=11)
    )


@pytest.fixture(scope="session")
def ivf(workload: SyntheticWorkload) -> IvfIndex:
    return build_ivf(workload.corpus, p=32, seed=3)


@pytest.fixture(scope="session")
def shift_ivf(shift_workload: SyntheticWorkload) -> IvfIndex:
    return build_ivf(shift_workload.corpus, p=64, seed=3)


@pytest.fixture(scope="session")
def hnsw(workload: SyntheticWorkload) -> HnswGraph:
    return build_hnsw(workload.corpus, m=8, ef_construction=64, seed=5)
