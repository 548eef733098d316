"""Tests for toploc_search.cli module.

Note: This code was generated with assistance from AI coding tools
and has been reviewed and tested by a human.
"""

import csv
import json
from collections.abc import Iterator
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner, Result

from toploc_search.cli import SYNTH_FILES, main
from toploc_search.io_formats import (
    Conversation,
    SyntheticWorkload,
    Turn,
    read_vectors,
    write_conversations,
    write_qrels,
    write_vectors,
)
from toploc_search.ivf_index import IvfIndex, load_ivf, save_ivf
from toploc_search.logging_config import setup_logging
from toploc_search.vector_core import VectorStore

SYNTH_ARGS = ["--n", "600", "--d", "8", "--clusters", "8", "--sigma", "0.05",
              "--conversations", "4", "--turns", "4", "--seed", "3"]


def invoke(*args: str) -> Result:
    return CliRunner().invoke(main, list(args))


@pytest.fixture(autouse=True)
def reset_logging() -> Iterator[None]:
    """Detach the handler bound to the runner's stderr once each test is done."""
    yield
    setup_logging(0)


def workload_args(data: Path) -> list[str]:
    return [
        "--store", str(data / "corpus.tlvec"),
        "--queries", str(data / "queries.tlvec"),
        "--conversations", str(data / "conversations.tsv"),
    ]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """A generated workload with an IVF index and an HNSW graph."""
    out = tmp_path_factory.mktemp("synth")
    assert invoke("gen-synth", "--out-dir", str(out), *SYNTH_ARGS).exit_code == 0
    store = str(out / "corpus.tlvec")
    assert invoke("build", "ivf", "--store", store, "--p", "16",
                  "--out", str(out / "ivf.idx")).exit_code == 0
    assert invoke("build", "hnsw", "--store", store, "--m", "6", "--ef-construction", "32",
                  "--out", str(out / "hnsw.idx")).exit_code == 0
    return out


def test_help() -> None:
    """Test that the group and every command render help."""
    assert invoke("--help").exit_code == 0
    for command in ("build", "run", "sweep", "evaluate", "gen-synth"):
        result = invoke(command, "--help")
        assert result.exit_code == 0
        assert "Usage" in result.output


def test_gen_synth_is_reproducible(data_dir: Path, tmp_path: Path) -> None:
    """Test the four output files and byte-identical regeneration."""
    result = invoke("gen-synth", "--out-dir", str(tmp_path), *SYNTH_ARGS)
    assert result.exit_code == 0
    assert "✓ Files written to" in result.output
    for name in SYNTH_FILES:
        assert (tmp_path / name).read_bytes() == (data_dir / name).read_bytes()
    assert read_vectors(tmp_path / "corpus.tlvec").count == 600


def test_gen_synth_rejects_more_clusters_than_points(tmp_path: Path) -> None:
    """Test that clusters > n is a usage error and nothing is written."""
    result = invoke("gen-synth", "--out-dir", str(tmp_path / "out"), "--n", "4",
                    "--clusters", "8")
    assert result.exit_code == 2
    assert not (tmp_path / "out").exists()


def test_build_reports_and_persists(data_dir: Path) -> None:
    """Test the printed statistics and a loadable index."""
    store = read_vectors(data_dir / "corpus.tlvec")
    index = load_ivf(data_dir / "ivf.idx", store)
    assert index.p == 16
    assert sum(index.lists.sizes().tolist()) == 600


def test_build_ivf_needs_p(data_dir: Path, tmp_path: Path) -> None:
    """Test the usage error for a missing --p."""
    result = invoke("build", "ivf", "--store", str(data_dir / "corpus.tlvec"),
                    "--out", str(tmp_path / "x.idx"))
    assert result.exit_code == 2
    assert "--p" in result.output


def test_build_fails_cleanly_when_p_exceeds_n(data_dir: Path, tmp_path: Path) -> None:
    """Test that p > n aborts and leaves no index file behind."""
    out = tmp_path / "x.idx"
    result = invoke("build", "ivf", "--store", str(data_dir / "corpus.tlvec"), "--p", "601",
                    "--out", str(out))
    assert result.exit_code == 1
    assert "✗ Error" in result.output
    assert not out.exists()


def test_run_exact_is_perfect(data_dir: Path, tmp_path: Path) -> None:
    """Test exact mode against generated qrels, and the run and report files."""
    run_path, report_path = tmp_path / "exact.run", tmp_path / "exact.json"
    result = invoke("run", "--mode", "exact", *workload_args(data_dir),
                    "--qrels", str(data_dir / "qrels.txt"),
                    "--out-run", str(run_path), "--out-report", str(report_path))
    assert result.exit_code == 0, result.output
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert report["metrics"]["mean"]["mrr@10"] == 1.0
    assert report["method"] == "exact"
    assert report["config"]["mode"] == "exact"
    assert report["totals"]["turns"] == 16
    lines = run_path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 16 * 10
    assert lines[0].split()[5] == "exact"


def test_run_with_baseline_records_speedup(data_dir: Path, tmp_path: Path) -> None:
    """Test speedup_vs filled from an earlier report."""
    baseline = tmp_path / "exact.json"
    assert invoke("run", "--mode", "exact", *workload_args(data_dir),
                  "--out-run", str(tmp_path / "exact.run"),
                  "--out-report", str(baseline)).exit_code == 0
    report_path = tmp_path / "ivf.json"
    result = invoke("run", "--mode", "ivf", "--index", str(data_dir / "ivf.idx"),
                    "--nprobe", "4", *workload_args(data_dir), "--tag", "ivf-np4",
                    "--baseline-report", str(baseline),
                    "--out-run", str(tmp_path / "ivf.run"), "--out-report", str(report_path))
    assert result.exit_code == 0, result.output
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert set(report["speedup_vs"]) == {"exact"}
    assert report["speedup_vs"]["exact"] > 0
    assert "ivf-np4" in (tmp_path / "ivf.run").read_text(encoding="utf-8")


def test_run_toploc_ivf_plus_refreshes_on_shift(
    shift_workload: SyntheticWorkload, shift_ivf: IvfIndex, tmp_path: Path
) -> None:
    """Test that a topic-shift workload triggers cache refreshes in the report."""
    write_vectors(shift_workload.corpus, tmp_path / "corpus.tlvec")
    write_vectors(shift_workload.queries, tmp_path / "queries.tlvec")
    write_conversations(shift_workload.conversations, tmp_path / "conversations.tsv")
    write_qrels(shift_workload.qrels, tmp_path / "qrels.txt")
    save_ivf(shift_ivf, tmp_path / "ivf.idx")
    report_path = tmp_path / "report.json"
    result = invoke("run", "--mode", "toploc-ivf-plus", "--index", str(tmp_path / "ivf.idx"),
                    "--nprobe", "4", "--h", "16", "--alpha", "0.25", "--diagnose",
                    *workload_args(tmp_path), "--qrels", str(tmp_path / "qrels.txt"),
                    "--out-run", str(tmp_path / "run.txt"), "--out-report", str(report_path))
    assert result.exit_code == 0, result.output
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert report["totals"]["refresh_count"] >= 1
    assert report["totals"]["refresh_count"] == sum(
        c["refresh_count"] for c in report["conversations"]
    )
    follow_ups = [t for t in report["per_topic"].values() if "i0" in t]
    assert all("i_true" in t for t in follow_ups)
    assert "Cache refreshes" in result.output


def test_run_toploc_hnsw_opening_ef(data_dir: Path, tmp_path: Path) -> None:
    """Test that up=2 doubles ef on the opening turn only."""
    report_path = tmp_path / "hnsw.json"
    result = invoke("run", "--mode", "toploc-hnsw", "--index", str(data_dir / "hnsw.idx"),
                    "--ef", "16", "--up", "2", *workload_args(data_dir),
                    "--out-run", str(tmp_path / "hnsw.run"), "--out-report", str(report_path))
    assert result.exit_code == 0, result.output
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert all(c["opening_ef"] == 32 for c in report["conversations"])
    assert all(c["entry_point"] for c in report["conversations"])
    efs = {topic: t["ef_search"] for topic, t in report["per_topic"].items()}
    assert {ef for topic, ef in efs.items() if not topic.endswith("_0")} == {16}


def test_run_missing_param_is_usage_error(data_dir: Path, tmp_path: Path) -> None:
    """Test that toploc-ivf without --h exits 2 and writes nothing."""
    run_path = tmp_path / "run.txt"
    result = invoke("run", "--mode", "toploc-ivf", "--index", str(data_dir / "ivf.idx"),
                    "--nprobe", "4", *workload_args(data_dir),
                    "--out-run", str(run_path), "--out-report", str(tmp_path / "r.json"))
    assert result.exit_code == 2
    assert "--h" in result.output
    assert not run_path.exists()


def test_run_wrong_index_kind_fails(data_dir: Path, tmp_path: Path) -> None:
    """Test that an HNSW file handed to an IVF mode aborts with a parse error."""
    run_path = tmp_path / "run.txt"
    result = invoke("run", "--mode", "ivf", "--index", str(data_dir / "hnsw.idx"),
                    "--nprobe", "2", *workload_args(data_dir),
                    "--out-run", str(run_path), "--out-report", str(tmp_path / "r.json"))
    assert result.exit_code == 1
    assert "bad magic" in result.output
    assert not run_path.exists()


def test_sweep_skips_values_beyond_p(data_dir: Path, tmp_path: Path) -> None:
    """Test one CSV row per honoured value and a skip for nprobe > p."""
    out_csv = tmp_path / "sweep.csv"
    result = invoke("sweep", "--mode", "ivf", "--index", str(data_dir / "ivf.idx"),
                    *workload_args(data_dir), "--qrels", str(data_dir / "qrels.txt"),
                    "--param", "nprobe", "--values", "1,4,16,32", "--out-csv", str(out_csv))
    assert result.exit_code == 0, result.output
    with out_csv.open(encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert [row["nprobe"] for row in rows] == ["1", "4", "16"]
    assert float(rows[-1]["recall@10"]) == 1.0
    recalls = [float(row["recall@10"]) for row in rows]
    assert recalls == sorted(recalls)
    assert {"mrr@10", "ndcg@3", "ndcg@10", "mean_ms", "refresh_count"} <= set(rows[0])


def test_sweep_rejects_unsorted_values(data_dir: Path, tmp_path: Path) -> None:
    """Test that descending values are a usage error."""
    result = invoke("sweep", "--mode", "ivf", "--index", str(data_dir / "ivf.idx"),
                    *workload_args(data_dir), "--param", "nprobe", "--values", "8,4",
                    "--out-csv", str(tmp_path / "s.csv"))
    assert result.exit_code == 2


def test_sweep_rejects_param_of_other_mode(data_dir: Path, tmp_path: Path) -> None:
    """Test that ef cannot be swept in an IVF mode."""
    result = invoke("sweep", "--mode", "ivf", "--index", str(data_dir / "ivf.idx"),
                    *workload_args(data_dir), "--param", "ef", "--values", "10,20",
                    "--out-csv", str(tmp_path / "s.csv"))
    assert result.exit_code == 2


def test_evaluate_prints_json(tmp_path: Path) -> None:
    """Test the evaluate command on a hand-written run."""
    run_path, qrels_path = tmp_path / "run.txt", tmp_path / "qrels.txt"
    run_path.write_text("1_0 Q0 a 1 0.9 t\n1_0 Q0 b 2 0.5 t\n", encoding="utf-8")
    qrels_path.write_text("1_0 0 b 2\n", encoding="utf-8")
    result = invoke("evaluate", str(run_path), str(qrels_path))
    assert result.exit_code == 0, result.output
    report = json.loads(result.output)
    assert report["per_topic"]["1_0"]["mrr@10"] == 0.5
    assert report["topics"] == 1


def test_evaluate_disjoint_topics_fails(tmp_path: Path) -> None:
    """Test that a run sharing no topic with the qrels aborts."""
    run_path, qrels_path = tmp_path / "run.txt", tmp_path / "qrels.txt"
    run_path.write_text("x Q0 a 1 0.9 t\n", encoding="utf-8")
    qrels_path.write_text("y 0 a 1\n", encoding="utf-8")
    result = invoke("evaluate", str(run_path), str(qrels_path))
    assert result.exit_code == 1
    assert "share no evaluable topic" in result.output


def test_config_file_supplies_defaults(data_dir: Path, tmp_path: Path) -> None:
    """Test that a TOML [run] table fills options and the command line wins."""
    config = tmp_path / "toploc.toml"
    config.write_text(
        '[run]\nmode = "toploc-hnsw"\nef = 16\nup = 3.0\n'
        f'index = "{data_dir / "hnsw.idx"}"\n',
        encoding="utf-8",
    )
    report_path = tmp_path / "report.json"
    result = invoke("--config", str(config), "run", "--up", "2", *workload_args(data_dir),
                    "--out-run", str(tmp_path / "run.txt"), "--out-report", str(report_path))
    assert result.exit_code == 0, result.output
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert report["config"]["mode"] == "toploc-hnsw"
    assert report["config"]["up"] == 2.0
    assert report["conversations"][0]["opening_ef"] == 32


@pytest.mark.parametrize("shell", ["bash", "zsh", "fish"])
def test_completion_script(shell: str) -> None:
    """Test that each supported shell gets a script bound to the program name."""
    result = invoke("completion", shell)
    assert result.exit_code == 0
    assert "_TOPLOC_SEARCH_COMPLETE" in result.output


def test_verbose_flag_enables_info(data_dir: Path, tmp_path: Path) -> None:
    """Test that -v surfaces phase logging on stderr."""
    result = invoke("-v", "run", "--mode", "exact", *workload_args(data_dir),
                    "--out-run", str(tmp_path / "r.txt"), "--out-report", str(tmp_path / "r.json"))
    assert result.exit_code == 0, result.output
    assert "[INFO] Loaded 600 vectors and 4 conversations" in result.output


def test_run_failure_keeps_earlier_output(data_dir: Path, tmp_path: Path) -> None:
    """Test that a failing run leaves files from an earlier invocation untouched."""
    old_run, bad_baseline = tmp_path / "old.run", tmp_path / "bad.json"
    old_run.write_text("1_0 Q0 a 1 0.9 earlier\n", encoding="utf-8")
    bad_baseline.write_text('{"mean": {"time_ms": 1.0}}', encoding="utf-8")
    result = invoke("run", "--mode", "exact", *workload_args(data_dir),
                    "--baseline-report", str(bad_baseline),
                    "--out-run", str(old_run), "--out-report", str(tmp_path / "r.json"))
    assert result.exit_code == 1
    assert "not a timing report" in result.output
    assert old_run.read_text(encoding="utf-8") == "1_0 Q0 a 1 0.9 earlier\n"


def test_run_removes_run_file_when_report_write_fails(data_dir: Path, tmp_path: Path) -> None:
    """Test that the run file this command wrote goes when the report cannot be written."""
    run_path, report_path = tmp_path / "r.run", tmp_path / "report.json"
    report_path.mkdir()
    result = invoke("run", "--mode", "exact", *workload_args(data_dir),
                    "--out-run", str(run_path), "--out-report", str(report_path))
    assert result.exit_code == 1
    assert not run_path.exists()
    assert report_path.is_dir()


def test_gen_synth_failure_removes_only_its_own_files(tmp_path: Path) -> None:
    """Test that files written before the failure go and earlier files stay."""
    (tmp_path / "queries.tlvec").mkdir()
    (tmp_path / "qrels.txt").write_text("earlier\n", encoding="utf-8")
    result = invoke("gen-synth", "--out-dir", str(tmp_path), *SYNTH_ARGS)
    assert result.exit_code == 1
    assert "✗ Error" in result.output
    assert not (tmp_path / "corpus.tlvec").exists()
    assert (tmp_path / "qrels.txt").read_text(encoding="utf-8") == "earlier\n"


@pytest.mark.parametrize(
    ("mode", "extra"),
    [
        ("ivf", ["--nprobe", "32"]),
        ("toploc-ivf", ["--nprobe", "4", "--h", "32"]),
        ("toploc-ivf-plus", ["--nprobe", "17", "--h", "17", "--alpha", "0.5"]),
    ],
)
def test_run_parameter_above_p_is_usage_error(
    data_dir: Path, tmp_path: Path, mode: str, extra: list[str]
) -> None:
    """Test that nprobe or h above the index's 16 centroids exits 2 before searching."""
    run_path = tmp_path / "run.txt"
    result = invoke("run", "--mode", mode, "--index", str(data_dir / "ivf.idx"), *extra,
                    *workload_args(data_dir),
                    "--out-run", str(run_path), "--out-report", str(tmp_path / "r.json"))
    assert result.exit_code == 2
    assert "exceeds the 16 centroids" in result.output
    assert not run_path.exists()


def test_sweep_fixed_h_above_p_is_usage_error(data_dir: Path, tmp_path: Path) -> None:
    """Test that a fixed h beyond p is rejected while the swept nprobe is not checked."""
    result = invoke("sweep", "--mode", "toploc-ivf", "--index", str(data_dir / "ivf.idx"),
                    "--h", "64", *workload_args(data_dir), "--param", "nprobe",
                    "--values", "1,2", "--out-csv", str(tmp_path / "s.csv"))
    assert result.exit_code == 2
    assert "--h 64 exceeds" in result.output


def write_cast_workload(root: Path) -> list[str]:
    """Hand-built workload shaped like TREC CAsT; returns the topic ids.

    Twenty conversations numbered 31..50 with 9 to 11 turns each, 1-based
    turn ids, unpadded document ids and graded qrels, one grade outside the
    0-2 scale.
    """
    rng = np.random.default_rng(31)
    centers = rng.standard_normal((20, 8))
    docs = np.concatenate([c + 0.3 * rng.standard_normal((20, 8)) for c in centers])
    corpus = VectorStore(docs.astype(np.float32), tuple(f"CAR_{i}" for i in range(400)))

    conversations: list[Conversation] = []
    topics: list[str] = []
    queries: list[np.ndarray] = []
    for number, center in enumerate(centers):
        cid = str(31 + number)
        turns: list[Turn] = []
        for position in range(9 + number % 3):
            q = (center + 0.3 * rng.standard_normal(8)).astype(np.float32)
            turns.append(Turn(str(position + 1), q))
            topics.append(f"{cid}_{position + 1}")
            queries.append(q)
        conversations.append(Conversation(cid, tuple(turns)))
    write_vectors(corpus, root / "corpus.tlvec")
    write_vectors(VectorStore(np.stack(queries), tuple(topics)), root / "queries.tlvec")
    write_conversations(conversations, root / "conversations.tsv")

    lines: list[str] = []
    for topic, q in zip(topics, queries, strict=True):
        best = np.argsort(-(corpus.data @ q), kind="stable")[:3]
        grades = (3 if topic == "31_1" else 2, 1, 0)
        lines += [f"{topic} 0 {corpus.ids[row]} {g}" for row, g in zip(best, grades, strict=True)]
    (root / "qrels.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return topics


def test_cast_shaped_workload_end_to_end(tmp_path: Path) -> None:
    """Test build, run with a baseline and evaluate on a CAsT-shaped workload."""
    topics = write_cast_workload(tmp_path)
    data = workload_args(tmp_path) + ["--qrels", str(tmp_path / "qrels.txt")]
    index = tmp_path / "ivf.idx"
    assert invoke("build", "ivf", "--store", str(tmp_path / "corpus.tlvec"), "--p", "20",
                  "--seed", "1", "--out", str(index)).exit_code == 0
    baseline = tmp_path / "ivf.json"
    result = invoke("run", "--mode", "ivf", "--index", str(index), "--nprobe", "4", *data,
                    "--out-run", str(tmp_path / "ivf.run"), "--out-report", str(baseline))
    assert result.exit_code == 0, result.output
    assert "outside the 0-2 scale" in result.output

    run_path, report_path = tmp_path / "toploc.run", tmp_path / "toploc.json"
    result = invoke("run", "--mode", "toploc-ivf-plus", "--index", str(index),
                    "--nprobe", "4", "--h", "8", "--alpha", "0.5", "--batch-size", "4", *data,
                    "--baseline-report", str(baseline),
                    "--out-run", str(run_path), "--out-report", str(report_path))
    assert result.exit_code == 0, result.output
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert {"per_topic", "mean", "method", "speedup_vs", "config", "metrics"} <= set(report)
    assert report["method"] == "toploc-ivf-plus"
    assert set(report["speedup_vs"]) == {"ivf"}
    assert report["config"]["batch_size"] == 4
    assert sorted(report["per_topic"]) == sorted(topics)
    assert len(topics) == 20 * 10 - 1
    assert report["per_topic"]["31_1"]["centroid_evaluations"] == 20
    assert report["per_topic"]["31_2"]["centroid_evaluations"] in (8, 28)
    assert sorted(report["metrics"]["per_topic"]) == sorted(topics)

    result = invoke("evaluate", str(run_path), str(tmp_path / "qrels.txt"))
    assert result.exit_code == 0, result.output
    evaluated = json.loads(result.output[result.output.index("{"):])
    assert evaluated["per_topic"] == report["metrics"]["per_topic"]
    assert evaluated["mean"] == report["metrics"]["mean"]
    assert evaluated["topics"] == len(topics)
