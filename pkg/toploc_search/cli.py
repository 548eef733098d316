"""CLI entry point for toploc-search.

Note: This code was generated with assistance from AI coding tools
and has been reviewed and tested by a human.
"""

import csv
import json
import time
import tomllib
from collections.abc import Callable
from dataclasses import replace
from pathlib import Path
from typing import Any, NoReturn

import click
import numpy as np

from toploc_search import __version__
from toploc_search.completion import completion_command
from toploc_search.clustering import DEFAULT_MAX_ITERS
from toploc_search.engine import ConversationEngine, EngineConfig, SearchMode
from toploc_search.errors import InvalidInputError, ParseError, ToplocError
from toploc_search.evaluation import (
    METRIC_NAMES,
    Gain,
    TimingReport,
    evaluate_run,
    recall_at,
    time_conversations,
)
from toploc_search.hnsw_index import (
    DEFAULT_EF_CONSTRUCTION,
    DEFAULT_M,
    HnswGraph,
    build_hnsw,
    load_hnsw,
    save_hnsw,
)
from toploc_search.io_formats import (
    Conversation,
    SyntheticSpec,
    atomic_write_text,
    gen_synthetic,
    read_conversations,
    read_qrels,
    read_run,
    read_vectors,
    write_conversations,
    write_qrels,
    write_run,
    write_vectors,
)
from toploc_search.ivf_index import IvfIndex, build_ivf, load_ivf, save_ivf
from toploc_search.logging_config import get_logger, setup_logging
from toploc_search.vector_core import ScoredHit, VectorStore, exact_search

logger = get_logger(__name__)

SWEEP_PARAMS: dict[str, tuple[SearchMode, ...]] = {
    "nprobe": (SearchMode.IVF, SearchMode.TOPLOC_IVF, SearchMode.TOPLOC_IVF_PLUS),
    "h": (SearchMode.TOPLOC_IVF, SearchMode.TOPLOC_IVF_PLUS),
    "alpha": (SearchMode.TOPLOC_IVF_PLUS,),
    "ef": (SearchMode.HNSW, SearchMode.TOPLOC_HNSW),
    "up": (SearchMode.TOPLOC_HNSW,),
}
INTEGER_PARAMS = frozenset({"nprobe", "h", "ef"})
SYNTH_FILES = ("corpus.tlvec", "queries.tlvec", "conversations.tsv", "qrels.txt")

# Config keys use the option spelling; these map it to click's parameter names.
_WORKLOAD_ALIASES = {
    "index": "index_path",
    "store": "store_path",
    "queries": "queries_path",
    "conversations": "conversations_path",
    "qrels": "qrels_path",
}
CONFIG_ALIASES: dict[str, dict[str, str]] = {
    "build": {"store": "store_path", "out": "out_path"},
    "run": _WORKLOAD_ALIASES,
    "sweep": {**_WORKLOAD_ALIASES, "values": "values_text"},
    "evaluate": {},
    "gen-synth": {},
}


def _load_config_file(ctx: click.Context, _param: click.Parameter, value: Path | None) -> None:
    """Feed a TOML file's per-command tables into click's default_map."""
    if value is None:
        return
    try:
        with value.open("rb") as handle:
            data = tomllib.load(handle)
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise click.BadParameter(f"cannot read config file: {e}") from e
    unknown = sorted(set(data) - set(CONFIG_ALIASES))
    if unknown:
        logger.warning("Ignoring unknown config sections: %s", ", ".join(unknown))
    ctx.default_map = {}
    for section, aliases in CONFIG_ALIASES.items():
        if section not in data:
            continue
        table: dict[str, Any] = {}
        for key, setting in data[section].items():
            name = key.replace("-", "_")
            table[aliases.get(name, name)] = setting
        ctx.default_map[section] = table


def _fail(error: Exception, written: list[Path] | None = None) -> NoReturn:
    """Report ``error`` and abort, removing outputs this command already completed.

    Files are written atomically, so anything not in ``written`` was either
    never touched or predates this invocation and is left alone.
    """
    for path in written or ():
        path.unlink(missing_ok=True)
        logger.debug("Removed partial output %s", path)
    logger.debug("Full traceback:", exc_info=error)
    click.echo(f"✗ Error: {error}", err=True)
    raise click.Abort()


@click.group()
@click.option(
    "--config",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    callback=_load_config_file,
    is_eager=True,
    expose_value=False,
    help="TOML file with [build], [run], [sweep], [evaluate] and [gen-synth] defaults",
)
@click.option(
    "-v",
    "--verbose",
    count=True,
    help="Enable verbose output (use -v for INFO, -vv for DEBUG, -vvv for TRACE)",
)
@click.version_option(version=__version__)
def main(verbose: int) -> None:
    """Conversational dense retrieval with topical-locality caching.

    Builds IVF and HNSW indexes, answers multi-turn conversations with plain
    or TopLoc search, and evaluates the resulting runs.

    \b
    Examples:

    \b
        # Generate a small synthetic workload
        toploc-search gen-synth --n 20000 --d 64 --out-dir data/

    \b
        # Build an IVF index and run TopLoc-IVF+ over the conversations
        toploc-search build ivf --store data/corpus.tlvec --p 256 --out data/ivf.idx
        toploc-search run --mode toploc-ivf-plus --index data/ivf.idx \\
            --store data/corpus.tlvec --queries data/queries.tlvec \\
            --conversations data/conversations.tsv --nprobe 16 --h 64 --alpha 0.2 \\
            --out-run run.txt --out-report report.json --qrels data/qrels.txt

    \b
        # Trade-off table over nprobe
        toploc-search sweep --mode ivf --param nprobe --values 1,2,4,8,16 ...
    """
    setup_logging(verbose)


@main.command()
@click.argument("index_kind", type=click.Choice(["ivf", "hnsw"]))
@click.option("--store", "store_path", required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Vector file to index")
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path),
              help="Index file to write")
@click.option("--p", "p", type=int, default=None, help="Number of IVF centroids")
@click.option("--max-iters", type=int, default=DEFAULT_MAX_ITERS, show_default=True,
              help="k-means iteration cap")
@click.option("--m", "m", type=int, default=DEFAULT_M, show_default=True,
              help="HNSW neighbors per node (2M on layer 0)")
@click.option("--ef-construction", type=int, default=DEFAULT_EF_CONSTRUCTION,
              show_default=True, help="HNSW candidate list size during insertion")
@click.option("--seed", type=int, default=0, show_default=True, help="Random seed")
def build(
    index_kind: str,
    store_path: Path,
    out_path: Path,
    p: int | None,
    max_iters: int,
    m: int,
    ef_construction: int,
    seed: int,
) -> None:
    """Build an IVF or HNSW index over a vector file.

    \b
    Examples:
        toploc-search build ivf --store corpus.tlvec --p 4096 --out ivf.idx
        toploc-search build hnsw --store corpus.tlvec --m 16 --out hnsw.idx
    """
    if index_kind == "ivf" and p is None:
        raise click.UsageError("build ivf requires --p")
    try:
        store = read_vectors(store_path)
        started = time.perf_counter()
        if index_kind == "ivf":
            assert p is not None
            ivf = build_ivf(store, p, max_iters, seed)
            elapsed = time.perf_counter() - started
            save_ivf(ivf, out_path)
            sizes = ivf.lists.sizes()
            click.echo(f"✓ Built IVF index: p={ivf.p}, n={store.count}, d={store.dim} "
                       f"in {elapsed:.2f}s")
            click.echo(f"  List sizes min/mean/max: {sizes.min()}/{sizes.mean():.1f}/"
                       f"{sizes.max()}")
        else:
            graph = build_hnsw(store, m, ef_construction, seed, show_progress=True)
            elapsed = time.perf_counter() - started
            save_hnsw(graph, out_path)
            per_layer = [len(adjacency) for adjacency in graph.neighbors]
            click.echo(f"✓ Built HNSW graph: M={graph.m}, n={store.count}, "
                       f"layers={graph.max_layer + 1} in {elapsed:.2f}s")
            click.echo(f"  Nodes per layer: {per_layer}")
        click.echo(f"✓ Index written to: {out_path}")
    except (ToplocError, OSError) as e:
        _fail(e)


def engine_options(command: Callable[..., Any]) -> Callable[..., Any]:
    """Options shared by run and sweep."""
    options = [
        click.option("--mode", required=True,
                     type=click.Choice([str(mode) for mode in SearchMode]),
                     help="Search method"),
        click.option("--index", "index_path", default=None,
                     type=click.Path(exists=True, dir_okay=False, path_type=Path),
                     help="IVF or HNSW index file (not needed for exact)"),
        click.option("--store", "store_path", required=True,
                     type=click.Path(exists=True, dir_okay=False, path_type=Path),
                     help="Corpus vector file the index was built from"),
        click.option("--queries", "queries_path", required=True,
                     type=click.Path(exists=True, dir_okay=False, path_type=Path),
                     help="Query embedding vector file"),
        click.option("--conversations", "conversations_path", required=True,
                     type=click.Path(exists=True, dir_okay=False, path_type=Path),
                     help="Conversation file (conversation, turn, embedding id)"),
        click.option("--qrels", "qrels_path", default=None,
                     type=click.Path(exists=True, dir_okay=False, path_type=Path),
                     help="Relevance judgments; adds effectiveness metrics"),
        click.option("--k", type=int, default=10, show_default=True, help="Hits per turn"),
        click.option("--nprobe", type=int, default=None, help="IVF lists probed per turn"),
        click.option("--h", "h", type=int, default=None, help="TopLoc centroid cache size"),
        click.option("--alpha", type=float, default=None,
                     help="TopLoc-IVF+ refresh threshold in [0, 1]"),
        click.option("--ef", type=int, default=None, help="HNSW ef_search"),
        click.option("--up", type=float, default=None,
                     help="TopLoc-HNSW opening-turn ef multiplier"),
        click.option("--threads", type=int, default=1, show_default=True,
                     help="Worker threads; 1 is reproducible-latency mode"),
        click.option("--batch-size", type=int, default=1, show_default=True,
                     help="Conversations answered in lockstep, turn position by position"),
        click.option("--gain", type=click.Choice(["linear", "exponential"]),
                     default="linear", show_default=True, help="NDCG gain function"),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def _engine_config(params: dict[str, Any]) -> EngineConfig:
    """Build and validate the config, turning bad combinations into usage errors."""
    config = EngineConfig(
        mode=SearchMode(params["mode"]),
        index_path=params["index_path"],
        k=params["k"],
        nprobe=params["nprobe"],
        h=params["h"],
        alpha=params["alpha"],
        ef=params["ef"],
        up=params["up"],
        threads=params["threads"],
        batch_size=params["batch_size"],
    )
    try:
        config.validate()
    except InvalidInputError as e:
        raise click.UsageError(str(e)) from e
    return config


def _load_index(config: EngineConfig, store: VectorStore) -> IvfIndex | HnswGraph | None:
    if config.index_path is None:
        return None
    if config.mode.uses_ivf:
        return load_ivf(config.index_path, store)
    return load_hnsw(config.index_path, store)


def _check_index_fits(
    config: EngineConfig, index: IvfIndex | HnswGraph | None, swept: str | None = None
) -> None:
    """Reject nprobe or h above the loaded index's p as a usage error."""
    if not isinstance(index, IvfIndex):
        return
    for name in ("nprobe", "h"):
        value = getattr(config, name)
        if name != swept and value is not None and value > index.p:
            raise click.UsageError(
                f"--{name} {value} exceeds the {index.p} centroids of {config.index_path}"
            )


def _load_workload(
    store_path: Path, queries_path: Path, conversations_path: Path
) -> tuple[VectorStore, list[Conversation]]:
    store = read_vectors(store_path)
    queries = read_vectors(queries_path)
    conversations = read_conversations(conversations_path, queries)
    logger.info("Loaded %d vectors and %d conversations", store.count, len(conversations))
    return store, conversations


def _read_baseline(path: Path) -> tuple[str, float]:
    try:
        report = json.loads(path.read_text(encoding="utf-8"))
        return str(report["method"]), float(report["mean"]["time_ms"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ParseError(path, f"not a timing report ({e})") from e


@main.command()
@engine_options
@click.option("--out-run", required=True, type=click.Path(path_type=Path),
              help="TREC run file to write")
@click.option("--out-report", required=True, type=click.Path(path_type=Path),
              help="JSON report to write")
@click.option("--tag", default=None, help="Run tag (default: the mode name)")
@click.option("--baseline-report", default=None,
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Earlier JSON report; fills speedup_vs")
@click.option("--diagnose", is_flag=True, default=False,
              help="Record the true centroid intersection per TopLoc-IVF turn")
def run(out_run: Path, out_report: Path, tag: str | None, baseline_report: Path | None,
        diagnose: bool, **params: Any) -> None:
    """Answer every conversation and write a run file plus a JSON report.

    \b
    Examples:
        toploc-search run --mode exact --store corpus.tlvec --queries queries.tlvec \\
            --conversations conversations.tsv --out-run exact.run --out-report exact.json
        toploc-search run --mode toploc-hnsw --index hnsw.idx --ef 64 --up 2 ... \\
            --baseline-report hnsw.json
    """
    config = _engine_config(params)
    written: list[Path] = []
    try:
        store, conversations = _load_workload(
            params["store_path"], params["queries_path"], params["conversations_path"]
        )
        qrels = read_qrels(params["qrels_path"]) if params["qrels_path"] else None
        baseline = _read_baseline(baseline_report) if baseline_report else None
        index = _load_index(config, store)
        _check_index_fits(config, index)
        engine = ConversationEngine(config, store, index, diagnose=diagnose)
        timing = time_conversations(engine, conversations, show_progress=True)
        if baseline is not None:
            timing.record_speedup(*baseline)

        ranked_run = timing.to_run()
        report: dict[str, Any] = timing.to_json()
        report["config"] = config.to_json()
        if qrels is not None:
            report["metrics"] = evaluate_run(ranked_run, qrels, params["gain"]).to_json()

        write_run(ranked_run, tag or config.mode, out_run)
        written.append(out_run)
        with atomic_write_text(out_report) as handle:
            json.dump(report, handle, indent=2)
            handle.write("\n")
    except (ToplocError, OSError) as e:
        _fail(e, written)

    click.echo(f"✓ {len(conversations)} conversations, {len(ranked_run)} turns")
    click.echo(f"  Mean {timing.mean_ms:.3f} ms, median {timing.median_ms:.3f} ms per turn")
    click.echo(f"  Similarity evaluations: {timing.similarity_evaluations:,}")
    if config.mode in (SearchMode.TOPLOC_IVF, SearchMode.TOPLOC_IVF_PLUS):
        click.echo(f"  Cache refreshes: {timing.refresh_count}")
    for name, ratio in timing.speedup_vs.items():
        click.echo(f"  Speedup vs {name}: {ratio:.2f}x")
    if "metrics" in report:
        means = report["metrics"]["mean"]
        click.echo("  " + ", ".join(f"{name}={means[name]:.4f}" for name in METRIC_NAMES))
    click.echo(f"✓ Run written to: {out_run}")
    click.echo(f"✓ Report written to: {out_report}")


def _parse_values(param: str, text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise click.UsageError(f"--values must be comma-separated numbers: {e}") from e
    if not values:
        raise click.UsageError("--values is empty")
    if any(b <= a for a, b in zip(values, values[1:], strict=False)):
        raise click.UsageError("--values must be sorted ascending without repeats")
    lowest = values[0]
    if lowest < 0 or (lowest == 0 and param != "alpha"):
        raise click.UsageError("--values must be positive")
    if param in INTEGER_PARAMS and any(v != int(v) for v in values):
        raise click.UsageError(f"--values for {param} must be integers")
    return values


@main.command()
@engine_options
@click.option("--param", required=True, type=click.Choice(sorted(SWEEP_PARAMS)),
              help="Parameter to vary")
@click.option("--values", "values_text", required=True,
              help="Comma-separated ascending values, e.g. 1,2,4,8")
@click.option("--out-csv", required=True, type=click.Path(path_type=Path),
              help="CSV trade-off table to write")
def sweep(param: str, values_text: str, out_csv: Path, **params: Any) -> None:
    """Run one configuration per parameter value and tabulate cost against quality.

    Values the index cannot honour (e.g. nprobe above p) are skipped with a
    warning. Recall is measured against exact search on the same turns.

    \b
    Example:
        toploc-search sweep --mode ivf --index ivf.idx --store corpus.tlvec \\
            --queries queries.tlvec --conversations conversations.tsv \\
            --qrels qrels.txt --param nprobe --values 1,2,4,8,16,32 --out-csv np.csv
    """
    values = _parse_values(param, values_text)
    mode = SearchMode(params["mode"])
    if mode not in SWEEP_PARAMS[param]:
        raise click.UsageError(f"Mode {mode} has no parameter {param}")
    first = int(values[0]) if param in INTEGER_PARAMS else values[0]
    base = _engine_config({**params, param: params[param] if params[param] is not None
                           else first})

    try:
        store, conversations = _load_workload(
            params["store_path"], params["queries_path"], params["conversations_path"]
        )
        qrels = read_qrels(params["qrels_path"]) if params["qrels_path"] else None
        index = _load_index(base, store)
        _check_index_fits(base, index, swept=param)
        reference: dict[str, list[ScoredHit]] = {
            conversation.topic_id(turn): exact_search(store, turn.query, base.k)
            for conversation in conversations
            for turn in conversation.turns
        }

        rows: list[dict[str, Any]] = []
        for value in values:
            typed = int(value) if param in INTEGER_PARAMS else value
            config = replace(base, **{param: typed})
            try:
                config.validate()
                engine = ConversationEngine(config, store, index)
                timing = time_conversations(engine, conversations)
            except InvalidInputError as e:
                logger.warning("Skipping %s=%s: %s", param, typed, e)
                continue
            rows.append(_sweep_row(param, typed, timing, reference, qrels, params["gain"]))
            logger.info("%s=%s: %.3f ms per turn", param, typed, timing.mean_ms)

        fields = [param, "mean_ms", "median_ms", "similarity_evaluations",
                  "centroid_evaluations", "refresh_count", *METRIC_NAMES, "recall@10"]
        with atomic_write_text(out_csv) as handle:
            writer = csv.DictWriter(handle, fieldnames=fields, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    except (ToplocError, OSError) as e:
        _fail(e)

    click.echo(f"✓ {len(rows)} of {len(values)} values swept for {param}")
    click.echo(f"✓ CSV written to: {out_csv}")


def _sweep_row(
    param: str,
    value: float,
    timing: TimingReport,
    reference: dict[str, list[ScoredHit]],
    qrels: dict[str, dict[str, int]] | None,
    gain: Gain,
) -> dict[str, Any]:
    turns = [turn for outcome in timing.outcomes for turn in outcome.turns]
    recall = float(np.mean([
        recall_at(turn.result.hits, reference[turn.topic_id], 10) for turn in turns
    ]))
    row: dict[str, Any] = {
        param: value,
        "mean_ms": f"{timing.mean_ms:.6f}",
        "median_ms": f"{timing.median_ms:.6f}",
        "similarity_evaluations": timing.similarity_evaluations,
        "centroid_evaluations": timing.centroid_evaluations,
        "refresh_count": timing.refresh_count,
        "recall@10": f"{recall:.6f}",
    }
    if qrels is not None:
        metrics = evaluate_run(timing.to_run(), qrels, gain)
        row.update({name: f"{metrics.mean[name]:.6f}" for name in METRIC_NAMES})
    return row


@main.command()
@click.argument("run_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("qrels_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--gain", type=click.Choice(["linear", "exponential"]), default="linear",
              show_default=True, help="NDCG gain function")
def evaluate(run_path: Path, qrels_path: Path, gain: Gain) -> None:
    """Print per-topic and mean MRR@10, NDCG@3 and NDCG@10 as JSON.

    \b
    Example:
        toploc-search evaluate run.txt qrels.txt
    """
    try:
        report = evaluate_run(read_run(run_path), read_qrels(qrels_path), gain)
    except (ToplocError, OSError) as e:
        _fail(e)
    click.echo(json.dumps(report.to_json(), indent=2))


@main.command("gen-synth")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False, path_type=Path),
              help="Directory for the four workload files")
@click.option("--n", type=int, default=SyntheticSpec.n, show_default=True,
              help="Corpus size")
@click.option("--d", type=int, default=SyntheticSpec.d, show_default=True, help="Dimension")
@click.option("--clusters", type=int, default=SyntheticSpec.clusters, show_default=True,
              help="Gaussian clusters in the corpus")
@click.option("--sigma", type=float, default=SyntheticSpec.sigma, show_default=True,
              help="Within-cluster standard deviation")
@click.option("--conversations", type=int, default=SyntheticSpec.conversations,
              show_default=True, help="Number of conversations")
@click.option("--turns", type=int, default=SyntheticSpec.turns_per_conversation,
              show_default=True, help="Turns per conversation")
@click.option("--drift", type=float, default=SyntheticSpec.drift, show_default=True,
              help="Per-turn displacement fraction in [0, 1]")
@click.option("--shift-at", type=int, default=None,
              help="0-based turn position at which conversations jump cluster")
@click.option("--seed", type=int, default=0, show_default=True, help="Random seed")
def gen_synth(out_dir: Path, n: int, d: int, clusters: int, sigma: float, conversations: int,
              turns: int, drift: float, shift_at: int | None, seed: int) -> None:
    """Generate a clustered corpus with topically local conversations.

    Writes corpus.tlvec, queries.tlvec, conversations.tsv and qrels.txt; qrels
    mark each turn's exact top-10 documents with grade 2.
    """
    spec = SyntheticSpec(n=n, d=d, clusters=clusters, sigma=sigma,
                         conversations=conversations, turns_per_conversation=turns,
                         drift=drift, shift_at=shift_at, seed=seed)
    try:
        spec.validate()
    except InvalidInputError as e:
        raise click.UsageError(str(e)) from e

    corpus_path, queries_path, conversations_path, qrels_path = (
        out_dir / name for name in SYNTH_FILES
    )
    written: list[Path] = []
    try:
        workload = gen_synthetic(spec)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_vectors(workload.corpus, corpus_path)
        written.append(corpus_path)
        write_vectors(workload.queries, queries_path)
        written.append(queries_path)
        write_conversations(workload.conversations, conversations_path)
        written.append(conversations_path)
        write_qrels(workload.qrels, qrels_path)
    except (ToplocError, OSError) as e:
        _fail(e, written)

    click.echo(f"✓ Generated {n} vectors (d={d}, {clusters} clusters) and "
               f"{conversations} conversations of {turns} turns")
    click.echo(f"✓ Files written to: {out_dir}")


main.add_command(completion_command)


if __name__ == "__main__":
    main()
