"""Command-line interface: index, run, eval, rerank, overlap."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evaluation, rerank
from .backend import (
    DEFAULT_API_KEY_ENV,
    DEFAULT_ENDPOINT,
    DEFAULT_MODEL,
    CachedBackend,
    HTTPBackend,
    HTTPEmbeddingBackend,
    ReplayBackend,
    ReplayEmbeddingBackend,
    ResponseCache,
    Transcript,
    parse_stage_assignments,
    stage_backends,
)
from .bm25 import InvertedIndex, build_index
from .corpus import Corpus, ingest_jsonl
from .errors import ConfigError, PipelineError, SureError
from .sure import (
    DEFAULT_K,
    DEFAULT_N,
    METHODS,
    PredictionTrace,
    expected_sure_calls,
    run_base,
    run_generic_sum,
    run_mcq,
    run_no_retrieval,
    run_sure,
)

logger = logging.getLogger("sure_qa")


class CountingBackend:
    """Counts calls that reach the wrapped backend (i.e. cache misses)."""

    def __init__(self, inner):
        self.inner = inner
        self.name = inner.name
        self.model = inner.model
        self.max_tokens = getattr(inner, "max_tokens", None)
        self.count = 0
        self._lock = threading.Lock()

    def complete(self, request):
        with self._lock:
            self.count += 1
        return self.inner.complete(request)


@dataclass
class RunConfig:
    corpus: str | None
    dataset: str
    out: str
    method: str = "sure"
    n: int = DEFAULT_N
    k: int = DEFAULT_K
    index: str | None = None
    backend: str = "openai"
    stage_backend: list[str] = field(default_factory=list)
    backends_file: str | None = None
    model: str | None = None
    endpoint: str | None = None
    api_key_env: str = DEFAULT_API_KEY_ENV
    max_tokens: int | None = None
    cache_dir: str | None = None
    transcript: list[str] = field(default_factory=list)
    seed: int = 0
    subsample: int | None = None
    shots: str | None = None
    num_shots: int | None = None
    parallel: int = 1

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {list(METHODS)}")
        if self.method == "sure" and self.k < 2:
            raise ConfigError("method 'sure' requires K >= 2")
        if self.method == "mcq" and self.k < 1:
            raise ConfigError("method 'mcq' requires K >= 1")
        if self.method != "no-retrieval":
            if self.n < 1:
                raise ConfigError("N must be >= 1 for retrieval methods")
            if not self.corpus:
                raise ConfigError(f"method {self.method!r} needs --corpus")
        if self.parallel < 1:
            raise ConfigError("--parallel must be >= 1")
        if self.shots and self.method in ("generic-sum",):
            raise ConfigError("few-shot examples are not supported for generic-sum")


@dataclass
class RunStats:
    written: int = 0
    skipped: int = 0
    failed: int = 0
    backend_calls: int = 0
    cache_hits: int = 0


# -- backend construction --------------------------------------------------


def _backend_specs(cfg) -> dict[str, dict]:
    specs = {
        "openai": {"kind": "http"},
        "replay": {"kind": "replay"},
    }
    if cfg.backends_file:
        try:
            extra = json.loads(Path(cfg.backends_file).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read backends file {cfg.backends_file}: {exc}") from exc
        if not isinstance(extra, dict):
            raise ConfigError("backends file must map names to backend specs")
        specs.update(extra)
    return specs


def _make_backend(name: str, spec: dict, cfg, transcript_cache: dict):
    kind = spec.get("kind")
    model = spec.get("model") or cfg.model or DEFAULT_MODEL
    max_tokens = spec.get("max_tokens", cfg.max_tokens)
    if kind == "http":
        return HTTPBackend(
            model=model,
            endpoint=spec.get("endpoint") or cfg.endpoint or DEFAULT_ENDPOINT,
            api_key_env=spec.get("api_key_env") or cfg.api_key_env,
            name=name,
            max_tokens=max_tokens,
            max_concurrency=max(8, cfg.parallel * 4),
            require_key=spec.get("require_key", True),
        )
    if kind == "replay":
        paths = spec.get("transcript") or cfg.transcript
        if isinstance(paths, str):
            paths = [paths]
        if not paths:
            if cfg.cache_dir:
                # Cache-only operation: every request must already be cached.
                return None
            raise ConfigError(f"replay backend {name!r} needs --transcript or a cache directory")
        key = tuple(paths)
        if key not in transcript_cache:
            missing = [p for p in paths if not Path(p).exists()]
            if missing:
                raise ConfigError(f"transcript file(s) not found: {missing}")
            transcript_cache[key] = Transcript.load(*paths)
        return ReplayBackend(transcript_cache[key], model=model, name=name, max_tokens=max_tokens)
    raise ConfigError(f"backend {name!r}: unknown kind {kind!r} (expected 'http' or 'replay')")


def build_stage_backends(cfg) -> tuple[dict, list[CountingBackend], list[CachedBackend]]:
    """Construct and wire every backend the run uses, failing fast on bad config."""
    specs = _backend_specs(cfg)
    assignments = parse_stage_assignments(cfg.stage_backend)
    names = {cfg.backend, *assignments.values()}
    unknown = sorted(n for n in names if n not in specs)
    if unknown:
        raise ConfigError(f"unknown backend(s) {unknown}; known: {sorted(specs)}")
    cache = ResponseCache(cfg.cache_dir) if cfg.cache_dir else None
    transcripts: dict = {}
    built, counters, cached = {}, [], []
    for name in sorted(names):
        backend = _make_backend(name, specs[name], cfg, transcripts)
        if backend is not None:
            backend = CountingBackend(backend)
            counters.append(backend)
        if cache is not None:
            model = specs[name].get("model") or cfg.model or DEFAULT_MODEL
            backend = CachedBackend(backend, cache, model=model, name=name)
            if specs[name].get("max_tokens", cfg.max_tokens) is not None:
                backend.max_tokens = specs[name].get("max_tokens", cfg.max_tokens)
            cached.append(backend)
        built[name] = backend
    resolved = stage_backends({"backends": built, "default": cfg.backend, "stages": assignments})
    return resolved, counters, cached


# -- helpers ---------------------------------------------------------------


def load_shots(path: str, num: int | None, rng: np.random.Generator) -> list[tuple[str, str]]:
    shots = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            answer = rec.get("answer")
            if answer is None:
                answers = rec.get("answers") or []
                answer = answers[0] if answers else None
            if not rec.get("question") or answer is None:
                raise ConfigError(f"{path}:{lineno}: shot needs question and answer")
            shots.append((rec["question"], answer))
    if not shots:
        raise ConfigError(f"no few-shot examples in {path}")
    if num is not None:
        if num > len(shots):
            raise ConfigError(f"asked for {num} shots but {path} has {len(shots)}")
        picked = np.sort(rng.choice(len(shots), size=num, replace=False))
        shots = [shots[i] for i in picked]
    return shots


def _load_index(corpus: Corpus, index_path: str | None) -> InvertedIndex:
    if index_path:
        index = InvertedIndex.load(index_path)
        index.check_corpus(corpus)
        return index
    return build_index(corpus)


def _existing_ids(path: Path) -> set[str]:
    ids = set()
    if path.exists():
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                try:
                    ids.add(str(json.loads(line)["id"]))
                except (json.JSONDecodeError, KeyError):
                    # A torn final line from a killed run is dropped on resume.
                    continue
    return ids


def _repair_tail(path: Path) -> None:
    """Drop a partial trailing line left by an interrupted append."""
    if not path.exists():
        return
    data = path.read_bytes()
    if data and not data.endswith(b"\n"):
        cut = data.rfind(b"\n")
        path.write_bytes(data[: cut + 1] if cut >= 0 else b"")


def _run_one(cfg: RunConfig, example, index, corpus, stages, shots) -> PredictionTrace:
    q, qid = example.question, example.id
    if cfg.method == "sure":
        trace = run_sure(q, index, corpus, cfg.n, cfg.k, stages, shots, qid, max_workers=min(cfg.parallel, 4))
        expected = expected_sure_calls(len(trace.candidates))
        if trace.call_count != expected:
            raise PipelineError(f"call-count audit failed: {trace.call_count} != {expected}", trace)
        trace.extra["call_audit"] = {"calls": trace.call_count, "expected": expected}
        return trace
    if cfg.method == "base":
        return run_base(q, index, corpus, cfg.n, stages["baseline"], shots, qid)
    if cfg.method == "no-retrieval":
        return run_no_retrieval(q, stages["baseline"], shots, qid)
    if cfg.method == "generic-sum":
        return run_generic_sum(q, index, corpus, cfg.n, stages, qid)
    return run_mcq(q, index, corpus, cfg.n, cfg.k, stages, shots, qid)


# -- commands --------------------------------------------------------------


def cmd_index(corpus_path: str, out: str, k1: float = 1.2, b: float = 0.75) -> InvertedIndex:
    corpus = ingest_jsonl(corpus_path)
    index = build_index(corpus, k1, b)
    index.save(out)
    return index


def cmd_run(cfg: RunConfig) -> RunStats:
    """Run one method over a dataset, appending one trace line per question.

    Questions whose id already appears in ``cfg.out`` are skipped, so an
    interrupted run can be resumed with the same command. Failures go to
    ``<out>.errors.jsonl`` and are retried on the next invocation.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    stages, counters, cached = build_stage_backends(cfg)

    examples = evaluation.load_dataset(cfg.dataset)
    if cfg.subsample is not None:
        examples = evaluation.subsample(examples, cfg.subsample, rng)
    shots = load_shots(cfg.shots, cfg.num_shots, rng) if cfg.shots else None

    corpus = index = None
    if cfg.method != "no-retrieval":
        corpus = ingest_jsonl(cfg.corpus)
        index = _load_index(corpus, cfg.index)

    out = Path(cfg.out)
    _repair_tail(out)
    done = _existing_ids(out)
    todo = [ex for ex in examples if ex.id not in done]
    stats = RunStats(skipped=len(examples) - len(todo))
    err_path = out.with_name(out.name + ".errors.jsonl")

    def work(example):
        try:
            return example, _run_one(cfg, example, index, corpus, stages, shots), None
        except PipelineError as exc:
            return example, exc.trace, exc
        except SureError as exc:
            return example, None, exc

    with open(out, "a", encoding="utf-8") as fh:
        if cfg.parallel > 1:
            pool = ThreadPoolExecutor(max_workers=cfg.parallel)
            results = pool.map(work, todo)
        else:
            pool = None
            results = map(work, todo)
        try:
            for example, trace, error in results:
                if error is None:
                    fh.write(trace.to_json() + "\n")
                    fh.flush()
                    stats.written += 1
                    continue
                stats.failed += 1
                logger.error("question %s failed: %s", example.id, error)
                record = {"id": example.id, "error": str(error)}
                if trace is not None:
                    record["partial_trace"] = trace.to_dict()
                with open(err_path, "a", encoding="utf-8") as efh:
                    efh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
        finally:
            if pool is not None:
                pool.shutdown(wait=True)

    stats.backend_calls = sum(c.count for c in counters)
    stats.cache_hits = sum(c.hits for c in cached)
    return stats


def cmd_eval(trace_paths: Sequence[str], dataset: str, seed: int = 0, iterations: int = 1000,
             ci: bool = True, out: str | None = None) -> list[evaluation.MetricsReport]:
    examples = evaluation.load_dataset(dataset)
    rng = np.random.default_rng(seed)
    reports = [evaluation.evaluate_run(p, examples, ci, iterations, rng) for p in trace_paths]
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            for report in reports:
                fh.write(json.dumps(report.summary_record(), sort_keys=True) + "\n")
    return reports


def _read_trace_objects(path: str) -> list[PredictionTrace]:
    return [PredictionTrace.from_dict(r) for r in evaluation.read_traces(path)]


def cmd_rerank(trace_path: str, cfg: RunConfig, mode: str = "tfidf", key: str = "sure",
               embed_backend=None) -> RunStats:
    if mode not in rerank.MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {list(rerank.MODES)}")
    if key not in rerank.KEYS:
        raise ConfigError(f"unknown key {key!r}; choose from {list(rerank.KEYS)}")
    if mode == "embedding" and embed_backend is None:
        raise ConfigError("embedding mode needs --embed-backend")
    if not cfg.corpus:
        raise ConfigError("rerank needs --corpus")
    stages, counters, cached = build_stage_backends(cfg)
    corpus = ingest_jsonl(cfg.corpus)
    index = _load_index(corpus, cfg.index)
    traces = _read_trace_objects(trace_path)
    out = Path(cfg.out)
    done = _existing_ids(out)
    stats = RunStats()
    with open(out, "a", encoding="utf-8") as fh:
        for src in traces:
            if src.id in done:
                stats.skipped += 1
                continue
            try:
                t = rerank.top1_pipeline(src.question, index, corpus, cfg.n, src, mode, stages, key,
                                         embed_backend, src.id)
            except PipelineError as exc:
                stats.failed += 1
                logger.error("question %s failed: %s", src.id, exc)
                continue
            fh.write(t.to_json() + "\n")
            stats.written += 1
    stats.backend_calls = sum(c.count for c in counters)
    stats.cache_hits = sum(c.hits for c in cached)
    return stats


def cmd_overlap(trace_path: str, out: str, table: str | None = None) -> dict:
    traces = [t for t in _read_trace_objects(trace_path) if len(t.candidates) >= 2 and t.summaries]
    sizes = Counter(len(t.candidates) for t in traces)
    k = sizes.most_common(1)[0][0] if sizes else 0
    matrices = []
    with open(out, "w", encoding="utf-8") as fh:
        for t in traces:
            m = rerank.overlap_matrix(t.candidates, t.summaries)
            fh.write(json.dumps({"id": t.id, "candidates": t.candidates, "matrix": m}, sort_keys=True) + "\n")
            if len(t.candidates) == k:
                matrices.append(m)
    summary = rerank.summarize_overlap(matrices)
    text = rerank.format_overlap_table(summary)
    if table:
        Path(table).write_text(text + "\n", encoding="utf-8")
    return summary


# -- argument parsing ------------------------------------------------------


def _add_backend_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", default="openai", help="default backend name (openai, replay, or from --backends-file)")
    p.add_argument("--stage-backend", action="append", default=[], metavar="STAGE=NAME",
                   help="assign a backend to one stage: candidates, summarize, validity, ranking, baseline")
    p.add_argument("--backends-file", help="JSON file mapping backend names to {kind, model, endpoint, ...}")
    p.add_argument("--model", help=f"model name for built-in backends (default {DEFAULT_MODEL})")
    p.add_argument("--endpoint", help="chat-completions URL for the built-in http backend")
    p.add_argument("--api-key-env", default=DEFAULT_API_KEY_ENV, help="environment variable holding the API key")
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--cache-dir", help="directory for the response cache")
    p.add_argument("--transcript", action="append", default=[], help="replay transcript or trace file (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sure-qa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="build a BM25 index file from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)

    p = sub.add_parser("run", help="run a QA method over a dataset")
    p.add_argument("--corpus")
    p.add_argument("--index", help="prebuilt index (built in memory when omitted)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--method", choices=METHODS, default="sure")
    p.add_argument("--n", type=int, default=DEFAULT_N)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    _add_backend_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subsample", type=int, help="evaluate a seeded random subset of this size")
    p.add_argument("--shots", help="few-shot examples file ({question, answer} per line)")
    p.add_argument("--num-shots", type=int, help="draw this many shots with the seeded generator")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score one or more trace files")
    p.add_argument("--trace", action="append", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--no-ci", action="store_true")
    p.add_argument("--out", help="write JSONL summary records here")

    p = sub.add_parser("rerank", help="top-1 passage reranking from traces")
    p.add_argument("--trace", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--index")
    p.add_argument("--n", type=int, default=DEFAULT_N)
    p.add_argument("--mode", choices=rerank.MODES, default="tfidf")
    p.add_argument("--key", choices=rerank.KEYS, default="sure")
    _add_backend_args(p)
    p.add_argument("--embed-backend", choices=("http", "replay"))
    p.add_argument("--embed-model")
    p.add_argument("--embed-endpoint")
    p.add_argument("--embed-transcript")
    p.add_argument("--out", required=True)

    p = sub.add_parser("overlap", help="TF-IDF candidate/summary overlap from SuRe traces")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--table", help="also write the plain-text table here")
    return parser


def _config_from_args(args) -> RunConfig:
    return RunConfig(
        corpus=args.corpus,
        dataset=getattr(args, "dataset", ""),
        out=args.out,
        method=getattr(args, "method", "base"),
        n=args.n,
        k=getattr(args, "k", DEFAULT_K),
        index=args.index,
        backend=args.backend,
        stage_backend=args.stage_backend,
        backends_file=args.backends_file,
        model=args.model,
        endpoint=args.endpoint,
        api_key_env=args.api_key_env,
        max_tokens=args.max_tokens,
        cache_dir=args.cache_dir,
        transcript=args.transcript,
        seed=getattr(args, "seed", 0),
        subsample=getattr(args, "subsample", None),
        shots=getattr(args, "shots", None),
        num_shots=getattr(args, "num_shots", None),
        parallel=getattr(args, "parallel", 1),
    )


def _embed_backend(args):
    if args.embed_backend is None:
        return None
    if args.embed_backend == "http":
        kwargs = {"api_key_env": args.api_key_env}
        if args.embed_model:
            kwargs["model"] = args.embed_model
        if args.embed_endpoint:
            kwargs["endpoint"] = args.embed_endpoint
        return HTTPEmbeddingBackend(**kwargs)
    if not args.embed_transcript:
        raise ConfigError("--embed-backend replay needs --embed-transcript")
    return ReplayEmbeddingBackend.load(args.embed_transcript, args.embed_model or "replay-embed")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "index":
            index = cmd_index(args.corpus, args.out, args.k1, args.b)
            print(f"indexed {index.doc_count} passages, {len(index.postings)} terms -> {args.out}")
            return 0
        if args.command == "run":
            stats = cmd_run(_config_from_args(args))
            print(f"written={stats.written} skipped={stats.skipped} failed={stats.failed} "
                  f"backend_calls={stats.backend_calls} cache_hits={stats.cache_hits}", file=sys.stderr)
            return 1 if stats.failed else 0
        if args.command == "eval":
            reports = cmd_eval(args.trace, args.dataset, args.seed, args.iterations, not args.no_ci, args.out)
            print(evaluation.format_report(reports))
            return 0
        if args.command == "rerank":
            cfg = _config_from_args(args)
            stats = cmd_rerank(args.trace, cfg, args.mode, args.key, _embed_backend(args))
            print(f"written={stats.written} skipped={stats.skipped} failed={stats.failed}", file=sys.stderr)
            return 1 if stats.failed else 0
        if args.command == "overlap":
            summary = cmd_overlap(args.trace, args.out, args.table)
            print(rerank.format_overlap_table(summary))
            return 0
    except (SureError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
