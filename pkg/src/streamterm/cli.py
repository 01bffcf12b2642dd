"""Command-line entry point: ``streamterm <command> ...``.

Exit codes: 0 success, 2 invalid input or configuration, 3 session aborted
(the partial event log is kept).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bench as bench_mod
from .config import RunConfig, RunManifest, api_key, load_config, stage_seed
from .driver import (EchoPolicy, EventLogWriter, InterpreterPolicy, RandomScriptedPolicy, RemoteChatPolicy,
                     TranslatorPolicy, WaitPolicy, assemble_hypothesis, dumps, read_event_log, run_session)
from .embedding import EmbeddingProvider, FileStoreProvider, GoldSpan, MockProvider, OracleProvider, RemoteProvider
from .errors import ConfigError, SessionAborted, StreamTermError
from .glossary import Glossary, TermIndex, build_index, load_glossary, load_index, save_index
from .metrics import (GoldOccurrence, containing_chunks, evaluate, load_occurrences, load_references,
                      recall_at_k)
from .retriever import RetrievedSet, retrieve_for_chunk
from .stream import chunk_count, chunk_stream, load_wav
from .synth import (dedup_candidates, load_alignment, load_phrases, pair_records, pair_windows,
                    synth_sst_instance, term_duration_stats)

log = logging.getLogger("streamterm")

DEFAULT_DIM = 64


# --- component factories ---------------------------------------------------

def term_provider(cfg: RunConfig, dim: int | None = None) -> EmbeddingProvider:
    p = cfg.provider
    d = dim or p.dim or DEFAULT_DIM
    if p.kind == "file":
        if not (p.matrix and p.manifest):
            raise ConfigError("file provider needs provider.matrix and provider.manifest")
        return FileStoreProvider(p.matrix, p.manifest)
    if p.kind == "remote":
        if not p.url:
            raise ConfigError("remote provider needs provider.url")
        return RemoteProvider(p.url, d, p.timeout_s, p.retries, api_key=api_key())
    return MockProvider(d, p.seed)


def load_gold_spans(path: str | Path, glossary: Glossary) -> list[GoldSpan]:
    """``{"term" | "term_id", "start_s", "end_s"}`` per line; a ``term`` text wins over ``term_id``."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if "term" in rec:
                    e = glossary.find(rec["term"])
                    if e is None:
                        raise ValueError(f"term {rec['term']!r} is not in the glossary")
                    tid = e.term_id
                else:
                    tid = int(rec["term_id"])
                    glossary[tid]
                out.append(GoldSpan(tid, float(rec["start_s"]), float(rec["end_s"])))
            except (ValueError, KeyError, IndexError) as exc:
                raise ConfigError(f"{path}: line {lineno}: {exc}") from exc
    return out


def window_provider(cfg: RunConfig, index: TermIndex) -> EmbeddingProvider:
    p = cfg.provider
    if p.kind == "oracle":
        if not p.gold_spans:
            raise ConfigError("oracle provider needs provider.gold_spans")
        spans = load_gold_spans(p.gold_spans, index.glossary)
        return OracleProvider(index.vectors, spans, MockProvider(index.dim, p.seed), null_seed=p.seed)
    prov = term_provider(cfg, index.dim)
    if prov.dim != index.dim:
        raise ConfigError(f"provider dim {prov.dim} does not match index dim {index.dim}")
    return prov


def make_policy(cfg: RunConfig) -> TranslatorPolicy:
    p = cfg.policy
    common = {"temperature": cfg.temperature, "top_p": cfg.top_p, "top_k": cfg.top_k,
              "seed": stage_seed(cfg.seed, "policy")}
    if p.kind == "wait":
        return WaitPolicy(**common)
    if p.kind == "echo":
        return EchoPolicy(**common)
    if p.kind == "random":
        return RandomScriptedPolicy(p.max_tokens, p.wait_prob, **common)
    if p.kind == "interpreter":
        if not p.transcript:
            raise ConfigError("interpreter policy needs policy.transcript (word alignment JSON-lines)")
        return InterpreterPolicy(load_alignment(p.transcript), p.hold_s, **common)
    if not p.url:
        raise ConfigError("remote policy needs policy.url")
    history: str | int = p.history
    if isinstance(history, str) and history != "all":
        try:
            history = int(history)
        except ValueError as exc:
            raise ConfigError(f"policy.history must be 'all' or an integer, got {p.history!r}") from exc
    return RemoteChatPolicy(p.url, history, p.timeout_s, api_key(), **common)


def gold_occurrences(spans: Sequence[GoldSpan], chunk_s: float, duration_s: float, window_s: float,
                     stride_s: float) -> tuple[list[GoldOccurrence], int]:
    """Gold chunk per span (the chunk holding the span end) for spans some window fully contains.

    Returns the occurrences and the number of spans skipped because no
    window can contain them.
    """
    n_chunks = chunk_count(duration_s, chunk_s)
    out, skipped = [], 0
    for s in spans:
        if not containing_chunks(s.start_s, s.end_s, chunk_s, window_s, stride_s, duration_s):
            skipped += 1
            continue
        c = min(n_chunks, max(1, math.ceil(s.end_s / chunk_s - 1e-9)))
        out.append(GoldOccurrence(c, s.term_id, s.start_s, s.end_s))
    return out, skipped


def _manifest_path(args, out: str | Path) -> Path:
    return Path(args.manifest_out) if getattr(args, "manifest_out", None) else Path(str(out) + ".manifest.json")


def _config_inputs(manifest: RunManifest, cfg: RunConfig) -> None:
    manifest.add_input("transcript", cfg.policy.transcript)
    manifest.add_input("gold_spans", cfg.provider.gold_spans)
    manifest.add_input("provider_matrix", cfg.provider.matrix)
    manifest.add_input("provider_manifest", cfg.provider.manifest)


# --- commands --------------------------------------------------------------

def cmd_index(args, cfg: RunConfig) -> int:
    m = RunManifest("index", cfg.to_dict(), args={"glossary": args.glossary, "out": args.out, "langs": args.langs})
    m.add_input("glossary", args.glossary)
    langs = args.langs.split(",") if args.langs else [cfg.lang]
    with m.stage("load"):
        try:
            glossary = load_glossary(args.glossary, langs)
        except StreamTermError as exc:
            raise ConfigError(f"{args.glossary}: {exc}") from exc
    with m.stage("embed"):
        index = build_index(glossary, term_provider(cfg))
    save_index(index, args.out)
    m.outputs["index"] = str(args.out)
    m.write(_manifest_path(args, args.out))
    print(f"indexed {len(index)} terms (dim {index.dim}) -> {args.out}")
    return 0


def cmd_synth_pairs(args, cfg: RunConfig) -> int:
    if args.utterances:
        with open(args.utterances, encoding="utf-8") as f:
            utts = [json.loads(line) for line in f if line.strip()]
    elif args.alignment and args.phrases:
        utts = [{"id": args.utterance, "alignment": args.alignment, "phrases": args.phrases, "audio": args.audio}]
    else:
        raise ConfigError("synth pairs needs --utterances or both --alignment and --phrases")
    m = RunManifest("synth pairs", cfg.to_dict(), args=vars_of(args))
    all_phrases = []
    n = 0
    with open(args.out, "w", encoding="utf-8") as out:
        for u in utts:
            m.add_input(f"alignment:{u['id']}", u["alignment"])
            m.add_input(f"phrases:{u['id']}", u["phrases"])
            phrases = load_phrases(u["phrases"])
            if not args.no_dedup:
                phrases = dedup_candidates(phrases)
            all_phrases.extend(phrases)
            pairs = pair_windows(load_alignment(u["alignment"]), phrases, args.window, args.stride)
            for rec in pair_records(pairs, u["id"], u.get("audio")):
                out.write(dumps(rec))
                n += 1
    if args.stats and all_phrases:
        Path(args.stats).write_text(json.dumps(term_duration_stats(all_phrases), indent=2) + "\n")
    m.outputs["pairs"] = str(args.out)
    m.write(_manifest_path(args, args.out))
    print(f"wrote {n} window pairs -> {args.out}")
    return 0


def cmd_synth_sst(args, cfg: RunConfig) -> int:
    m = RunManifest("synth sst", cfg.to_dict(), args=vars_of(args))
    m.add_input("utterances", args.utterances)
    m.add_input("glossary", args.glossary)
    glossary = load_glossary(args.glossary, [cfg.lang])
    index = embedder = None
    if cfg.negatives == "mined":
        if args.index:
            m.add_input("index", args.index)
            index = load_index(args.index, [cfg.lang])
        else:
            index = build_index(glossary, term_provider(cfg))
        embedder = term_provider(cfg, index.dim)
    rng = np.random.default_rng(stage_seed(cfg.seed, "synth-sst"))
    n = 0
    with open(args.utterances, encoding="utf-8") as f, open(args.out, "w", encoding="utf-8") as out:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                utt = json.loads(line)
                rec = synth_sst_instance(utt, cfg.lang, cfg.pattern_weights, rng, glossary, index, embedder,
                                         cfg.negatives)
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"{args.utterances}: line {lineno}: {exc}") from exc
            out.write(dumps(rec))
            n += 1
    m.outputs["instances"] = str(args.out)
    m.write(_manifest_path(args, args.out))
    print(f"wrote {n} instances -> {args.out}")
    return 0


def vars_of(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func",) and not callable(v)}


def _simulate(audio: str, index_path: str, out: str, cfg: RunConfig) -> tuple[RunManifest, list]:
    m = RunManifest("simulate", cfg.to_dict(), args={"audio": audio, "index": index_path, "out": out})
    m.add_input("audio", audio)
    m.add_input("index", index_path)
    _config_inputs(m, cfg)
    params = cfg.session_params()
    params.validate()
    with m.stage("load"):
        index = load_index(index_path, [cfg.lang])
        stream = load_wav(audio)
        provider = window_provider(cfg, index) if cfg.retrieval else None
        policy = make_policy(cfg)
    with EventLogWriter(out, index.glossary) as writer, m.stage("session"):
        steps = run_session(stream, index, provider, policy, params, on_step=writer)
    m.outputs["events"] = str(out)
    return m, steps


def cmd_simulate(args, cfg: RunConfig) -> int:
    if args.manifest:
        prev = RunManifest.read(args.manifest)
        if prev.command != "simulate":
            raise ConfigError(f"{args.manifest} records a {prev.command!r} run, not simulate")
        changed = prev.verify_inputs()
        if changed:
            raise ConfigError(f"inputs changed since the manifest was written: {', '.join(changed)}")
        cfg = RunConfig.from_dict(prev.config).validate()
        audio, index_path = prev.args["audio"], prev.args["index"]
        out = args.out or prev.args["out"]
    else:
        if not (args.audio and args.index and args.out):
            raise ConfigError("simulate needs --audio, --index and --out (or --manifest)")
        audio, index_path, out = args.audio, args.index, args.out
    try:
        m, steps = _simulate(audio, index_path, out, cfg)
    except SessionAborted as exc:
        print(f"streamterm: session aborted after {len(exc.steps)} chunk(s): {exc}", file=sys.stderr)
        print(f"streamterm: partial event log kept at {out}", file=sys.stderr)
        return 3
    m.write(_manifest_path(args, out))
    print(f"simulated {len(steps)} chunks -> {out}")
    return 0


def cmd_retrieve(args, cfg: RunConfig) -> int:
    m = RunManifest("retrieve", cfg.to_dict(), args=vars_of(args))
    m.add_input("audio", args.audio)
    m.add_input("index", args.index)
    _config_inputs(m, cfg)
    params = cfg.session_params()
    params.validate()
    index = load_index(args.index, [cfg.lang])
    stream = load_wav(args.audio)
    provider = window_provider(cfg, index)
    with open(args.out, "w", encoding="utf-8") as f, m.stage("retrieve"):
        for chunk in chunk_stream(stream, cfg.chunk_s):
            rs = retrieve_for_chunk(index, provider, stream, chunk, params.retrieval, cfg.chunk_s,
                                    cfg.retrieval_workers)
            f.write(dumps({"version": 1, "chunk": rs.chunk_index, "retriever_ms": round(rs.retriever_ms, 3),
                           "hits": [{"term": index.glossary[h.term_id].source_term, "term_id": h.term_id,
                                     "score": h.score, "window_end_s": h.window_end_s} for h in rs.hits]}))
    m.outputs["hits"] = str(args.out)
    m.write(_manifest_path(args, args.out))
    print(f"retrieved {chunk_count(stream.duration_s, cfg.chunk_s)} chunks -> {args.out}")
    return 0


def _recall_inputs(gold_path: str | None, index_path: str | None, cfg: RunConfig, duration_s: float):
    if not gold_path:
        return None
    if index_path:
        glossary = load_index(index_path, [cfg.lang]).glossary
    else:
        glossary = Glossary()
    spans = load_gold_spans(gold_path, glossary)
    gold, skipped = gold_occurrences(spans, cfg.chunk_s, duration_s, cfg.window_s, cfg.stride_s)
    if skipped:
        log.info("%d gold span(s) fit in no retrieval window and are excluded from recall", skipped)
    return gold


def evaluate_log(events: str, references: str, occurrences: str | None, cfg: RunConfig,
                 gold_path: str | None = None, index_path: str | None = None, with_timings: bool = False):
    steps = read_event_log(events, with_timings=with_timings)
    refs = load_references(references)
    occs = load_occurrences(occurrences) if occurrences else []
    hyp, _ = assemble_hypothesis(steps)
    duration = steps[-1].delay_s if steps else 0.0
    gold = _recall_inputs(gold_path, index_path, cfg, duration)
    timings = None
    if with_timings:
        timings = (sum(s.retrieved.retriever_ms for s in steps), sum(s.policy_latency_ms for s in steps))
    return evaluate(hyp, refs, occs, cfg.lang, cfg.smooth, [s.retrieved for s in steps], gold, cfg.recall_k,
                    timings)


def cmd_evaluate(args, cfg: RunConfig) -> int:
    m = RunManifest("evaluate", cfg.to_dict(), args=vars_of(args))
    for name in ("events", "references", "terms", "gold_spans", "index"):
        m.add_input(name, getattr(args, name))
    with m.stage("evaluate"):
        report = evaluate_log(args.events, args.references, args.terms, cfg, args.gold_spans, args.index,
                              args.timings)
    csv_path = args.csv or str(args.out) + ".segments.csv"
    report.write(args.out, csv_path)
    m.outputs.update(report=str(args.out), segments=str(csv_path))
    m.write(_manifest_path(args, args.out))
    sys.stdout.write(report.to_json())
    return 0


def _retrieve_all(index: TermIndex, provider: EmbeddingProvider, stream, cfg: RunConfig) -> list[RetrievedSet]:
    params = cfg.session_params()
    params.validate()
    return [retrieve_for_chunk(index, provider, stream, c, params.retrieval, cfg.chunk_s, cfg.retrieval_workers)
            for c in chunk_stream(stream, cfg.chunk_s)]


def ablate_rows(dimension: str, values: Sequence[str], cfg: RunConfig, audio: str, index_path: str,
                gold_spans: str | None, references: str | None = None, terms: str | None = None,
                workdir: str | Path | None = None) -> list[dict]:
    """One row per value. ``window``/``stride`` report Recall@K; ``retrieval`` runs full sessions."""
    rows = []
    if dimension in ("window", "stride"):
        if not gold_spans:
            raise ConfigError(f"ablating {dimension} needs --gold-spans")
        index = load_index(index_path, [cfg.lang])
        stream = load_wav(audio)
        spans = load_gold_spans(gold_spans, index.glossary)
        for v in values:
            key = "window_s" if dimension == "window" else "stride_s"
            c = RunConfig.from_dict({**cfg.to_dict(), key: float(v)}).validate()
            sets = _retrieve_all(index, window_provider(c, index), stream, c)
            gold, skipped = gold_occurrences(spans, c.chunk_s, stream.duration_s, c.window_s, c.stride_s)
            rec = recall_at_k(sets, gold, c.recall_k) if gold else None
            rows.append({dimension: float(v), f"recall_at_{c.recall_k}": rec, "gold": len(gold),
                         "skipped": skipped})
        return rows
    if dimension != "retrieval":
        raise ConfigError(f"unknown ablation dimension {dimension!r}")
    if not references:
        raise ConfigError("ablating retrieval needs --references")
    workdir = Path(workdir or ".")
    workdir.mkdir(parents=True, exist_ok=True)
    for v in values:
        on = str(v).lower() in ("on", "true", "1", "yes")
        c = RunConfig.from_dict({**cfg.to_dict(), "retrieval": on}).validate()
        events = workdir / f"events.retrieval-{'on' if on else 'off'}.jsonl"
        _simulate(audio, index_path, str(events), c)
        rep = evaluate_log(str(events), references, terms, c)
        rows.append({"retrieval": "on" if on else "off", "term_accuracy": rep.term_accuracy, "bleu": rep.bleu,
                     "stream_laal_s": rep.stream_laal_s})
    return rows


def format_rows(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])

    def cell(x):
        return "-" if x is None else (f"{x:.4f}" if isinstance(x, float) else str(x))

    return "\n".join(["\t".join(cols)] + ["\t".join(cell(r[c]) for c in cols) for r in rows]) + "\n"


def cmd_ablate(args, cfg: RunConfig) -> int:
    defaults = {"window": ["0.96", "1.92", "2.88", "3.84"], "stride": ["0.96", "0.48", "0.24", "0.12"],
                "retrieval": ["on", "off"]}
    values = args.values or defaults.get(args.dimension, [])
    m = RunManifest("ablate", cfg.to_dict(), args=vars_of(args))
    for name in ("audio", "index", "gold_spans", "references", "terms"):
        m.add_input(name, getattr(args, name))
    _config_inputs(m, cfg)
    workdir = Path(args.out).parent if args.out else Path(".")
    with m.stage("ablate"):
        rows = ablate_rows(args.dimension, values, cfg, args.audio, args.index, args.gold_spans, args.references,
                           args.terms, workdir)
    table = format_rows(rows)
    sys.stdout.write(table)
    if args.out:
        Path(args.out).write_text(json.dumps({"dimension": args.dimension, "rows": rows}, indent=2,
                                             sort_keys=True) + "\n", encoding="utf-8")
        m.outputs["table"] = str(args.out)
        m.write(_manifest_path(args, args.out))
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    rows = bench_mod.run(args.sizes, args.segments, args.repeat, seed=cfg.seed)
    print(bench_mod.format_table(rows))
    return 0


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="streamterm", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (dotted for sub-tables, e.g. policy.kind=echo)")
    common.add_argument("--manifest-out", help="where to write the run manifest (default: <out>.manifest.json)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", parents=[common], help="embed a glossary into a term index")
    p.add_argument("glossary")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--langs", help="comma-separated target languages every entry must have (default: config lang)")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("synth", help="synthesize training data")
    ssub = p.add_subparsers(dest="mode", required=True)
    q = ssub.add_parser("pairs", parents=[common], help="(speech window, positive terms) pairs")
    q.add_argument("--utterances", help='JSON-lines of {"id", "alignment", "phrases", "audio"}')
    q.add_argument("--alignment")
    q.add_argument("--phrases")
    q.add_argument("--utterance", default="utt0")
    q.add_argument("--audio")
    q.add_argument("--window", type=float, default=1.92)
    q.add_argument("--stride", type=float, default=0.96)
    q.add_argument("--no-dedup", action="store_true")
    q.add_argument("--stats", help="also write term duration statistics (JSON)")
    q.add_argument("-o", "--out", required=True)
    q.set_defaults(func=cmd_synth_pairs)
    q = ssub.add_parser("sst", parents=[common], help="multi-turn term-map instances")
    q.add_argument("--utterances", required=True, help='JSON-lines of {"id", "chunks": [...]}')
    q.add_argument("--glossary", required=True)
    q.add_argument("--index", help="prebuilt index for mined negatives")
    q.add_argument("-o", "--out", required=True)
    q.set_defaults(func=cmd_synth_sst)

    p = sub.add_parser("simulate", parents=[common], help="replay audio through retrieval and a policy")
    p.add_argument("--audio")
    p.add_argument("--index")
    p.add_argument("-o", "--out")
    p.add_argument("--manifest", help="re-run exactly from a previous simulate manifest")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("retrieve", parents=[common], help="per-chunk retrieval only")
    p.add_argument("--audio", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("evaluate", parents=[common], help="score an event log")
    p.add_argument("--events", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--terms", help="term occurrences JSON-lines")
    p.add_argument("--gold-spans", help="gold term spans JSON-lines, enables Recall@K")
    p.add_argument("--index", help="index whose glossary resolves term texts in --gold-spans")
    p.add_argument("--timings", action="store_true", help="read the timing sidecar and report the overhead ratio")
    p.add_argument("--csv", help="per-segment CSV (default: <out>.segments.csv)")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="sweep one setting and tabulate the result")
    p.add_argument("--dimension", choices=["window", "stride", "retrieval"], required=True)
    p.add_argument("--values", nargs="+")
    p.add_argument("--audio", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--gold-spans")
    p.add_argument("--references")
    p.add_argument("--terms")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", parents=[common], help="compiled vs pure-Python kernel timing")
    p.add_argument("--sizes", type=int, nargs="+", default=[200, 1000, 2000])
    p.add_argument("--segments", type=int, default=20)
    p.add_argument("--repeat", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        strict = args.command != "bench"
        cfg = load_config(args.config, args.overrides, strict_chunks=strict)
        return args.func(args, cfg)
    except (StreamTermError, ValueError, OSError, KeyError) as exc:
        print(f"streamterm: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
