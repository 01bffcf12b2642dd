"""Interleaved streaming session: retrieve, prompt, translate-or-wait, assign delays."""

from __future__ import annotations

import json
import logging
import math
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .embedding import EmbeddingProvider
from .errors import MissingTranslationError, PolicyError, SchemaVersionError, SessionAborted
from .glossary import Glossary, TermIndex
from .retriever import RetrievalHit, RetrievalParams, RetrievedSet, retrieve_for_chunk
from .stream import Chunk, SpeechStream, chunk_stream

log = logging.getLogger(__name__)

EVENT_LOG_VERSION = 1
AUDIO_PLACEHOLDER = "<audio>"
TOKEN_UNIT_S = 0.96
TOKENS_PER_UNIT = 10

LANGUAGE_NAMES = {"zh": "Chinese", "de": "German", "ja": "Japanese", "en": "English"}
# languages written without inter-word spaces
UNSPACED_LANGS = frozenset({"zh", "ja"})

SYSTEM_PROMPT = (
    "You are a professional simultaneous interpreter. Your task is to translate English audio chunks "
    "into accurate and fluent {language}. Use the `term_map' as a reference for terminology if provided."
)


def system_prompt(lang: str) -> str:
    return SYSTEM_PROMPT.format(language=LANGUAGE_NAMES.get(lang, lang))


def token_joiner(lang: str) -> str:
    return "" if lang in UNSPACED_LANGS else " "


def budget(chunk: Chunk | float, tokens_per_unit: int = TOKENS_PER_UNIT, unit_s: float = TOKEN_UNIT_S) -> int:
    """Max new tokens for a chunk: ``ceil(duration / unit_s) * tokens_per_unit``."""
    if tokens_per_unit <= 0 or unit_s <= 0:
        raise ValueError("token rate must be positive")
    dur = chunk.duration_s if isinstance(chunk, Chunk) else float(chunk)
    return max(0, math.ceil(dur / unit_s - 1e-9)) * tokens_per_unit


def build_prompt(retrieved: RetrievedSet | Sequence[RetrievalHit], glossary: Glossary, lang: str) -> str:
    hits = retrieved.hits if isinstance(retrieved, RetrievedSet) else retrieved
    if not hits:
        return AUDIO_PLACEHOLDER
    lines = [AUDIO_PLACEHOLDER, "", "term_map:"]
    for h in hits:
        e = glossary[h.term_id]
        lines.append(f"{e.source_term}={e.translation(lang)}")
    return "\n".join(lines)


def parse_term_map(prompt: str) -> list[tuple[str, str]]:
    """Inverse of :func:`build_prompt` for the term-map section."""
    if "\nterm_map:\n" not in prompt:
        return []
    body = prompt.split("\nterm_map:\n", 1)[1]
    pairs = []
    for line in body.split("\n"):
        src, sep, tgt = line.partition("=")
        if sep:
            pairs.append((src, tgt))
    return pairs


@dataclass
class TranslationStep:
    chunk_index: int
    retrieved: RetrievedSet
    tokens: list[str]
    delay_s: float
    policy_latency_ms: float = 0.0
    truncated: bool = False
    context: str = "all"

    @property
    def is_wait(self) -> bool:
        return not self.tokens


@dataclass
class PolicyContext:
    """Everything a policy may condition on at step ``chunk_index``; nothing past ``chunk_end_s``."""

    chunk_index: int
    chunk_end_s: float
    is_final: bool
    audio: np.ndarray  # stream prefix up to chunk end
    chunk_audio: np.ndarray
    prompt: str
    term_map: list[tuple[str, str]]
    history: list[TranslationStep]
    prompts: list[str]
    lang: str
    max_new_tokens: int


class TranslatorPolicy:
    kind = "abstract"

    def __init__(self, temperature: float = 0.6, top_p: float = 0.95, top_k: int = 20, seed: int = 0):
        self.decoding = {"temperature": temperature, "top_p": top_p, "top_k": top_k, "seed": seed}

    def translate(self, ctx: PolicyContext) -> list[str]:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind, "decoding": self.decoding}


class WaitPolicy(TranslatorPolicy):
    kind = "scripted-wait"

    def translate(self, ctx: PolicyContext) -> list[str]:
        return []


class EchoPolicy(TranslatorPolicy):
    """Emits ``<i>`` at chunk ``i``."""

    kind = "scripted-echo"

    def translate(self, ctx: PolicyContext) -> list[str]:
        return [f"<{ctx.chunk_index}>"]


class RandomScriptedPolicy(TranslatorPolicy):
    """Seeded random token counts (possibly over budget); used for law checks."""

    kind = "scripted-random"

    def __init__(self, max_tokens: int = 60, wait_prob: float = 0.3, seed: int = 0, **kw):
        super().__init__(seed=seed, **kw)
        self.rng = np.random.default_rng(seed)
        self.max_tokens = max_tokens
        self.wait_prob = wait_prob

    def translate(self, ctx: PolicyContext) -> list[str]:
        if self.rng.random() < self.wait_prob:
            return []
        n = int(self.rng.integers(1, self.max_tokens + 1))
        return [f"w{ctx.chunk_index}_{j}" for j in range(n)]


_WORD_STRIP = re.compile(r"^\W+|\W+$", re.UNICODE)


def _norm_word(w: str) -> str:
    return _WORD_STRIP.sub("", w).casefold()


class InterpreterPolicy(TranslatorPolicy):
    """Scripted interpreter driven by a word-timed source transcript.

    Stands in for a speech LLM's understanding: at each step it may only use
    transcript words that end by the chunk end. Words are copied through;
    word sequences matching a source term seen in any term map so far are
    replaced by that term's translation. Words ending within ``hold_s`` of
    the chunk end are held back (except on the final chunk) so that a term
    is complete and retrievable before any of its words is emitted.
    """

    kind = "scripted-interpreter"

    def __init__(self, words: Sequence, hold_s: float = 1.44, **kw):
        super().__init__(**kw)
        self.words = list(words)
        self.hold_s = hold_s
        self.reset()

    def reset(self) -> None:
        self.pos = 0
        self.known: dict[tuple[str, ...], str] = {}
        self.max_len = 0

    def _units(self, end_idx: int) -> list[tuple[int, int, list[str]]]:
        units = []
        i = self.pos
        keys = [_norm_word(w.word) for w in self.words[:end_idx]]
        while i < end_idx:
            match = None
            for n in range(min(self.max_len, end_idx - i), 0, -1):
                tr = self.known.get(tuple(keys[i:i + n]))
                if tr is not None:
                    match = (i, i + n, [tr])
                    break
            if match is None:
                match = (i, i + 1, [self.words[i].word])
            units.append(match)
            i = match[1]
        return units

    def translate(self, ctx: PolicyContext) -> list[str]:
        for src, tgt in ctx.term_map:
            key = tuple(_norm_word(w) for w in src.split())
            if key and key not in self.known:
                self.known[key] = tgt
                self.max_len = max(self.max_len, len(key))
        end_idx = self.pos
        while end_idx < len(self.words) and self.words[end_idx].end_s <= ctx.chunk_end_s + 1e-9:
            end_idx += 1
        cutoff = math.inf if ctx.is_final else ctx.chunk_end_s - self.hold_s
        out: list[str] = []
        for start, stop, toks in self._units(end_idx):
            if self.words[start].end_s > cutoff + 1e-9:
                break
            if len(out) + len(toks) > ctx.max_new_tokens:
                break
            out.extend(toks)
            self.pos = stop
        return out


class RemoteChatPolicy(TranslatorPolicy):
    """HTTP ``POST <url>/generate`` chat client.

    ``history`` is ``"all"`` or the number of most recent chunks whose turns
    are resent; the active mode is recorded in every step.
    """

    kind = "remote-chat"

    def __init__(self, url: str, history: str | int = "all", timeout: float = 60.0, api_key: str | None = None,
                 **kw):
        super().__init__(**kw)
        self.url = url.rstrip("/") + "/generate"
        self.history = history
        self.timeout = timeout
        self.api_key = api_key

    @property
    def context_mode(self) -> str:
        return "all" if self.history == "all" else f"sliding:{int(self.history)}"

    def messages(self, ctx: PolicyContext) -> tuple[list[dict], list[str]]:
        turns = list(zip(ctx.prompts, ctx.history))
        if self.history != "all":
            keep = int(self.history)
            turns = turns[-keep:] if keep > 0 else []
        msgs = [{"role": "system", "content": system_prompt(ctx.lang)}]
        refs = []
        for prompt, step in turns:
            msgs.append({"role": "user", "content": prompt})
            msgs.append({"role": "assistant", "content": token_joiner(ctx.lang).join(step.tokens)})
            refs.append(f"chunk:{step.chunk_index}")
        msgs.append({"role": "user", "content": ctx.prompt})
        refs.append(f"chunk:{ctx.chunk_index}")
        return msgs, refs

    def translate(self, ctx: PolicyContext) -> list[str]:
        msgs, refs = self.messages(ctx)
        body = {
            "messages": msgs,
            "audio_refs": refs,
            "max_new_tokens": ctx.max_new_tokens,
            "temperature": self.decoding["temperature"],
            "top_p": self.decoding["top_p"],
            "top_k": self.decoding["top_k"],
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.url, data=json.dumps(body, ensure_ascii=False).encode("utf-8"),
                                     headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read())
        except (urllib.error.URLError, TimeoutError, ConnectionError, json.JSONDecodeError) as exc:
            raise PolicyError(f"generate request to {self.url} failed: {exc}") from exc
        tokens = payload.get("tokens")
        if not isinstance(tokens, list) or not all(isinstance(x, str) for x in tokens):
            raise PolicyError("remote policy returned malformed 'tokens'")
        return tokens


@dataclass(frozen=True)
class SessionParams:
    chunk_s: float = 1.92
    retrieval: RetrievalParams = field(default_factory=RetrievalParams)
    tokens_per_unit: int = TOKENS_PER_UNIT
    unit_s: float = TOKEN_UNIT_S
    lang: str = "zh"
    retrieval_enabled: bool = True
    retrieval_workers: int = 1

    def validate(self) -> None:
        if self.chunk_s <= 0:
            raise ValueError("chunk length must be positive")
        self.retrieval.validate(self.chunk_s)


def run_session(stream: SpeechStream, index: TermIndex, provider: EmbeddingProvider | None,
                policy: TranslatorPolicy, params: SessionParams,
                on_step: Callable[[TranslationStep], None] | None = None) -> list[TranslationStep]:
    """Replay ``stream`` chunk by chunk; one step per chunk, in order.

    If the policy raises, :class:`SessionAborted` carries the steps completed
    so far (``on_step`` has already seen each of them).
    """
    params.validate()
    if hasattr(policy, "reset"):
        policy.reset()
    glossary = index.glossary
    chunks = chunk_stream(stream, params.chunk_s)
    steps: list[TranslationStep] = []
    prompts: list[str] = []
    context_mode = getattr(policy, "context_mode", "all")
    for chunk in chunks:
        if params.retrieval_enabled and provider is not None:
            retrieved = retrieve_for_chunk(index, provider, stream, chunk, params.retrieval, params.chunk_s,
                                           params.retrieval_workers)
        else:
            retrieved = RetrievedSet(chunk.index)
        try:
            prompt = build_prompt(retrieved, glossary, params.lang)
        except MissingTranslationError as exc:
            raise SessionAborted(str(exc), steps) from exc
        limit = budget(chunk, params.tokens_per_unit, params.unit_s)
        ctx = PolicyContext(
            chunk_index=chunk.index,
            chunk_end_s=chunk.end_s,
            is_final=chunk.index == len(chunks),
            audio=stream.samples[: stream.sample_at(chunk.end_s) if chunk.index < len(chunks) else None],
            chunk_audio=chunk.samples,
            prompt=prompt,
            term_map=parse_term_map(prompt),
            history=list(steps),
            prompts=list(prompts),
            lang=params.lang,
            max_new_tokens=limit,
        )
        t0 = time.perf_counter()
        try:
            tokens = list(policy.translate(ctx))
        except Exception as exc:
            raise SessionAborted(f"policy failed at chunk {chunk.index}: {exc}", steps) from exc
        latency = (time.perf_counter() - t0) * 1e3
        truncated = len(tokens) > limit
        if truncated:
            log.warning("chunk %d: policy emitted %d tokens, truncating to %d", chunk.index, len(tokens), limit)
            tokens = tokens[:limit]
        step = TranslationStep(chunk.index, retrieved, tokens, chunk.end_s, latency, truncated, context_mode)
        steps.append(step)
        prompts.append(prompt)
        if on_step is not None:
            on_step(step)
    return steps


def assemble_hypothesis(steps: Iterable[TranslationStep], joiner: str = " ") -> tuple[list[tuple[str, float]], str]:
    tokens = [(tok, s.delay_s) for s in steps for tok in s.tokens]
    return tokens, joiner.join(tok for tok, _ in tokens)


# --- event log -------------------------------------------------------------

def step_record(step: TranslationStep, glossary: Glossary | None = None) -> dict:
    hits = []
    for h in step.retrieved.hits:
        rec = {"term_id": h.term_id, "score": h.score, "window_end_s": h.window_end_s}
        if glossary is not None:
            rec["term"] = glossary[h.term_id].source_term
        hits.append(rec)
    return {
        "version": EVENT_LOG_VERSION,
        "chunk": step.chunk_index,
        "delay_s": step.delay_s,
        "tokens": step.tokens,
        "truncated": step.truncated,
        "context": step.context,
        "hits": hits,
    }


def timing_record(step: TranslationStep) -> dict:
    return {"chunk": step.chunk_index, "retriever_ms": step.retrieved.retriever_ms,
            "policy_ms": step.policy_latency_ms}


def dumps(rec: dict) -> str:
    return json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n"


class EventLogWriter:
    """Streams steps to ``path`` (deterministic content) and ``<path>.timing.jsonl`` (wall clock)."""

    def __init__(self, path: str | Path, glossary: Glossary | None = None):
        self.path = Path(path)
        self.glossary = glossary
        self._f = open(self.path, "w", encoding="utf-8")
        self._t = open(timing_sidecar(self.path), "w", encoding="utf-8")

    def __call__(self, step: TranslationStep) -> None:
        self._f.write(dumps(step_record(step, self.glossary)))
        self._t.write(dumps(timing_record(step)))
        self._f.flush()
        self._t.flush()

    def close(self) -> None:
        self._f.close()
        self._t.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def timing_sidecar(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".timing.jsonl")


def read_event_log(path: str | Path, with_timings: bool = True) -> list[TranslationStep]:
    steps = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if int(rec.get("version", 0)) != EVENT_LOG_VERSION:
                raise SchemaVersionError(f"{path}:{lineno}: unsupported event log version {rec.get('version')}")
            hits = [RetrievalHit(h["term_id"], h["score"], h["window_end_s"]) for h in rec["hits"]]
            steps.append(TranslationStep(rec["chunk"], RetrievedSet(rec["chunk"], hits), list(rec["tokens"]),
                                         rec["delay_s"], truncated=rec.get("truncated", False),
                                         context=rec.get("context", "all")))
    side = timing_sidecar(path)
    if with_timings and side.exists():
        by_chunk = {}
        with open(side, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    rec = json.loads(line)
                    by_chunk[rec["chunk"]] = rec
        for s in steps:
            rec = by_chunk.get(s.chunk_index)
            if rec:
                s.retrieved.retriever_ms = rec["retriever_ms"]
                s.policy_latency_ms = rec["policy_ms"]
    return steps
