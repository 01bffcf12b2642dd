"""Training-data synthesis: window/phrase pairs for the retriever, term maps for the translator."""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .driver import AUDIO_PLACEHOLDER, system_prompt
from .embedding import l2_normalize
from .glossary import Glossary, GlossaryEntry, TermIndex, cosine_scores

SYNTH_VERSION = 1
PAIR_WINDOW_S = 1.92
PAIR_STRIDE_S = 0.96
MAP_BUDGET = 20
NEG_PER_SECOND = 9
TIME_TOL = 1e-9


@dataclass(frozen=True)
class AlignedWord:
    word: str
    start_s: float
    end_s: float

    def __post_init__(self):
        if not 0 <= self.start_s < self.end_s:
            raise ValueError(f"bad word timing for {self.word!r}: [{self.start_s}, {self.end_s}]")


@dataclass(frozen=True)
class PhraseSpan:
    text: str
    start_s: float
    end_s: float

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass
class WindowPair:
    start_s: float
    end_s: float
    positives: list[PhraseSpan] = field(default_factory=list)


class Pattern(str, enum.Enum):
    STANDARD = "standard"
    NONE = "none"
    ALL_WRONG = "all_wrong"


@dataclass(frozen=True)
class TermPair:
    source: str
    translation: str


@dataclass
class TermMapSample:
    pattern: Pattern
    entries: list[tuple[str, str, bool]]  # (source, translation, is_gold)
    n_sampled: int = 0

    def __post_init__(self):
        if len(self.entries) > MAP_BUDGET:
            raise ValueError(f"term map has {len(self.entries)} entries (budget {MAP_BUDGET})")


# --- phrase handling -------------------------------------------------------

_EDGE_PUNCT = re.compile(r"^[\W_]+|[\W_]+$", re.UNICODE)


def normalize_phrase(text: str) -> str:
    """Trim edge punctuation, collapse whitespace, lowercase all but acronym tokens."""
    text = _EDGE_PUNCT.sub("", " ".join(text.split()))
    return " ".join(tok if len(tok) > 1 and tok.isupper() else tok.lower() for tok in text.split())


def _contains(longer: list[str], shorter: list[str]) -> bool:
    n = len(shorter)
    return any(longer[i:i + n] == shorter for i in range(len(longer) - n + 1))


def dedup_candidates(phrases: Sequence[PhraseSpan]) -> list[PhraseSpan]:
    """Drop exact duplicate texts, then phrases word-contained in a longer multi-word phrase."""
    seen: set[str] = set()
    unique = []
    for p in phrases:
        if p.text not in seen:
            seen.add(p.text)
            unique.append(p)
    words = [p.text.lower().split() for p in unique]
    out = []
    for i, p in enumerate(unique):
        contained = any(
            j != i and len(words[j]) > 1 and len(words[j]) > len(words[i]) and _contains(words[j], words[i])
            for j in range(len(unique))
        )
        if not contained:
            out.append(p)
    return out


def pair_windows(alignment: Sequence[AlignedWord], phrases: Sequence[PhraseSpan], W: float = PAIR_WINDOW_S,
                 stride: float = PAIR_STRIDE_S) -> list[WindowPair]:
    """Slide ``W``/``stride`` windows from 0 until one reaches the utterance end.

    Each window is paired with every phrase lying entirely inside it; windows
    without positives are kept.
    """
    if W <= 0 or stride <= 0:
        raise ValueError("window and stride must be positive")
    end = max([w.end_s for w in alignment] + [p.end_s for p in phrases] + [0.0])
    if end <= 0:
        return []
    n = max(1, math.ceil((end - W) / stride - TIME_TOL) + 1)
    pairs = []
    for k in range(n):
        ws = round(k * stride, 9)
        we = round(ws + W, 9)
        pos = [p for p in phrases if p.start_s >= ws - TIME_TOL and p.end_s <= we + TIME_TOL]
        pairs.append(WindowPair(ws, we, pos))
    return pairs


def term_duration_stats(phrases: Sequence[PhraseSpan], bin_s: float = 0.1) -> dict:
    """Mean and nearest-rank percentiles of span durations plus a fixed-width histogram."""
    if not phrases:
        raise ValueError("no spans")
    d = np.sort(np.array([p.duration_s for p in phrases], dtype=np.float64))

    def pct(q: float) -> float:
        return float(d[max(0, math.ceil(q / 100 * len(d)) - 1)])

    nbins = max(1, math.ceil(d[-1] / bin_s - TIME_TOL))
    counts = np.zeros(nbins, dtype=int)
    for x in d:
        counts[min(nbins - 1, int(x / bin_s + TIME_TOL) if x > 0 else 0)] += 1
    hist = [{"lo": round(i * bin_s, 6), "hi": round((i + 1) * bin_s, 6), "count": int(c)} for i, c in enumerate(counts)]
    return {"count": len(d), "mean_s": float(d.mean()), "p50": pct(50), "p90": pct(90), "p99": pct(99),
            "max_s": float(d[-1]), "histogram": hist}


# --- term maps -------------------------------------------------------------

def negative_cap(dur_s: float) -> int:
    return math.floor(NEG_PER_SECOND * dur_s + TIME_TOL)


def sample_negative_count(dur_s: float, rng: np.random.Generator) -> int:
    """``n ~ Uniform{0, ..., floor(9 * dur_s)}``."""
    if dur_s <= 0:
        raise ValueError("duration must be positive")
    return int(rng.integers(0, negative_cap(dur_s) + 1))


class NegativeSource(Protocol):
    def draw(self, n: int, exclude: set[str]) -> list[TermPair]: ...


class RandomNegatives:
    """Uniform draws (without replacement) from the glossary minus excluded terms."""

    name = "random"

    def __init__(self, glossary: Glossary, lang: str, rng: np.random.Generator):
        self.glossary = glossary
        self.lang = lang
        self.rng = rng

    def draw(self, n: int, exclude: set[str]) -> list[TermPair]:
        pool = [e for e in self.glossary if e.source_term.casefold() not in exclude and self.lang in e.translations]
        if n <= 0 or not pool:
            return []
        idx = self.rng.choice(len(pool), size=min(n, len(pool)), replace=False)
        return [TermPair(pool[i].source_term, pool[i].translations[self.lang]) for i in idx]


def mine_hard_negatives(index: TermIndex, anchor: np.ndarray, k: int, exclude: Iterable[str | int] = ()
                        ) -> list[GlossaryEntry]:
    """Top-``k`` entries by cosine to ``anchor``, skipping excluded terms (ids or case-insensitive text)."""
    if k < 0:
        raise ValueError("k must be >= 0")
    ex_ids = {x for x in exclude if isinstance(x, (int, np.integer))}
    ex_text = {x.casefold() for x in exclude if isinstance(x, str)}
    if k == 0 or len(index) == 0:
        return []
    scores = cosine_scores(index.vectors, np.asarray(anchor, dtype=np.float64))
    order = np.lexsort((np.arange(len(index)), -scores))
    out = []
    for i in order:
        e = index.entries[int(i)]
        if e.term_id in ex_ids or e.source_term.casefold() in ex_text:
            continue
        out.append(e)
        if len(out) == k:
            break
    return out


class MinedNegatives:
    """Hardest negatives by cosine to a fixed anchor (speech window or gold-term text)."""

    name = "mined"

    def __init__(self, index: TermIndex, lang: str, anchor: np.ndarray):
        self.index = index
        self.lang = lang
        self.anchor = anchor

    def draw(self, n: int, exclude: set[str]) -> list[TermPair]:
        hits = [e for e in mine_hard_negatives(self.index, self.anchor, len(self.index), exclude)
                if self.lang in e.translations][:max(n, 0)]
        return [TermPair(e.source_term, e.translations[self.lang]) for e in hits]


def synth_term_map(gold: Sequence[TermPair], pattern: Pattern | str, dur_s: float, negatives: NegativeSource,
                   rng: np.random.Generator, budget: int = MAP_BUDGET) -> TermMapSample:
    """Build one chunk's term map under ``pattern``; entry order is shuffled."""
    pattern = Pattern(pattern)
    exclude = {g.source.casefold() for g in gold}
    if pattern is Pattern.NONE:
        return TermMapSample(pattern, [], 0)
    if pattern is Pattern.STANDARD:
        if len(gold) > budget:
            raise ValueError(f"{len(gold)} gold terms exceed the map budget {budget}")
        n = sample_negative_count(dur_s, rng)
        negs = negatives.draw(min(n, budget - len(gold)), exclude) if n else []
        entries = [(g.source, g.translation, True) for g in gold] + [(x.source, x.translation, False) for x in negs]
    else:
        if dur_s <= 0:
            raise ValueError("duration must be positive")
        n = int(rng.integers(1, max(1, negative_cap(dur_s)) + 1))
        negs = negatives.draw(min(n, budget), exclude)
        if not negs:
            raise ValueError("negative source exhausted; cannot build an all-wrong term map")
        entries = [(x.source, x.translation, False) for x in negs]
    perm = rng.permutation(len(entries))
    return TermMapSample(pattern, [entries[i] for i in perm], n)


def choose_pattern(weights: Sequence[float], rng: np.random.Generator) -> Pattern:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("pattern weights must be three non-negative numbers with positive sum")
    return list(Pattern)[int(rng.choice(3, p=w / w.sum()))]


def render_user_turn(sample: TermMapSample) -> str:
    if not sample.entries:
        return AUDIO_PLACEHOLDER
    return "\n".join([AUDIO_PLACEHOLDER, "", "term_map:"] + [f"{s}={t}" for s, t, _ in sample.entries])


# --- file formats ----------------------------------------------------------

def _read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def load_alignment(path: str | Path) -> list[AlignedWord]:
    words = [AlignedWord(r["word"], float(r["start_s"]), float(r["end_s"])) for r in _read_jsonl(path)]
    return sorted(words, key=lambda w: w.start_s)


def load_phrases(path: str | Path, normalize: bool = True) -> list[PhraseSpan]:
    out = []
    for r in _read_jsonl(path):
        text = normalize_phrase(r["text"]) if normalize else r["text"]
        if text:
            out.append(PhraseSpan(text, float(r["start_s"]), float(r["end_s"])))
    return out


def pair_records(pairs: Sequence[WindowPair], utterance: str, audio: str | None = None) -> list[dict]:
    return [{
        "version": SYNTH_VERSION,
        "utterance": utterance,
        "audio": audio,
        "window": {"start_s": p.start_s, "end_s": p.end_s},
        "positives": [q.text for q in p.positives],
    } for p in pairs]


def synth_sst_instance(utterance: dict, lang: str, weights: Sequence[float], rng: np.random.Generator,
                       glossary: Glossary, index: TermIndex | None = None, embedder=None,
                       strategy: str = "mined") -> dict:
    """One multi-turn training instance shaped like a chat transcript.

    ``utterance`` is ``{"id", "chunks": [{"audio", "dur_s", "gold": [{"term", "translation"}],
    "translation"}]}``. With ``strategy="mined"`` negatives are the glossary
    terms closest to the gold terms' text embeddings.
    """
    messages = [{"role": "system", "content": system_prompt(lang)}]
    audios, patterns, sizes, counts = [], [], [], []
    for ch in utterance["chunks"]:
        gold = [TermPair(g["term"], g["translation"]) for g in ch.get("gold", [])]
        pattern = choose_pattern(weights, rng)
        source: NegativeSource = RandomNegatives(glossary, lang, rng)
        if strategy == "mined" and index is not None and embedder is not None and len(index):
            anchor = _text_anchor(gold, index, embedder, rng)
            source = MinedNegatives(index, lang, anchor)
        sample = synth_term_map(gold, pattern, float(ch["dur_s"]), source, rng)
        messages.append({"role": "user", "content": render_user_turn(sample)})
        messages.append({"role": "assistant", "content": ch.get("translation", "")})
        audios.append(ch.get("audio"))
        patterns.append(sample.pattern.value)
        sizes.append(len(sample.entries))
        counts.append(sample.n_sampled)
    return {"version": SYNTH_VERSION, "id": utterance.get("id"), "messages": messages, "audios": audios,
            "patterns": patterns, "map_sizes": sizes, "n_sampled": counts, "negatives": strategy}


def _text_anchor(gold: Sequence[TermPair], index: TermIndex, embedder, rng: np.random.Generator) -> np.ndarray:
    if not gold:
        return l2_normalize(rng.standard_normal(index.dim))
    return l2_normalize(sum(np.asarray(embedder.embed_term(g.source), dtype=np.float64) for g in gold))

