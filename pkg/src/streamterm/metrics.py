"""Scoring for streaming output: resegmentation, LAAL, BLEU, term accuracy, Recall@K, overhead."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from . import kernels

LAAL_VERSION = "laal-v1(cutoff=first d_j>=T_src; norm=max(|hyp|,|ref|))"
REPORT_VERSION = 1
UNSPACED_LANGS = frozenset({"zh", "ja"})


def tokenization_for(lang: str) -> str:
    return "char" if lang in UNSPACED_LANGS else "word"


def tokenize(text: str, mode: str = "word") -> list[str]:
    if mode == "word":
        return text.split()
    if mode == "char":
        return [c for c in text if not c.isspace()]
    raise ValueError(f"unknown tokenization {mode!r}")


def detokenize(tokens: Sequence[str], mode: str = "word") -> str:
    return ("" if mode == "char" else " ").join(tokens)


@dataclass(frozen=True)
class ReferenceSegment:
    index: int
    source_text: str
    target_text: str
    source_start_s: float
    source_end_s: float

    @property
    def duration_s(self) -> float:
        return self.source_end_s - self.source_start_s


@dataclass
class AlignedPair:
    segment: ReferenceSegment
    tokens: list[tuple[str, float]]  # (token, delay_s) under the scoring tokenization
    ref_tokens: list[str] = field(default_factory=list)

    @property
    def text_tokens(self) -> list[str]:
        return [t for t, _ in self.tokens]


def split_hypothesis(hyp: Sequence[tuple[str, float]], mode: str) -> list[tuple[str, float]]:
    """Re-tokenize emitted tokens; pieces inherit the emitting token's delay."""
    return [(piece, d) for tok, d in hyp for piece in tokenize(tok, mode)]


def resegment(hyp: Sequence[tuple[str, float]], refs: Sequence[ReferenceSegment], mode: str = "word"
              ) -> tuple[list[AlignedPair], int]:
    """Contiguously partition hypothesis tokens over references minimizing total edit distance.

    Returns the aligned pairs and the minimal total (unit-cost, token-level)
    edit distance.
    """
    if not refs:
        raise ValueError("no reference segments")
    hyp_toks = split_hypothesis(hyp, mode)
    ref_toks = [tokenize(r.target_text, mode) for r in refs]
    vocab: dict[str, int] = {}
    hyp_ids = [vocab.setdefault(t, len(vocab)) for t, _ in hyp_toks]
    ref_ids: list[int] = []
    boundaries: list[int] = []
    for toks in ref_toks:
        ref_ids.extend(vocab.setdefault(t, len(vocab)) for t in toks)
        boundaries.append(len(ref_ids))
    total, cuts = kernels.align_cuts(hyp_ids, ref_ids, boundaries[:-1])
    edges = [0] + list(cuts) + [len(hyp_toks)]
    pairs = [AlignedPair(r, list(hyp_toks[edges[s]:edges[s + 1]]), ref_toks[s]) for s, r in enumerate(refs)]
    return pairs, int(total)


def laal(pair: AlignedPair) -> float | None:
    """Length-adaptive average lagging (seconds) for one segment; ``None`` for an empty slice."""
    T = pair.segment.duration_s
    if T <= 0:
        raise ValueError("segment must have positive duration")
    if not pair.tokens:
        return None
    delays = [d - pair.segment.source_start_s for _, d in pair.tokens]
    rate = T / max(len(delays), len(pair.ref_tokens))
    cut = next((j for j, d in enumerate(delays, start=1) if d >= T), len(delays))
    return sum(delays[j - 1] - (j - 1) * rate for j in range(1, cut + 1)) / cut


def stream_laal(pairs: Sequence[AlignedPair]) -> tuple[float | None, int]:
    """Mean LAAL over segments with non-empty slices, and the count of excluded segments."""
    vals = [laal(p) for p in pairs]
    kept = [v for v in vals if v is not None]
    return (sum(kept) / len(kept) if kept else None), len(vals) - len(kept)


# --- BLEU ------------------------------------------------------------------

@dataclass(frozen=True)
class BleuResult:
    score: float
    precisions: tuple[float, ...]
    bp: float
    sys_len: int
    ref_len: int
    matches: tuple[int, ...]
    totals: tuple[int, ...]
    signature: str


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hyp_segments: Sequence[str], ref_segments: Sequence[str], tokenization: str = "word",
         smooth: str = "exp", max_order: int = 4, floor: float = 0.1) -> BleuResult:
    """Corpus BLEU (0-100) with brevity penalty.

    ``smooth`` is ``"exp"`` (halve the pseudo-count on each zero-match
    order), ``"floor"`` (replace zero matches by ``floor``) or ``"none"``.
    """
    if len(hyp_segments) != len(ref_segments):
        raise ValueError("hypothesis and reference counts differ")
    matches = [0] * max_order
    totals = [0] * max_order
    sys_len = ref_len = 0
    for h, r in zip(hyp_segments, ref_segments):
        ht, rt = tokenize(h, tokenization), tokenize(r, tokenization)
        sys_len += len(ht)
        ref_len += len(rt)
        for n in range(1, max_order + 1):
            hc, rc = _ngrams(ht, n), _ngrams(rt, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(0, len(ht) - n + 1)
    sig = f"bleu|n:{max_order}|tok:{tokenization}|smooth:{smooth}" + (f"[{floor}]" if smooth == "floor" else "")
    # fractions, not percentages, so a perfect match gives log(1) = 0 exactly
    fracs = [0.0] * max_order
    pseudo = 1.0
    for n in range(max_order):
        if totals[n] == 0:
            break
        if matches[n] == 0:
            if smooth == "exp":
                pseudo *= 2
                fracs[n] = 1.0 / (pseudo * totals[n])
            elif smooth == "floor":
                fracs[n] = floor / totals[n]
            elif smooth != "none":
                raise ValueError(f"unknown smoothing {smooth!r}")
        else:
            fracs[n] = matches[n] / totals[n]
    precisions = [100.0 * f for f in fracs]
    if sys_len == 0:
        bp = 0.0
    elif sys_len < ref_len:
        bp = math.exp(1 - ref_len / sys_len)
    else:
        bp = 1.0
    if not any(matches) or min(fracs) <= 0 or bp == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(f) for f in fracs) / max_order)
    return BleuResult(score, tuple(precisions), bp, sys_len, ref_len, tuple(matches), tuple(totals), sig)


# --- terminology -----------------------------------------------------------

@dataclass(frozen=True)
class TermOccurrence:
    segment: int
    target_term: str
    term_id: int | None = None


def _normalize_for_match(text: str, unspaced: bool) -> str:
    return "".join(text.split()) if unspaced else " ".join(text.split())


def term_hits(pairs: Sequence[AlignedPair], occurrences: Sequence[TermOccurrence], lang: str) -> list[bool]:
    unspaced = lang in UNSPACED_LANGS
    mode = tokenization_for(lang)
    by_index = {p.segment.index: p for p in pairs}
    out = []
    for occ in occurrences:
        if occ.segment not in by_index:
            raise ValueError(f"occurrence refers to unknown segment {occ.segment}")
        hyp = _normalize_for_match(detokenize(by_index[occ.segment].text_tokens, mode), unspaced)
        out.append(_normalize_for_match(occ.target_term, unspaced) in hyp)
    return out


def term_accuracy(pairs: Sequence[AlignedPair], occurrences: Sequence[TermOccurrence], lang: str = "de") -> float:
    """Fraction of term occurrences whose target text appears in the paired hypothesis slice."""
    if not occurrences:
        raise ValueError("no term occurrences; terminology accuracy is undefined")
    hits = term_hits(pairs, occurrences, lang)
    return sum(hits) / len(hits)


def term_accuracy_unique(pairs: Sequence[AlignedPair], occurrences: Sequence[TermOccurrence],
                         lang: str = "de") -> float:
    """Macro average over distinct target terms of their per-occurrence accuracy."""
    if not occurrences:
        raise ValueError("no term occurrences; terminology accuracy is undefined")
    groups: dict[str, list[bool]] = {}
    for occ, hit in zip(occurrences, term_hits(pairs, occurrences, lang)):
        groups.setdefault(occ.target_term, []).append(hit)
    return sum(sum(v) / len(v) for v in groups.values()) / len(groups)


# --- retrieval -------------------------------------------------------------

@dataclass(frozen=True)
class GoldOccurrence:
    chunk: int
    term_id: int
    start_s: float | None = None
    end_s: float | None = None


def recall_at_k(retrieved_sets, gold: Sequence[GoldOccurrence | tuple[int, int]], k: int = 10,
                candidate_chunks: dict[int, Sequence[int]] | None = None) -> float:
    """Fraction of gold occurrences found in the top-``k`` of their chunk's retrieved set.

    In window-tolerant mode ``candidate_chunks`` maps a gold position (index
    into ``gold``) to every chunk whose windows could contain the span.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not gold:
        raise ValueError("no gold occurrences")
    top = {rs.chunk_index: set(rs.term_ids[:k]) for rs in retrieved_sets}
    found = 0
    for pos, g in enumerate(gold):
        chunk, tid = (g.chunk, g.term_id) if isinstance(g, GoldOccurrence) else g
        chunks = candidate_chunks.get(pos, [chunk]) if candidate_chunks else [chunk]
        if any(tid in top.get(c, ()) for c in chunks):
            found += 1
    return found / len(gold)


def containing_chunks(start_s: float, end_s: float, l: float, W: float, delta: float,
                      duration_s: float) -> list[int]:
    """Chunks owning at least one window that fully contains ``[start_s, end_s]``."""
    from .stream import chunk_count, windows_for_chunk

    out = []
    for i in range(1, chunk_count(duration_s, l) + 1):
        for w in windows_for_chunk(i, l, W, delta, duration_s):
            if w.start_s <= start_s + 1e-9 and end_s <= w.end_s + 1e-9:
                out.append(i)
                break
    return out


def overhead_ratio(retriever_ms_total: float, policy_ms_total: float) -> float:
    if policy_ms_total <= 0:
        raise ZeroDivisionError("policy time must be positive")
    return retriever_ms_total / policy_ms_total


# --- report ----------------------------------------------------------------

@dataclass
class SegmentRow:
    index: int
    hyp_tokens: int
    ref_tokens: int
    laal_s: float | None
    hypothesis: str
    reference: str


@dataclass
class MetricReport:
    bleu: float
    bleu_signature: str
    term_accuracy: float | None
    term_accuracy_unique: float | None
    stream_laal_s: float | None
    laal_version: str
    laal_excluded_segments: int
    resegment_edit_distance: int
    recall_at_k: float | None = None
    k: int = 10
    overhead_ratio: float | None = None
    segments: list[SegmentRow] = field(default_factory=list)
    version: int = REPORT_VERSION

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("segments")
        return json.dumps(d, ensure_ascii=False, sort_keys=True, indent=2) + "\n"

    def write(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(self.to_json(), encoding="utf-8")
        if csv_path is not None:
            with open(csv_path, "w", newline="", encoding="utf-8") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["index", "hyp_tokens", "ref_tokens", "laal_s", "hypothesis", "reference"])
                for r in self.segments:
                    w.writerow([r.index, r.hyp_tokens, r.ref_tokens, "" if r.laal_s is None else repr(r.laal_s),
                                r.hypothesis, r.reference])


def evaluate(hyp: Sequence[tuple[str, float]], refs: Sequence[ReferenceSegment],
             occurrences: Sequence[TermOccurrence], lang: str, smooth: str = "exp",
             retrieved_sets=None, gold: Sequence[GoldOccurrence] | None = None, k: int = 10,
             timings: tuple[float, float] | None = None) -> MetricReport:
    """Score one talk. ``timings`` is ``(retriever_ms_total, policy_ms_total)`` when available."""
    mode = tokenization_for(lang)
    pairs, dist = resegment(hyp, refs, mode)
    hyp_texts = [detokenize(p.text_tokens, mode) for p in pairs]
    ref_texts = [r.target_text for r in refs]
    b = bleu(hyp_texts, ref_texts, mode, smooth)
    sl, excluded = stream_laal(pairs)
    rows = [SegmentRow(p.segment.index, len(p.tokens), len(p.ref_tokens), laal(p), h, r.target_text)
            for p, h, r in zip(pairs, hyp_texts, refs)]
    report = MetricReport(
        bleu=b.score,
        bleu_signature=b.signature,
        term_accuracy=term_accuracy(pairs, occurrences, lang) if occurrences else None,
        term_accuracy_unique=term_accuracy_unique(pairs, occurrences, lang) if occurrences else None,
        stream_laal_s=sl,
        laal_version=LAAL_VERSION,
        laal_excluded_segments=excluded,
        resegment_edit_distance=dist,
        k=k,
        segments=rows,
    )
    if retrieved_sets is not None and gold:
        report.recall_at_k = recall_at_k(retrieved_sets, gold, k)
    if timings is not None and timings[1] > 0:
        report.overhead_ratio = overhead_ratio(*timings)
    return report


def load_references(path: str | Path) -> list[ReferenceSegment]:
    out = []
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(l for l in f if l.strip()):
            r = json.loads(line)
            out.append(ReferenceSegment(int(r.get("index", i)), r.get("source_text", ""), r["target_text"],
                                        float(r["source_start_s"]), float(r["source_end_s"])))
    return out


def load_occurrences(path: str | Path) -> list[TermOccurrence]:
    with open(path, encoding="utf-8") as f:
        return [TermOccurrence(int(r["segment"]), r["target_term"], r.get("term_id"))
                for r in map(json.loads, (l for l in f if l.strip()))]

