"""Synthetic talks with planted terminology, for oracle-level end-to-end checks.

Run ``python -m streamterm.synthetic OUTDIR`` to write a talk as files
(audio, glossary, transcript alignment, gold term spans, references,
term occurrences).
"""

from __future__ import annotations

import argparse
import json
import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding import GoldSpan
from .glossary import Glossary
from .metrics import ReferenceSegment, TermOccurrence
from .stream import SpeechStream, write_wav
from .synth import AlignedWord

_SYLLABLES = ["ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "vu", "ze", "bo", "da", "fi", "gu", "he", "jo"]
_FILLER = ["the", "we", "then", "use", "a", "model", "for", "this", "and", "show", "that", "it", "is", "on",
           "data", "our", "new", "results", "in", "with", "very", "good", "so", "here", "you", "can", "see"]


@dataclass
class SyntheticTalk:
    stream: SpeechStream
    glossary: Glossary
    words: list[AlignedWord]
    spans: list[GoldSpan]
    references: list[ReferenceSegment]
    occurrences: list[TermOccurrence]
    lang: str


def _term_text(rng: np.random.Generator, taken: set[str]) -> str:
    while True:
        n_words = int(rng.integers(1, 4))
        words = ["".join(rng.choice(_SYLLABLES, size=int(rng.integers(2, 4)))) for _ in range(n_words)]
        text = " ".join(words)
        if text not in taken and not any(w in _FILLER for w in words):
            taken.add(text)
            return text


def _unguessable(rng: np.random.Generator, n: int = 10) -> str:
    return "".join(rng.choice(list(string.ascii_uppercase + string.digits), size=n))


def make_synthetic_talk(duration_s: float = 60.0, n_terms: int = 30, glossary_size: int = 200,
                        max_term_s: float = 1.4, rate: int = 16000, lang: str = "de", seed: int = 0,
                        words_per_segment: int = 10) -> SyntheticTalk:
    """A talk of filler words with ``n_terms`` planted glossary terms (each at most ``max_term_s`` long).

    Term translations are random upper-case strings, so nothing but the
    glossary can produce them.
    """
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    glossary = Glossary.from_pairs((_term_text(rng, taken), {lang: _unguessable(rng)})
                                   for _ in range(glossary_size))
    planted = rng.choice(glossary_size, size=n_terms, replace=n_terms > glossary_size)
    slot = duration_s / n_terms

    words: list[AlignedWord] = []
    spans: list[GoldSpan] = []
    term_of_word: dict[int, int] = {}
    t = 0.05

    def add_filler(until: float):
        nonlocal t
        while True:
            dur = float(rng.uniform(0.15, 0.35))
            if t + dur > until:
                break
            words.append(AlignedWord(str(rng.choice(_FILLER)), round(t, 3), round(t + dur, 3)))
            t = round(t + dur + float(rng.uniform(0.02, 0.08)), 3)

    for k, tid in enumerate(planted):
        e = glossary[int(tid)]
        parts = e.source_term.split()
        per = min(max_term_s / len(parts) - 0.01, float(rng.uniform(0.25, 0.45)))
        start_at = k * slot + float(rng.uniform(0.3, max(0.31, slot - len(parts) * per - 0.3)))
        add_filler(start_at)
        t0 = t
        for p in parts:
            term_of_word[len(words)] = len(spans)
            words.append(AlignedWord(p, round(t, 3), round(t + per, 3)))
            t = round(t + per, 3)
        spans.append(GoldSpan(int(tid), t0, words[-1].end_s))
        t = round(t + 0.05, 3)
    add_filler(duration_s - 0.05)

    # segments break only between words that are not inside a term
    refs, occs = [], []
    seg_words: list[int] = []

    def close_segment():
        if not seg_words:
            return
        idx = len(refs)
        src, tgt, seen_terms = [], [], set()
        for wi in seg_words:
            src.append(words[wi].word)
            si = term_of_word.get(wi)
            if si is None:
                tgt.append(words[wi].word)
            elif si not in seen_terms:
                seen_terms.add(si)
                tr = glossary[spans[si].term_id].translations[lang]
                tgt.append(tr)
                occs.append(TermOccurrence(idx, tr, spans[si].term_id))
        refs.append(ReferenceSegment(idx, " ".join(src), " ".join(tgt), words[seg_words[0]].start_s,
                                     words[seg_words[-1]].end_s))
        seg_words.clear()

    for wi in range(len(words)):
        seg_words.append(wi)
        inside = wi in term_of_word and (wi + 1) in term_of_word and term_of_word[wi] == term_of_word[wi + 1]
        if len(seg_words) >= words_per_segment and not inside:
            close_segment()
    close_segment()

    n = int(round(duration_s * rate))
    samples = (0.1 * rng.standard_normal(n)).astype(np.float32)
    return SyntheticTalk(SpeechStream(samples, rate), glossary, words, spans, refs, occs, lang)


def write_talk(talk: SyntheticTalk, out: str | Path) -> dict[str, Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / fname for name, fname in [
        ("audio", "audio.wav"), ("glossary", "glossary.tsv"), ("alignment", "alignment.jsonl"),
        ("terms", "terms.jsonl"), ("references", "references.jsonl"), ("occurrences", "occurrences.jsonl")]}
    write_wav(paths["audio"], talk.stream)
    with open(paths["glossary"], "w", encoding="utf-8") as f:
        f.write(f"term\t{talk.lang}\n")
        for e in talk.glossary:
            f.write(f"{e.source_term}\t{e.translations[talk.lang]}\n")

    def dump(path, rows):
        with open(path, "w", encoding="utf-8") as f:
            for r in rows:
                f.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")

    dump(paths["alignment"], [{"word": w.word, "start_s": w.start_s, "end_s": w.end_s} for w in talk.words])
    dump(paths["terms"], [{"term": talk.glossary[s.term_id].source_term, "term_id": s.term_id,
                           "start_s": s.start_s, "end_s": s.end_s} for s in talk.spans])
    dump(paths["references"], [{"index": r.index, "source_text": r.source_text, "target_text": r.target_text,
                                "source_start_s": r.source_start_s, "source_end_s": r.source_end_s}
                               for r in talk.references])
    dump(paths["occurrences"], [{"segment": o.segment, "target_term": o.target_term, "term_id": o.term_id}
                                for o in talk.occurrences])
    return paths


def main(argv: list[str] | None = None) -> None:
    ap = argparse.ArgumentParser(description="Write a synthetic talk with planted glossary terms.")
    ap.add_argument("out")
    ap.add_argument("--duration", type=float, default=60.0)
    ap.add_argument("--terms", type=int, default=30)
    ap.add_argument("--glossary-size", type=int, default=200)
    ap.add_argument("--rate", type=int, default=16000)
    ap.add_argument("--lang", default="de")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    talk = make_synthetic_talk(args.duration, args.terms, args.glossary_size, rate=args.rate, lang=args.lang,
                               seed=args.seed)
    for name, path in write_talk(talk, args.out).items():
        print(f"{name}\t{path}")


if __name__ == "__main__":
    main()
