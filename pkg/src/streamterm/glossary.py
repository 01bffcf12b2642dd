"""Glossary loading and exact cosine top-k search over unit-norm term vectors."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    DimensionError,
    DuplicateTermError,
    GlossaryFormatError,
    IndexingError,
    MissingTranslationError,
    SchemaVersionError,
)

INDEX_MAGIC = b"TIDX"
INDEX_VERSION = 1
_HEADER = struct.Struct("<4sIII")

NORM_TOL = 1e-6


@dataclass(frozen=True)
class GlossaryEntry:
    term_id: int
    source_term: str
    translations: dict[str, str] = field(default_factory=dict)

    def translation(self, lang: str) -> str:
        try:
            return self.translations[lang]
        except KeyError:
            raise MissingTranslationError(self.source_term, lang) from None


class Glossary:
    """Ordered list of entries with sequential ids and case-insensitive lookup."""

    def __init__(self, entries: Iterable[GlossaryEntry] = (), langs: Sequence[str] = ()):
        self.entries: list[GlossaryEntry] = list(entries)
        self.langs = list(langs)
        self._by_key: dict[str, GlossaryEntry] = {}
        for pos, e in enumerate(self.entries):
            if e.term_id != pos:
                raise ValueError(f"term_id {e.term_id} at position {pos}; ids must be sequential")
            key = e.source_term.casefold()
            if key in self._by_key:
                raise DuplicateTermError(f"duplicate term {e.source_term!r}")
            self._by_key[key] = e

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, dict[str, str]]]) -> "Glossary":
        entries = [GlossaryEntry(i, term.strip(), dict(tr)) for i, (term, tr) in enumerate(pairs)]
        langs = sorted({lang for e in entries for lang in e.translations})
        return cls(entries, langs)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[GlossaryEntry]:
        return iter(self.entries)

    def __getitem__(self, term_id: int) -> GlossaryEntry:
        return self.entries[term_id]

    def find(self, source_term: str) -> GlossaryEntry | None:
        return self._by_key.get(source_term.strip().casefold())

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for e in self.entries:
                f.write(json.dumps({"term": e.source_term, "target_translations": e.translations},
                                   ensure_ascii=False, sort_keys=True) + "\n")


def load_glossary(path: str | Path, langs: Sequence[str] | None = None) -> Glossary:
    """Read a TSV (``term<TAB>lang...`` header) or JSON-lines glossary.

    Every entry must carry a translation for each language in ``langs``.
    Source terms are trimmed; duplicates are detected case-insensitively and
    reported with the line number of the later occurrence.
    """
    text = Path(path).read_text(encoding="utf-8")
    if text.startswith("﻿"):
        text = text[1:]
    lines = text.splitlines()
    first = next((ln for ln in lines if ln.strip()), None)
    if first is None:
        return Glossary([], list(langs or []))
    if first.lstrip().startswith("{"):
        rows = _parse_jsonl(lines)
    else:
        rows = _parse_tsv(lines)

    entries: list[GlossaryEntry] = []
    seen: dict[str, int] = {}
    for lineno, term, translations in rows:
        term = term.strip()
        if not term:
            raise GlossaryFormatError("empty source term", lineno)
        key = term.casefold()
        if key in seen:
            raise DuplicateTermError(f"duplicate term {term!r} (first seen on line {seen[key]})", lineno)
        seen[key] = lineno
        for lang in langs or ():
            if not translations.get(lang, "").strip():
                raise GlossaryFormatError(f"term {term!r} has no {lang!r} translation", lineno)
        translations = {k: v.strip() for k, v in translations.items() if v.strip()}
        entries.append(GlossaryEntry(len(entries), term, translations))
    all_langs = list(langs) if langs else sorted({k for e in entries for k in e.translations})
    return Glossary(entries, all_langs)


def _parse_tsv(lines: list[str]) -> list[tuple[int, str, dict[str, str]]]:
    rows = []
    header: list[str] | None = None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        cols = line.rstrip("\r").split("\t")
        if header is None:
            if cols[0].strip().lower() != "term" or len(cols) < 2:
                raise GlossaryFormatError("header must be 'term<TAB>lang1[<TAB>lang2...]'", lineno)
            header = [c.strip() for c in cols]
            continue
        if len(cols) != len(header):
            raise GlossaryFormatError(f"expected {len(header)} columns, got {len(cols)}", lineno)
        rows.append((lineno, cols[0], dict(zip(header[1:], cols[1:]))))
    return rows


def _parse_jsonl(lines: list[str]) -> list[tuple[int, str, dict[str, str]]]:
    rows = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise GlossaryFormatError(f"invalid JSON: {exc.msg}", lineno) from None
        if not isinstance(obj, dict) or not isinstance(obj.get("term"), str):
            raise GlossaryFormatError("expected an object with a string 'term'", lineno)
        tr = obj.get("target_translations", {})
        if not isinstance(tr, dict) or not all(isinstance(v, str) for v in tr.values()):
            raise GlossaryFormatError("'target_translations' must map language to string", lineno)
        rows.append((lineno, obj["term"], tr))
    return rows


@dataclass(frozen=True)
class TermIndex:
    """Immutable flat index: one unit-norm row per glossary entry."""

    glossary: Glossary
    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != len(self.glossary):
            raise DimensionError(f"vectors shape {v.shape} does not match {len(self.glossary)} entries")
        if v.shape[0] and not np.all(np.abs(np.linalg.norm(v, axis=1) - 1.0) <= NORM_TOL):
            raise ValueError("index rows must have unit norm")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def entries(self) -> list[GlossaryEntry]:
        return self.glossary.entries

    def __len__(self) -> int:
        return self.vectors.shape[0]


def build_index(glossary: Glossary, embedder, dim: int | None = None) -> TermIndex:
    """Embed every source term; rows follow glossary order."""
    d = dim if dim is not None else embedder.dim
    rows = np.zeros((len(glossary), d), dtype=np.float64)
    for e in glossary:
        try:
            v = np.asarray(embedder.embed_term(e.source_term), dtype=np.float64)
        except Exception as exc:
            raise IndexingError(e.source_term, exc) from exc
        if v.shape != (d,):
            raise IndexingError(e.source_term, DimensionError(f"expected dim {d}, got {v.shape}"))
        rows[e.term_id] = v / np.linalg.norm(v)
    return TermIndex(glossary, rows)


def cosine_scores(vectors: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise dot products.

    A row's score depends only on that row's values, never on its position
    in the matrix (a BLAS matrix-vector product does not guarantee this), so
    identical rows tie exactly and ties resolve by id.
    """
    return (vectors * q).sum(axis=1)


def search(index: TermIndex, query: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Exact top-k by dot product; ties go to the smaller term id."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dim,):
        raise DimensionError(f"query dim {q.shape} != index dim {index.dim}")
    if k < 0:
        raise ValueError("k must be >= 0")
    if abs(float(np.linalg.norm(q)) - 1.0) > NORM_TOL:
        raise ValueError("query must be unit norm")
    n = len(index)
    k = min(k, n)
    if k == 0:
        return []
    scores = cosine_scores(index.vectors, q)
    order = np.lexsort((np.arange(n), -scores))[:k]
    return [(int(i), float(scores[i])) for i in order]


def save_index(index: TermIndex, path: str | Path) -> None:
    """Write ``path`` (TIDX binary) and ``<path>.glossary.jsonl``."""
    path = Path(path)
    n, d = index.vectors.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, n, d))
        f.write(index.vectors.astype("<f4").tobytes())
    index.glossary.to_jsonl(glossary_sidecar(path))


def glossary_sidecar(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".glossary.jsonl")


def read_matrix(path: str | Path) -> np.ndarray:
    """Read a TIDX matrix as float64."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise GlossaryFormatError(f"{path}: truncated header")
    magic, version, n, d = _HEADER.unpack_from(raw)
    if magic != INDEX_MAGIC:
        raise GlossaryFormatError(f"{path}: bad magic {magic!r}")
    if version != INDEX_VERSION:
        raise SchemaVersionError(f"{path}: unsupported index version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 4 * n * d:
        raise GlossaryFormatError(f"{path}: expected {n}x{d} floats")
    return np.frombuffer(body, dtype="<f4").reshape(n, d).astype(np.float64)


def write_matrix(path: str | Path, matrix: np.ndarray) -> None:
    n, d = matrix.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, n, d))
        f.write(np.asarray(matrix).astype("<f4").tobytes())


def load_index(path: str | Path, langs: Sequence[str] | None = None) -> TermIndex:
    vectors = read_matrix(path)
    glossary = load_glossary(glossary_sidecar(path), langs)
    return TermIndex(glossary, vectors)
