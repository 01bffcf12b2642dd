"""Per-chunk sliding-window retrieval: per-window top-K1, max-score dedup, top-K2."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from .embedding import EmbeddingProvider
from .errors import DimensionError, EmbeddingError, StreamTermError
from .glossary import TermIndex, search
from .stream import Chunk, SpeechStream, Window, window_audio, windows_for_chunk, windows_per_chunk


@dataclass(frozen=True)
class RetrievalHit:
    term_id: int
    score: float
    window_end_s: float


@dataclass
class RetrievedSet:
    chunk_index: int
    hits: list[RetrievalHit] = field(default_factory=list)
    retriever_ms: float = 0.0

    @property
    def term_ids(self) -> list[int]:
        return [h.term_id for h in self.hits]

    def __len__(self) -> int:
        return len(self.hits)


@dataclass(frozen=True)
class RetrievalParams:
    window_s: float = 1.92
    stride_s: float = 0.48
    k1: int = 10
    k2: int = 10

    def validate(self, chunk_s: float) -> None:
        windows_per_chunk(chunk_s, self.stride_s)
        if self.window_s <= 0:
            raise ValueError("window length must be positive")
        if self.k1 < 0 or self.k2 < 0:
            raise ValueError("K1 and K2 must be non-negative")


class WindowRetrievalError(StreamTermError):
    def __init__(self, window: Window, cause: Exception):
        self.window = window
        super().__init__(f"retrieval failed for window [{window.start_s}, {window.end_s}] "
                         f"of chunk {window.chunk_index}: {cause}")


def aggregate(per_window_hits: Sequence[Sequence[RetrievalHit]], k2: int, chunk_index: int = 0) -> RetrievedSet:
    """Keep each term's best score (earlier window wins exact ties), rank, truncate."""
    best: dict[int, RetrievalHit] = {}
    for hits in per_window_hits:
        for h in hits:
            cur = best.get(h.term_id)
            if cur is None or h.score > cur.score:
                best[h.term_id] = h
    ranked = sorted(best.values(), key=lambda h: (-h.score, h.term_id))
    return RetrievedSet(chunk_index, ranked[: max(k2, 0)])


def _search_window(index: TermIndex, provider: EmbeddingProvider, stream: SpeechStream, w: Window,
                   k1: int) -> list[RetrievalHit]:
    try:
        span = window_audio(stream, w)
        if provider.serial:
            with provider.lock:
                q = provider.embed_window(span)
        else:
            q = provider.embed_window(span)
        return [RetrievalHit(tid, score, w.end_s) for tid, score in search(index, q, k1)]
    except (EmbeddingError, DimensionError, ValueError) as exc:
        raise WindowRetrievalError(w, exc) from exc


def retrieve_for_chunk(index: TermIndex, provider: EmbeddingProvider, stream: SpeechStream, chunk: Chunk,
                       params: RetrievalParams, chunk_s: float, max_workers: int = 1) -> RetrievedSet:
    """Retrieve the term set for one newly arrived chunk.

    Only the windows ending inside ``chunk`` are searched. ``retriever_ms``
    covers embedding, search and aggregation.
    """
    if provider.dim != index.dim:
        raise DimensionError(f"provider dim {provider.dim} != index dim {index.dim}")
    t0 = time.perf_counter()
    if len(index) == 0:
        return RetrievedSet(chunk.index, [], (time.perf_counter() - t0) * 1e3)
    windows = windows_for_chunk(chunk.index, chunk_s, params.window_s, params.stride_s, stream.duration_s)
    if max_workers > 1 and len(windows) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            per_window = list(pool.map(lambda w: _search_window(index, provider, stream, w, params.k1), windows))
    else:
        per_window = [_search_window(index, provider, stream, w, params.k1) for w in windows]
    out = aggregate(per_window, params.k2, chunk.index)
    out.retriever_ms = (time.perf_counter() - t0) * 1e3
    return out
