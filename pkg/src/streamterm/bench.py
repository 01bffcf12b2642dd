"""Compiled vs pure-Python timing of the resegmentation kernel."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass
class BenchRow:
    backend: str
    tokens: int
    segments: int
    best_ms: float
    total: int


def make_case(n_tokens: int, n_segments: int, vocab: int = 50, seed: int = 0
              ) -> tuple[list[int], list[int], list[int]]:
    """Random hypothesis, reference of similar length, and ``n_segments - 1`` cut offsets."""
    rng = np.random.default_rng(seed)
    ref = rng.integers(0, vocab, size=n_tokens).tolist()
    hyp = [x if rng.random() > 0.2 else int(rng.integers(0, vocab)) for x in ref]
    hyp = hyp[: max(0, n_tokens - int(rng.integers(0, max(1, n_tokens // 10))))]
    cuts = sorted(rng.choice(np.arange(1, n_tokens), size=min(n_segments - 1, n_tokens - 1), replace=False).tolist())
    return hyp, ref, cuts


def run(sizes=(200, 1000, 2000), segments: int = 20, repeat: int = 3, seed: int = 0) -> list[BenchRow]:
    rows = []
    impls = kernels.backends()
    for n in sizes:
        hyp, ref, cuts = make_case(n, segments, seed=seed)
        results = {}
        for name, mod in impls.items():
            best = float("inf")
            for _ in range(repeat):
                t0 = time.perf_counter()
                out = mod.align_cuts(hyp, ref, cuts)
                best = min(best, time.perf_counter() - t0)
            results[name] = (int(out[0]), list(out[1]))
            rows.append(BenchRow(name, n, segments, best * 1e3, int(out[0])))
        if len({repr(v) for v in results.values()}) != 1:
            raise AssertionError(f"kernel backends disagree at n={n}: {results}")
    return rows


def format_table(rows: list[BenchRow]) -> str:
    lines = ["backend\ttokens\tsegments\tbest_ms\tedit_distance"]
    lines += [f"{r.backend}\t{r.tokens}\t{r.segments}\t{r.best_ms:.3f}\t{r.total}" for r in rows]
    by_n: dict[int, dict[str, float]] = {}
    for r in rows:
        by_n.setdefault(r.tokens, {})[r.backend] = r.best_ms
    for n, d in by_n.items():
        if "cython" in d and "python" in d and d["cython"] > 0:
            lines.append(f"# n={n}: speedup {d['python'] / d['cython']:.1f}x")
    return "\n".join(lines)
