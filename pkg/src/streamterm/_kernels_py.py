"""Pure-Python alignment kernels (fallback for the compiled ``_kernels`` module)."""

from __future__ import annotations

from typing import Sequence

# backpointer codes; diagonal wins ties, then reference deletion, then hypothesis insertion
_DIAG = 0
_UP = 1
_LEFT = 2


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    """Unit-cost Levenshtein distance between two integer sequences."""
    n, m = len(a), len(b)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        ai = a[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1] + (0 if ai == b[j - 1] else 1)
            up = cur[j - 1] + 1
            if up < best:
                best = up
            left = prev[j] + 1
            if left < best:
                best = left
            cur[j] = best
        prev = cur
    return prev[m]


def align_cuts(hyp: Sequence[int], ref: Sequence[int], boundaries: Sequence[int]) -> tuple[int, list[int]]:
    """Align ``hyp`` against the concatenated reference ``ref``.

    ``boundaries`` holds the reference offsets at which segment 1..S-1 end
    (non-decreasing). Returns the minimal total edit distance and, for every
    boundary, the hypothesis offset where the optimal path crosses it. Extra
    hypothesis tokens that fall between two segments go to the earlier one.
    """
    n, m = len(hyp), len(ref)
    rows: list[bytearray] = []
    prev = list(range(m + 1))
    rows.append(bytearray([_UP] * (m + 1)))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        bp = bytearray(m + 1)
        bp[0] = _LEFT
        hi = hyp[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1] + (0 if hi == ref[j - 1] else 1)
            code = _DIAG
            up = cur[j - 1] + 1
            if up < best:
                best = up
                code = _UP
            left = prev[j] + 1
            if left < best:
                best = left
                code = _LEFT
            cur[j] = best
            bp[j] = code
        rows.append(bp)
        prev = cur

    cuts = [0] * len(boundaries)
    s = len(boundaries) - 1
    i, j = n, m
    while True:
        while s >= 0 and boundaries[s] == j:
            cuts[s] = i
            s -= 1
        if i == 0 and j == 0:
            break
        code = rows[i][j]
        if code == _DIAG:
            i -= 1
            j -= 1
        elif code == _UP:
            j -= 1
        else:
            i -= 1
    return prev[m], cuts
