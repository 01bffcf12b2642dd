"""Multi-positive InfoNCE: loss, analytic gradient w.r.t. raw embeddings, finite-difference check."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

NORM_TOL = 1e-6
GRAD_FLOOR = 1e-8
DEFAULT_TAU = 0.03


@dataclass
class ContrastiveBatch:
    anchor: np.ndarray  # (d,)
    positives: np.ndarray  # (n, d), n >= 1
    negatives: np.ndarray  # (m, d), m >= 0
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        self.anchor = np.asarray(self.anchor, dtype=np.float64)
        d = self.anchor.shape[0]
        self.positives = np.asarray(self.positives, dtype=np.float64).reshape(-1, d)
        self.negatives = np.asarray(self.negatives, dtype=np.float64).reshape(-1, d)

    def validate(self) -> None:
        _check_tau(self.tau)
        if self.positives.shape[0] < 1:
            raise ValueError("a contrastive batch needs at least one positive")
        rows = np.vstack([self.anchor[None], self.positives, self.negatives])
        if not np.all(np.isfinite(rows)):
            raise ValueError("non-finite embedding values")
        if np.any(np.abs(np.linalg.norm(rows, axis=1) - 1.0) > NORM_TOL):
            raise ValueError("batch vectors must be unit norm")

    def to_json(self) -> str:
        return json.dumps({"tau": self.tau, "anchor": self.anchor.tolist(), "positives": self.positives.tolist(),
                           "negatives": self.negatives.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "ContrastiveBatch":
        obj = json.loads(text)
        d = len(obj["anchor"])
        return cls(np.array(obj["anchor"]), np.array(obj["positives"]).reshape(-1, d),
                   np.array(obj["negatives"]).reshape(-1, d), float(obj["tau"]))


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def _lse(z: np.ndarray):
    if z.size == 0:
        return -np.inf
    m = z.max()
    return m + np.log(np.exp(z - m).sum())


def _softplus(x):
    if x == -np.inf:
        return 0.0
    return x + np.log1p(np.exp(-x)) if x > 0 else np.log1p(np.exp(x))


def _unit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / norms, norms


def loss_raw(anchor: np.ndarray, positives: np.ndarray, negatives: np.ndarray, tau: float,
             dtype=np.float64) -> float:
    """Loss on raw (possibly unnormalized) vectors; they are l2-normalized first.

    ``-log(sum_pos exp(s/tau) / sum_all exp(s/tau))`` written as
    ``softplus(lse(neg) - lse(pos))`` so that tiny losses keep full precision.
    """
    _check_tau(tau)
    a, _ = _unit(np.asarray(anchor, dtype=dtype))
    P, _ = _unit(np.asarray(positives, dtype=dtype))
    N = np.asarray(negatives, dtype=dtype)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(P)) and np.all(np.isfinite(N))):
        raise ValueError("non-finite input")
    if N.shape[0] == 0:
        return 0.0
    N, _ = _unit(N)
    zp = (P @ a) / dtype(tau)
    zn = (N @ a) / dtype(tau)
    return max(dtype(0.0), _softplus(_lse(zn) - _lse(zp)))


def infonce_loss(batch: ContrastiveBatch, dtype=np.float64) -> float:
    batch.validate()
    return float(loss_raw(batch.anchor, batch.positives, batch.negatives, batch.tau, dtype))


def grad_raw(anchor: np.ndarray, positives: np.ndarray, negatives: np.ndarray, tau: float
             ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`loss_raw` w.r.t. the raw anchor, positives and negatives."""
    _check_tau(tau)
    a_raw = np.asarray(anchor, dtype=np.float64)
    P_raw = np.asarray(positives, dtype=np.float64)
    N_raw = np.asarray(negatives, dtype=np.float64).reshape(-1, a_raw.shape[0])
    if N_raw.shape[0] == 0:
        return np.zeros_like(a_raw), np.zeros_like(P_raw), np.zeros_like(N_raw)
    a, a_norm = _unit(a_raw)
    P, P_norm = _unit(P_raw)
    N, N_norm = _unit(N_raw)
    zp = (P @ a) / tau
    zn = (N @ a) / tau
    lse_p = float(_lse(zp))
    loss = float(_softplus(_lse(zn) - lse_p))
    lse_all = lse_p + loss
    # dL/dz: positives p_all - p_pos = p_pos * expm1(-L); negatives p_all
    gzp = np.exp(zp - lse_p) * np.expm1(-loss)
    gzn = np.exp(zn - lse_all)
    gsp, gsn = gzp / tau, gzn / tau

    g_a = gsp @ P + gsn @ N
    g_P = gsp[:, None] * a[None, :]
    g_N = gsn[:, None] * a[None, :]

    def through_norm(g, u, norm):
        return (g - u * np.sum(g * u, axis=-1, keepdims=True)) / norm

    return through_norm(g_a, a, a_norm), through_norm(g_P, P, P_norm), through_norm(g_N, N, N_norm)


def infonce_grad(batch: ContrastiveBatch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    batch.validate()
    return grad_raw(batch.anchor, batch.positives, batch.negatives, batch.tau)


@dataclass(frozen=True)
class FDResult:
    max_rel_error: float
    argmax: tuple[str, int, int]  # (part, row, coordinate); anchor row is 0


GradFn = Callable[[np.ndarray, np.ndarray, np.ndarray, float], tuple[np.ndarray, np.ndarray, np.ndarray]]


def finite_diff_check(batch: ContrastiveBatch, eps: float = 1e-4, grad_fn: GradFn = grad_raw,
                      fd_dtype=np.longdouble) -> FDResult:
    """Central differences of the loss vs ``grad_fn`` on every coordinate.

    Relative error per coordinate is ``|g - fd| / max(|g|, |fd|, 1e-8)``.
    The difference quotient is evaluated in ``fd_dtype`` (extended precision
    by default): in float64 its rounding noise, about ``ulp(loss) / eps``,
    exceeds the 1e-8 floor for losses above ~1.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    parts = {"anchor": batch.anchor[None, :].astype(fd_dtype), "positives": batch.positives.astype(fd_dtype),
             "negatives": batch.negatives.astype(fd_dtype)}
    ga, gp, gn = grad_fn(batch.anchor, batch.positives, batch.negatives, batch.tau)
    analytic = {"anchor": np.asarray(ga)[None, :], "positives": np.asarray(gp), "negatives": np.asarray(gn)}

    def loss_of(p):
        return loss_raw(p["anchor"][0], p["positives"], p["negatives"], batch.tau, fd_dtype)

    worst, where = 0.0, ("anchor", 0, 0)
    for name, arr in parts.items():
        for r in range(arr.shape[0]):
            for c in range(arr.shape[1]):
                orig = arr[r, c]
                arr[r, c] = orig + eps
                up = loss_of(parts)
                arr[r, c] = orig - eps
                down = loss_of(parts)
                arr[r, c] = orig
                fd = float((up - down) / (2 * fd_dtype(eps)))
                g = float(analytic[name][r, c])
                err = abs(g - fd) / max(abs(g), abs(fd), GRAD_FLOOR)
                if err > worst:
                    worst, where = err, (name, r, c)
    return FDResult(worst, where)


def in_batch_batches(anchors: np.ndarray, positives: Sequence[np.ndarray], tau: float = DEFAULT_TAU,
                     mode: str = "other_positives") -> list[ContrastiveBatch]:
    """Per-anchor batches using other anchors' positives as negatives.

    ``mode="other_positives"`` uses every positive of every other anchor;
    ``mode="other_first"`` uses only each other anchor's first positive.
    Rows identical to one of the anchor's own positives are dropped.
    """
    if mode not in ("other_positives", "other_first"):
        raise ValueError(f"unknown negative mode {mode!r}")
    out = []
    for i, a in enumerate(anchors):
        own = np.asarray(positives[i]).reshape(-1, len(a))
        negs = []
        for j, pos in enumerate(positives):
            if j == i:
                continue
            rows = np.asarray(pos).reshape(-1, len(a))
            if mode == "other_first":
                rows = rows[:1]
            negs.extend(r for r in rows if not any(np.array_equal(r, o) for o in own))
        out.append(ContrastiveBatch(a, own, np.array(negs).reshape(-1, len(a)), tau))
    return out
