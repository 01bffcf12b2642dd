"""Speech-window and term-text embedding providers plus the attention-pooling head."""

from __future__ import annotations

import base64
import hashlib
import json
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateVectorError, EmbeddingError, RetryableEmbeddingError

EPS_NORM = 1e-12


@dataclass(frozen=True)
class AudioSpan:
    """Audio handed to a provider. ``samples`` already include left padding."""

    samples: np.ndarray
    rate: int
    start_s: float
    end_s: float
    pad_s: float = 0.0

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s + self.pad_s

    def pcm_bytes(self) -> bytes:
        return np.ascontiguousarray(self.samples, dtype="<f4").tobytes()


def l2_normalize(v: np.ndarray, eps: float = EPS_NORM) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if not norm > eps:
        raise DegenerateVectorError(f"cannot normalize vector with norm {norm:.3g}")
    return v / norm


@dataclass
class PoolingHead:
    """Two-layer scorer ``D -> h -> 1`` (tanh hidden) and a ``D x d`` projection."""

    w1: np.ndarray  # (D, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h,)
    b2: float
    proj: np.ndarray  # (D, d)
    proj_bias: np.ndarray | None = None

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "proj"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")
            setattr(self, name, arr)
        D, h = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (h,) or self.proj.shape[0] != D:
            raise ValueError("inconsistent pooling head shapes")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.proj.shape[1]

    @classmethod
    def random(cls, in_dim: int, out_dim: int, hidden: int | None = None, seed: int = 0) -> "PoolingHead":
        hidden = hidden or max(1, in_dim // 4)
        rng = np.random.default_rng(seed)
        return cls(
            w1=rng.normal(0, 1 / np.sqrt(in_dim), (in_dim, hidden)),
            b1=np.zeros(hidden),
            w2=rng.normal(0, 1 / np.sqrt(hidden), hidden),
            b2=0.0,
            proj=rng.normal(0, 1 / np.sqrt(in_dim), (in_dim, out_dim)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "PoolingHead":
        with np.load(path) as z:
            return cls(
                w1=z["w1"], b1=z["b1"], w2=z["w2"], b2=float(z["b2"]), proj=z["proj"],
                proj_bias=z["proj_bias"] if "proj_bias" in z.files else None,
            )

    def save(self, path: str | Path) -> None:
        arrays = dict(w1=self.w1, b1=self.b1, w2=self.w2, b2=np.float64(self.b2), proj=self.proj)
        if self.proj_bias is not None:
            arrays["proj_bias"] = self.proj_bias
        np.savez(path, **arrays)

    def scores(self, H: np.ndarray) -> np.ndarray:
        return np.tanh(H @ self.w1 + self.b1) @ self.w2 + self.b2


def attention_pool(H: np.ndarray, head: PoolingHead) -> np.ndarray:
    """Softmax-weighted sum of the rows of ``H``."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] == 0:
        raise ValueError("H must be a non-empty T x D matrix")
    if not np.all(np.isfinite(H)):
        raise ValueError("H contains non-finite values")
    s = head.scores(H)
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite pooling score")
    e = np.exp(s - s.max())
    alpha = e / e.sum()
    return alpha @ H


def pool_and_project(H: np.ndarray, head: PoolingHead) -> np.ndarray:
    v = attention_pool(H, head) @ head.proj
    if head.proj_bias is not None:
        v = v + head.proj_bias
    return l2_normalize(v)


class EmbeddingProvider:
    """Uniform interface: unit-norm ``embed_window`` / ``embed_term`` outputs of length ``dim``.

    Providers that are not safe for concurrent calls set ``serial = True``;
    callers then hold ``lock`` around each call.
    """

    kind = "abstract"
    serial = False

    def __init__(self, dim: int):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.lock = threading.Lock()

    def embed_window(self, span: AudioSpan) -> np.ndarray:
        raise NotImplementedError

    def embed_term(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim}


def _hash_vector(payload: bytes, seed: int, dim: int) -> np.ndarray:
    digest = hashlib.blake2b(payload, digest_size=16, key=seed.to_bytes(8, "little", signed=True)).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
    return l2_normalize(rng.standard_normal(dim))


class MockProvider(EmbeddingProvider):
    """Seeded hash of input bytes expanded to ``dim`` Gaussian coordinates."""

    kind = "mock"

    def __init__(self, dim: int, seed: int = 0):
        super().__init__(dim)
        self.seed = seed

    def embed_window(self, span: AudioSpan) -> np.ndarray:
        if span.duration_s <= 0:
            raise ValueError("window span must have positive duration")
        return _hash_vector(b"a:" + span.pcm_bytes(), self.seed, self.dim)

    def embed_term(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("empty term text")
        return _hash_vector(b"t:" + text.encode("utf-8"), self.seed, self.dim)

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "seed": self.seed}


@dataclass(frozen=True)
class GoldSpan:
    term_id: int
    start_s: float
    end_s: float


class OracleProvider(EmbeddingProvider):
    """Window vector = normalized sum of the indexed vectors of gold terms inside the window.

    Windows containing no gold span map to a fixed reserved "null" direction.
    Term embeddings come from ``term_provider``.
    """

    kind = "oracle"
    TIME_TOL = 1e-9

    def __init__(self, term_vectors: np.ndarray, spans: Sequence[GoldSpan], term_provider: EmbeddingProvider,
                 null_seed: int = 0):
        term_vectors = np.asarray(term_vectors, dtype=np.float64)
        super().__init__(term_vectors.shape[1])
        if term_provider.dim != self.dim:
            raise ValueError("term provider dim differs from index dim")
        self.term_vectors = term_vectors
        self.spans = sorted(spans, key=lambda s: (s.start_s, s.end_s, s.term_id))
        self.term_provider = term_provider
        self.null_vector = _hash_vector(b"<null-window>", null_seed, self.dim)

    def gold_in(self, start_s: float, end_s: float) -> list[int]:
        tol = self.TIME_TOL
        return [s.term_id for s in self.spans if s.start_s >= start_s - tol and s.end_s <= end_s + tol]

    def embed_window(self, span: AudioSpan) -> np.ndarray:
        if span.duration_s <= 0:
            raise ValueError("window span must have positive duration")
        ids = self.gold_in(span.start_s, span.end_s)
        if not ids:
            return self.null_vector.copy()
        return l2_normalize(self.term_vectors[ids].sum(axis=0))

    def embed_term(self, text: str) -> np.ndarray:
        return self.term_provider.embed_term(text)


def input_hash(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


class FileStoreProvider(EmbeddingProvider):
    """Precomputed vectors: a TIDX matrix plus a JSON-lines ``{"hash", "row"}`` manifest."""

    kind = "file-store"

    def __init__(self, matrix_path: str | Path, manifest_path: str | Path):
        from .glossary import read_matrix

        self.matrix = read_matrix(matrix_path)
        super().__init__(self.matrix.shape[1])
        self.rows: dict[str, int] = {}
        with open(manifest_path, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    rec = json.loads(line)
                    self.rows[rec["hash"]] = int(rec["row"])

    def _lookup(self, payload: bytes) -> np.ndarray:
        key = input_hash(payload)
        if key not in self.rows:
            raise EmbeddingError(f"no stored vector for input hash {key[:16]}...")
        return l2_normalize(self.matrix[self.rows[key]])

    def embed_window(self, span: AudioSpan) -> np.ndarray:
        return self._lookup(span.pcm_bytes())

    def embed_term(self, text: str) -> np.ndarray:
        return self._lookup(text.encode("utf-8"))


class RemoteProvider(EmbeddingProvider):
    """HTTP ``POST <url>/embed`` client with bounded retries."""

    kind = "remote"

    def __init__(self, url: str, dim: int, timeout: float = 10.0, retries: int = 3, backoff_s: float = 0.2,
                 api_key: str | None = None):
        super().__init__(dim)
        self.url = url.rstrip("/") + "/embed"
        self.timeout = timeout
        self.retries = retries
        self.backoff_s = backoff_s
        self.api_key = api_key

    def _post(self, kind: str, data: str) -> np.ndarray:
        body = json.dumps({"kind": kind, "data": data, "dim": self.dim}).encode()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last: Exception | None = None
        for attempt in range(1, self.retries + 1):
            req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read())
                break
            except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
                last = exc
                if attempt < self.retries:
                    time.sleep(self.backoff_s * 2 ** (attempt - 1))
        else:
            raise RetryableEmbeddingError(f"embedding request to {self.url} failed: {last}", self.retries)
        vec = np.asarray(payload.get("vector", []), dtype=np.float64)
        if vec.shape != (self.dim,):
            raise EmbeddingError(f"remote returned vector of shape {vec.shape}, expected ({self.dim},)")
        return l2_normalize(vec)

    def embed_window(self, span: AudioSpan) -> np.ndarray:
        return self._post("audio", base64.b64encode(span.pcm_bytes()).decode("ascii"))

    def embed_term(self, text: str) -> np.ndarray:
        return self._post("text", text)

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "url": self.url}
