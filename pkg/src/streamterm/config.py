"""Run configuration, per-stage seeding and run manifests."""

from __future__ import annotations

import hashlib
import json
import os
import platform
import time
import zlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import yaml

from . import __version__, kernels
from .driver import SessionParams
from .errors import ConfigError
from .retriever import RetrievalParams
from .stream import windows_per_chunk

CHUNK_SIZES = (0.96, 1.92, 2.88, 3.84)
MANIFEST_VERSION = 1
API_KEY_ENV = "STREAMTERM_API_KEY"


@dataclass
class ProviderConfig:
    kind: str = "mock"  # mock | oracle | file | remote
    dim: int | None = None
    seed: int = 0
    url: str | None = None
    matrix: str | None = None
    manifest: str | None = None
    gold_spans: str | None = None  # oracle only
    timeout_s: float = 10.0
    retries: int = 3


@dataclass
class PolicyConfig:
    kind: str = "interpreter"  # wait | echo | random | interpreter | remote
    transcript: str | None = None  # interpreter only
    hold_s: float = 1.44
    max_tokens: int = 60
    wait_prob: float = 0.3
    url: str | None = None
    history: str = "all"
    timeout_s: float = 60.0


@dataclass
class RunConfig:
    chunk_s: float = 1.92
    window_s: float = 1.92
    stride_s: float = 0.48
    k1: int = 10
    k2: int = 10
    tokens_per_unit: int = 10
    unit_s: float = 0.96
    temperature: float = 0.6
    top_p: float = 0.95
    top_k: int = 20
    seed: int = 0
    lang: str = "zh"
    retrieval: bool = True
    retrieval_workers: int = 1
    recall_k: int = 10
    smooth: str = "exp"
    pattern_weights: tuple[float, float, float] = (0.8, 0.1, 0.1)
    negatives: str = "mined"
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def validate(self, strict_chunks: bool = True) -> "RunConfig":
        pos = {"chunk_s": self.chunk_s, "window_s": self.window_s, "stride_s": self.stride_s,
               "unit_s": self.unit_s, "temperature": self.temperature, "top_p": self.top_p}
        for name, v in pos.items():
            if not v > 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        for name in ("k1", "k2", "tokens_per_unit", "top_k", "recall_k", "retrieval_workers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.top_p > 1:
            raise ConfigError("top_p must be <= 1")
        if strict_chunks and not any(abs(self.chunk_s - c) < 1e-9 for c in CHUNK_SIZES):
            raise ConfigError(f"chunk_s must be one of {CHUNK_SIZES}, got {self.chunk_s}")
        try:
            windows_per_chunk(self.chunk_s, self.stride_s)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if len(self.pattern_weights) != 3 or min(self.pattern_weights) < 0 or sum(self.pattern_weights) <= 0:
            raise ConfigError("pattern_weights must be three non-negative numbers with a positive sum")
        if self.negatives not in ("mined", "random"):
            raise ConfigError(f"negatives must be 'mined' or 'random', got {self.negatives!r}")
        if self.smooth not in ("exp", "floor", "none"):
            raise ConfigError(f"unknown smoothing {self.smooth!r}")
        if self.provider.kind not in ("mock", "oracle", "file", "remote"):
            raise ConfigError(f"unknown provider kind {self.provider.kind!r}")
        if self.policy.kind not in ("wait", "echo", "random", "interpreter", "remote"):
            raise ConfigError(f"unknown policy kind {self.policy.kind!r}")
        return self

    @property
    def retrieval_params(self) -> RetrievalParams:
        return RetrievalParams(self.window_s, self.stride_s, self.k1, self.k2)

    def session_params(self) -> SessionParams:
        return SessionParams(self.chunk_s, self.retrieval_params, self.tokens_per_unit, self.unit_s, self.lang,
                             self.retrieval, self.retrieval_workers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pattern_weights"] = list(self.pattern_weights)
        return d

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        sub = {"provider": ProviderConfig, "policy": PolicyConfig}
        for key, typ in sub.items():
            if key in data:
                raw = data[key] or {}
                if not isinstance(raw, dict):
                    raise ConfigError(f"{key} must be a mapping")
                bad = set(raw) - {f.name for f in fields(typ)}
                if bad:
                    raise ConfigError(f"unknown {key} keys: {', '.join(sorted(bad))}")
                data[key] = typ(**raw)
        if "pattern_weights" in data:
            data["pattern_weights"] = tuple(float(x) for x in data["pattern_weights"])
        return cls(**data)


def _coerce(value: str) -> Any:
    parsed = yaml.safe_load(value)
    return value if parsed is None and value not in ("null", "~") else parsed


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` overrides; dotted keys reach into sub-tables (``policy.kind=echo``)."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        target = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            target = target.setdefault(p, {})
            if not isinstance(target, dict):
                raise ConfigError(f"cannot override into non-table key {p!r}")
        target[parts[-1]] = _coerce(value)
    return data


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                strict_chunks: bool = True) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"line {mark.line + 1}: " if mark is not None else ""
            raise ConfigError(f"{path}: {where}invalid config: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    data = apply_overrides(data, overrides or [])
    try:
        cfg = RunConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return cfg.validate(strict_chunks)


def api_key() -> str | None:
    return os.environ.get(API_KEY_ENV) or None


# --- seeding ---------------------------------------------------------------

def stage_seed(root: int, stage: str) -> int:
    """Child seed for a named stage; adding a stage never shifts another stage's stream."""
    ss = np.random.SeedSequence(root, spawn_key=(zlib.crc32(stage.encode("utf-8")),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def stage_rng(root: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(stage_seed(root, stage))


# --- manifest --------------------------------------------------------------

def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict[str, dict] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    args: dict[str, Any] = field(default_factory=dict)
    versions: dict[str, str] = field(default_factory=dict)
    stages_s: dict[str, float] = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def add_input(self, name: str, path: str | Path | None) -> None:
        if path is None:
            return
        p = Path(path)
        entry = {"path": str(p.resolve())}
        if p.is_file():
            entry["sha256"] = file_sha256(p)
        self.inputs[name] = entry

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stages_s[name] = round(time.perf_counter() - t0, 6)

    def write(self, path: str | Path) -> None:
        self.versions = self.versions or software_versions()
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if int(data.get("version", 0)) != MANIFEST_VERSION:
            raise ConfigError(f"{path}: unsupported manifest version {data.get('version')}")
        return cls(**data)

    def verify_inputs(self) -> list[str]:
        """Names of inputs whose current content hash differs from the recorded one."""
        changed = []
        for name, entry in self.inputs.items():
            p = Path(entry["path"])
            if "sha256" in entry and (not p.is_file() or file_sha256(p) != entry["sha256"]):
                changed.append(name)
        return changed


def software_versions() -> dict[str, str]:
    return {"streamterm": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "kernels": kernels.BACKEND}
