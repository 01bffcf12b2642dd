"""Chunking a recorded talk into a causal stream and enumerating retrieval windows."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding import AudioSpan
from .errors import ConfigError

log = logging.getLogger(__name__)

DEFAULT_RATE = 16000
# all stream times are rounded to the nanosecond so that i*l comparisons are exact
TIME_DECIMALS = 9


def t(x: float) -> float:
    return round(x, TIME_DECIMALS)


@dataclass(frozen=True)
class SpeechStream:
    samples: np.ndarray
    rate: int = DEFAULT_RATE

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("sample rate must be positive")
        arr = np.asarray(self.samples, dtype=np.float32)
        if arr.ndim != 1:
            raise ValueError("stream must be mono")
        object.__setattr__(self, "samples", arr)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.rate

    def sample_at(self, time_s: float) -> int:
        return min(len(self.samples), max(0, int(round(time_s * self.rate))))


@dataclass(frozen=True)
class Chunk:
    index: int  # 1-based
    start_s: float
    end_s: float
    samples: np.ndarray

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class Window:
    start_s: float
    end_s: float
    chunk_index: int
    pad_s: float = 0.0

    @property
    def length_s(self) -> float:
        return self.end_s - self.start_s + self.pad_s


def chunk_count(duration_s: float, l: float) -> int:
    if duration_s <= 0:
        return 0
    return max(1, math.ceil(duration_s / l - 1e-9))


def chunk_stream(stream: SpeechStream, l: float) -> list[Chunk]:
    """Chunk ``i`` (1-based) covers ``((i-1)*l, i*l]``; the last one may be shorter."""
    if l <= 0:
        raise ConfigError("chunk length must be positive")
    dur = stream.duration_s
    chunks = []
    for i in range(1, chunk_count(dur, l) + 1):
        start = t((i - 1) * l)
        end = t(min(i * l, dur))
        lo, hi = stream.sample_at(start), stream.sample_at(end)
        if i == chunk_count(dur, l):
            hi = len(stream.samples)
        chunks.append(Chunk(i, start, end, stream.samples[lo:hi]))
    return chunks


def windows_per_chunk(l: float, delta: float) -> int:
    if delta <= 0 or l <= 0:
        raise ConfigError("chunk length and stride must be positive")
    if delta > l + 1e-12:
        raise ConfigError(f"stride {delta} exceeds chunk length {l}")
    ratio = l / delta
    n = round(ratio)
    if abs(ratio - n) > 1e-9 * max(1.0, ratio):
        raise ConfigError(f"chunk length {l} is not a multiple of stride {delta}")
    return n


def windows_for_chunk(chunk_index: int, l: float, W: float, delta: float, stream_duration_s: float) -> list[Window]:
    """Windows whose end falls in chunk ``chunk_index``, on the global stride grid.

    Windows reaching before time 0 are left-clipped and their missing length
    reported as ``pad_s``. In the final partial chunk, ends past the stream
    end collapse onto the stream end.
    """
    if W <= 0:
        raise ConfigError("window length must be positive")
    n = windows_per_chunk(l, delta)
    dur = t(stream_duration_s)
    out: list[Window] = []
    for j in range(1, n + 1):
        end = t(((chunk_index - 1) * n + j) * delta)
        if end > dur:
            end = dur
            if out and out[-1].end_s == end:
                break
        start = t(max(0.0, end - W))
        pad = t(max(0.0, W - end))
        out.append(Window(start, end, chunk_index, pad))
        if end == dur:
            break
    return out


def window_audio(stream: SpeechStream, window: Window) -> AudioSpan:
    lo, hi = stream.sample_at(window.start_s), stream.sample_at(window.end_s)
    body = stream.samples[lo:hi]
    npad = int(round(window.pad_s * stream.rate))
    if npad:
        body = np.concatenate([np.zeros(npad, dtype=np.float32), body])
    return AudioSpan(body, stream.rate, window.start_s, window.end_s, window.pad_s)


def load_wav(path: str | Path, target_rate: int = DEFAULT_RATE) -> SpeechStream:
    """Read 16-bit PCM or 32-bit float WAV as mono float32 at ``target_rate``."""
    from scipy.io import wavfile

    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float32) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float32) - 128.0) / 128.0
    else:
        x = data.astype(np.float32)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if rate != target_rate:
        log.info("resampling %s from %d Hz to %d Hz", path, rate, target_rate)
        n_out = int(round(len(x) * target_rate / rate))
        src_t = np.arange(len(x)) / rate
        dst_t = np.arange(n_out) / target_rate
        x = np.interp(dst_t, src_t, x).astype(np.float32)
    return SpeechStream(x, target_rate)


def write_wav(path: str | Path, stream: SpeechStream) -> None:
    from scipy.io import wavfile

    wavfile.write(str(path), stream.rate, np.asarray(stream.samples, dtype=np.float32))
