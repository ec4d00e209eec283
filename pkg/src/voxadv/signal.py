"""Waveform container, 16-bit PCM WAV I/O and L-infinity ball geometry."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
PCM_SCALE = 32768.0


class WavFormatError(ValueError):
    """Raised for WAV files this package cannot read."""


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono audio as float64 samples in nominal range [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        arr = np.ascontiguousarray(self.samples, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("samples contain NaN or Inf")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> "Waveform":
        return Waveform(samples, self.sample_rate)


@dataclass(frozen=True)
class BallSpec:
    """L-infinity ball of radius ``epsilon`` around ``center``."""

    center: Waveform
    epsilon: float

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    """Clamp to [-1, 1] and quantize to int16, rounding half away from zero."""
    scaled = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0) * PCM_SCALE
    q = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(q, -32768, 32767).astype("<i2")


def write_wav(w: Waveform, path) -> None:
    path = Path(path)
    pcm = quantize_pcm16(w.samples)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    """Read a 16 kHz mono 16-bit PCM WAV file, rescaled by 1/32768."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        fh = wave.open(str(path), "rb")
    except (wave.Error, EOFError) as exc:
        # the stdlib reader only understands WAVE_FORMAT_PCM
        raise WavFormatError(f"{path}: {exc}") from exc
    with fh:
        if fh.getnchannels() != 1:
            raise WavFormatError(f"{path}: expected mono, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise WavFormatError(f"{path}: expected 16-bit samples, got {8 * fh.getsampwidth()}-bit")
        if fh.getframerate() != SAMPLE_RATE:
            raise WavFormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {fh.getframerate()} Hz")
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(pcm / PCM_SCALE, SAMPLE_RATE)


def _check_compatible(a: Waveform, b: Waveform) -> None:
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} != {len(b)}")
    if a.sample_rate != b.sample_rate:
        raise ValueError(f"sample rate mismatch: {a.sample_rate} != {b.sample_rate}")


def linf_distance(a: Waveform, b: Waveform) -> float:
    _check_compatible(a, b)
    if len(a) == 0:
        return 0.0
    return float(np.max(np.abs(a.samples - b.samples)))


def clip_to_ball(candidate: Waveform, ball: BallSpec) -> Waveform:
    """Project ``candidate`` onto the ball, sample by sample."""
    _check_compatible(candidate, ball.center)
    return candidate.with_samples(clip_array(candidate.samples, ball.center.samples, ball.epsilon))


def clip_array(candidate: np.ndarray, center: np.ndarray, epsilon: float) -> np.ndarray:
    return np.minimum(center + epsilon, np.maximum(center - epsilon, candidate))
