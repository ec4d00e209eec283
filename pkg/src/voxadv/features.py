"""Differentiable spectral front ends.

LPMS (log power magnitude spectrum) feeds the countermeasures and MFCC feeds
the speaker verifiers.  Both are framewise maps of a windowed DFT, so their
vector-Jacobian products are computed in closed form and overlap-added back
onto the waveform.  Griffin-Lim and fixed-phase inverse STFT are provided for
the feature-domain baseline attack.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .signal import SAMPLE_RATE, Waveform

KINDS = ("lpms", "mfcc", "power_spectrum")


@dataclass(frozen=True)
class ExtractorConfig:
    frame_len_samples: int = 400
    hop_samples: int = 160
    fft_size: int = 512
    n_mel_filters: int = 26
    n_cepstral_coeffs: int = 20
    window: str = "hann"
    log_floor: float = 1e-10
    sample_rate: int = SAMPLE_RATE
    mel_low_hz: float = 20.0
    mel_high_hz: float = 8000.0

    def __post_init__(self):
        if self.frame_len_samples <= 0 or self.hop_samples <= 0:
            raise ValueError("frame and hop lengths must be positive")
        if self.hop_samples > self.frame_len_samples:
            raise ValueError("hop_samples must not exceed frame_len_samples")
        n = self.fft_size
        if n <= 0 or n & (n - 1):
            raise ValueError("fft_size must be a power of two")
        if n < self.frame_len_samples:
            raise ValueError("fft_size must be >= frame_len_samples")
        if not 0 < self.n_cepstral_coeffs <= self.n_mel_filters <= self.n_bins:
            raise ValueError("need 0 < n_cepstral_coeffs <= n_mel_filters <= fft_size/2 + 1")
        if self.window not in ("hann", "rect"):
            raise ValueError(f"unknown window {self.window!r}")
        if not self.log_floor > 0:
            raise ValueError("log_floor must be positive")
        if not 0 <= self.mel_low_hz < self.mel_high_hz <= self.sample_rate / 2:
            raise ValueError("mel band must lie inside [0, Nyquist]")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_len_samples:
            return 0
        return 1 + (n_samples - self.frame_len_samples) // self.hop_samples

    def span(self, n_frames: int) -> int:
        """Number of samples covered by ``n_frames`` analysis frames."""
        return (n_frames - 1) * self.hop_samples + self.frame_len_samples


DEFAULT_CONFIG = ExtractorConfig()


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray
    kind: str

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {vals.shape}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("feature matrix has non-finite entries")
        object.__setattr__(self, "values", vals)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def to_csv(self, path) -> None:
        """Write one frame per row with a header naming the coefficients."""
        prefix = {"lpms": "bin", "power_spectrum": "bin", "mfcc": "c"}[self.kind]
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"{prefix}{i}" for i in range(self.values.shape[1])])
            for row in self.values:
                writer.writerow([repr(float(v)) for v in row])


@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    magnitude: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        if self.magnitude.shape != self.phase.shape:
            raise ValueError("magnitude and phase shapes differ")
        if np.any(self.magnitude < 0):
            raise ValueError("magnitude must be non-negative")

    @property
    def complex(self) -> np.ndarray:
        return self.magnitude * np.exp(1j * self.phase)


# ---------------------------------------------------------------------------
# fixed matrices


@lru_cache(maxsize=None)
def analysis_window(cfg: ExtractorConfig) -> np.ndarray:
    n = cfg.frame_len_samples
    if cfg.window == "rect":
        win = np.ones(n)
    else:
        # Hann of length n + 2 with its zero end points removed, so that every
        # sample under a frame has positive weight and the inverse is exact.
        win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(1, n + 1) / (n + 1))
    win.setflags(write=False)
    return win


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_edges_hz(cfg: ExtractorConfig) -> np.ndarray:
    """Corner frequencies (n_mel_filters + 2 of them) equally spaced in mel."""
    mels = np.linspace(hz_to_mel(cfg.mel_low_hz), hz_to_mel(cfg.mel_high_hz), cfg.n_mel_filters + 2)
    return mel_to_hz(mels)


def _triangle_antiderivative(f, lo, mid, hi):
    """Integral from -inf to ``f`` of the unit-height triangle on [lo, mid, hi]."""
    f = np.clip(f, lo, hi)
    rise = np.where(f <= mid, (f - lo) ** 2 / (2 * (mid - lo)), (mid - lo) / 2)
    fall = np.where(f > mid, (hi - mid) / 2 - (hi - f) ** 2 / (2 * (hi - mid)), 0.0)
    return rise + fall


@lru_cache(maxsize=None)
def mel_filterbank(cfg: ExtractorConfig) -> np.ndarray:
    """Triangular mel filters, shape (n_mel_filters, n_bins).

    Each weight is the unit-height triangle averaged over the frequency cell
    of its FFT bin, so narrow low-frequency filters still touch at least one
    bin and every row sums to (triangle area) / (bin width).
    """
    edges = mel_edges_hz(cfg)
    df = cfg.sample_rate / cfg.fft_size
    centers = np.arange(cfg.n_bins) * df
    cell_lo = centers - df / 2
    cell_hi = centers + df / 2
    fb = np.empty((cfg.n_mel_filters, cfg.n_bins))
    for m in range(cfg.n_mel_filters):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        fb[m] = (_triangle_antiderivative(cell_hi, lo, mid, hi) - _triangle_antiderivative(cell_lo, lo, mid, hi)) / df
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=None)
def dct_matrix(n_out: int, n_in: int) -> np.ndarray:
    """First ``n_out`` rows of the orthonormal DCT-II of size ``n_in``."""
    k = np.arange(n_out)[:, None]
    m = np.arange(n_in)[None, :]
    mat = np.sqrt(2.0 / n_in) * np.cos(np.pi * k * (2 * m + 1) / (2 * n_in))
    mat[0] /= np.sqrt(2.0)
    mat.setflags(write=False)
    return mat


# ---------------------------------------------------------------------------
# STFT and its inverse


def frame_signal(x: np.ndarray, cfg: ExtractorConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < cfg.frame_len_samples:
        raise ValueError(
            f"waveform of {x.shape[-1]} samples is shorter than one frame ({cfg.frame_len_samples})"
        )
    return sliding_window_view(x, cfg.frame_len_samples, axis=-1)[..., :: cfg.hop_samples, :]


def stft_array(x: np.ndarray, cfg: ExtractorConfig) -> np.ndarray:
    """Complex STFT, shape (..., frames, n_bins); leading axes are batch axes."""
    return np.fft.rfft(frame_signal(x, cfg) * analysis_window(cfg), n=cfg.fft_size, axis=-1)


def stft(w: Waveform, cfg: ExtractorConfig = DEFAULT_CONFIG) -> ComplexSpectrogram:
    spec = stft_array(w.samples, cfg)
    return ComplexSpectrogram(np.abs(spec), np.angle(spec))


def overlap_add(frames: np.ndarray, cfg: ExtractorConfig) -> np.ndarray:
    n_frames = frames.shape[0]
    out = np.zeros(cfg.span(n_frames))
    hop, size = cfg.hop_samples, cfg.frame_len_samples
    for i in range(n_frames):
        out[i * hop : i * hop + size] += frames[i]
    return out


@lru_cache(maxsize=64)
def _window_square_sum(cfg: ExtractorConfig, n_frames: int) -> np.ndarray:
    win = analysis_window(cfg)
    total = overlap_add(np.broadcast_to(win * win, (n_frames, win.shape[0])), cfg)
    total.setflags(write=False)
    return total


def istft_array(spec: np.ndarray, cfg: ExtractorConfig) -> np.ndarray:
    """Least-squares inverse STFT (window-square-sum normalized overlap-add)."""
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=-1)[:, : cfg.frame_len_samples]
    num = overlap_add(frames * analysis_window(cfg), cfg)
    return num / _window_square_sum(cfg, spec.shape[0])


def reconstruct_with_phase(magnitude: np.ndarray, phase: np.ndarray, cfg: ExtractorConfig = DEFAULT_CONFIG) -> Waveform:
    """Inverse STFT of ``magnitude`` combined with a (possibly mismatched) ``phase``."""
    magnitude = np.asarray(magnitude, dtype=np.float64)
    phase = np.asarray(phase, dtype=np.float64)
    if magnitude.shape != phase.shape:
        raise ValueError(f"shape mismatch: {magnitude.shape} vs {phase.shape}")
    if magnitude.shape[1] != cfg.n_bins:
        raise ValueError(f"expected {cfg.n_bins} bins, got {magnitude.shape[1]}")
    return Waveform(istft_array(magnitude * np.exp(1j * phase), cfg), cfg.sample_rate)


def _bin_weights(cfg: ExtractorConfig) -> np.ndarray:
    # Parseval weights for a one-sided spectrum
    w = np.full(cfg.n_bins, 2.0)
    w[0] = 1.0
    w[-1] = 1.0
    return w


def spectral_convergence(spec: np.ndarray, magnitude: np.ndarray, cfg: ExtractorConfig) -> float:
    """Relative distance between ``|spec|`` and ``magnitude`` in the two-sided spectral norm."""
    wts = _bin_weights(cfg)
    den = np.sqrt(np.sum(wts * magnitude**2))
    if den == 0:
        return 0.0
    return float(np.sqrt(np.sum(wts * (np.abs(spec) - magnitude) ** 2)) / den)


def griffin_lim_with_errors(
    magnitude: np.ndarray,
    cfg: ExtractorConfig = DEFAULT_CONFIG,
    iters: int = 100,
    seed: int | None = None,
) -> tuple[Waveform, list[float]]:
    """Griffin-Lim phase retrieval, also returning the per-iteration spectral convergence."""
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if magnitude.ndim != 2 or magnitude.shape[1] != cfg.n_bins:
        raise ValueError(f"magnitude must have shape (frames, {cfg.n_bins})")
    if np.any(magnitude < 0) or not np.all(np.isfinite(magnitude)):
        raise ValueError("magnitude must be finite and non-negative")
    if seed is None:
        phase = np.zeros_like(magnitude)
    else:
        phase = np.random.default_rng(seed).uniform(-np.pi, np.pi, magnitude.shape)
    target = magnitude * np.exp(1j * phase)
    errors = []
    x = None
    for _ in range(iters):
        x = istft_array(target, cfg)
        rebuilt = stft_array(x, cfg)
        errors.append(spectral_convergence(rebuilt, magnitude, cfg))
        target = magnitude * np.exp(1j * np.angle(rebuilt))
    return Waveform(x, cfg.sample_rate), errors


def griffin_lim(magnitude: np.ndarray, cfg: ExtractorConfig = DEFAULT_CONFIG, iters: int = 100, seed: int | None = None) -> Waveform:
    return griffin_lim_with_errors(magnitude, cfg, iters, seed)[0]


# ---------------------------------------------------------------------------
# forward feature maps


def power_spectrum_array(x: np.ndarray, cfg: ExtractorConfig) -> np.ndarray:
    spec = stft_array(x, cfg)
    return spec.real**2 + spec.imag**2


def lpms_array(x: np.ndarray, cfg: ExtractorConfig = DEFAULT_CONFIG) -> np.ndarray:
    return np.log(power_spectrum_array(x, cfg) + cfg.log_floor)


def mfcc_array(x: np.ndarray, cfg: ExtractorConfig = DEFAULT_CONFIG) -> np.ndarray:
    power = power_spectrum_array(x, cfg)
    logmel = np.log(power @ mel_filterbank(cfg).T + cfg.log_floor)
    return logmel @ dct_matrix(cfg.n_cepstral_coeffs, cfg.n_mel_filters).T


def lpms_forward(w: Waveform, cfg: ExtractorConfig = DEFAULT_CONFIG) -> FeatureMatrix:
    return FeatureMatrix(lpms_array(w.samples, cfg), "lpms")


def mfcc_forward(w: Waveform, cfg: ExtractorConfig = DEFAULT_CONFIG) -> FeatureMatrix:
    return FeatureMatrix(mfcc_array(w.samples, cfg), "mfcc")


def power_spectrum_forward(w: Waveform, cfg: ExtractorConfig = DEFAULT_CONFIG) -> FeatureMatrix:
    return FeatureMatrix(power_spectrum_array(w.samples, cfg), "power_spectrum")


# ---------------------------------------------------------------------------
# backward (vector-Jacobian products)


def _dct_backward(upstream: np.ndarray, dct: np.ndarray) -> np.ndarray:
    return upstream @ dct


def _power_backward(x: np.ndarray, spec: np.ndarray, grad_power: np.ndarray, cfg: ExtractorConfig) -> np.ndarray:
    """Pull a gradient on |X|^2 back through the DFT, window and framing."""
    # dP/dRe = 2 Re, dP/dIm = 2 Im; packed as G = gRe + i gIm
    g = 2.0 * grad_power * spec
    # sum_k Re(G_k e^{+2 pi i k n / N}) == N * irfft(Y) with interior bins halved
    g[:, 1:-1] *= 0.5
    frames = np.fft.irfft(g, n=cfg.fft_size, axis=-1)[:, : cfg.frame_len_samples] * cfg.fft_size
    grad = np.zeros_like(x)
    span = overlap_add(frames * analysis_window(cfg), cfg)
    grad[: span.shape[0]] = span
    return grad


def _check_upstream(upstream, expected_shape) -> np.ndarray:
    values = upstream.values if isinstance(upstream, FeatureMatrix) else np.asarray(upstream, dtype=np.float64)
    if values.shape != expected_shape:
        raise ValueError(f"upstream shape {values.shape} does not match features {expected_shape}")
    return values


def lpms_vjp_array(x: np.ndarray, upstream, cfg: ExtractorConfig = DEFAULT_CONFIG) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    spec = stft_array(x, cfg)
    power = spec.real**2 + spec.imag**2
    u = _check_upstream(upstream, power.shape)
    return _power_backward(x, spec, u / (power + cfg.log_floor), cfg)


def mfcc_vjp_array(x: np.ndarray, upstream, cfg: ExtractorConfig = DEFAULT_CONFIG) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    spec = stft_array(x, cfg)
    power = spec.real**2 + spec.imag**2
    fb = mel_filterbank(cfg)
    dct = dct_matrix(cfg.n_cepstral_coeffs, cfg.n_mel_filters)
    u = _check_upstream(upstream, (power.shape[0], dct.shape[0]))
    mel = power @ fb.T
    grad_logmel = _dct_backward(u, dct)
    grad_power = (grad_logmel / (mel + cfg.log_floor)) @ fb
    return _power_backward(x, spec, grad_power, cfg)


def vjp(extractor: str, w: Waveform, cfg: ExtractorConfig, upstream) -> np.ndarray:
    """Gradient of <upstream, g(w)> with respect to the samples of ``w``.

    Samples past the last complete frame do not influence the features and
    receive zero gradient.
    """
    if extractor == "lpms":
        return lpms_vjp_array(w.samples, upstream, cfg)
    if extractor == "mfcc":
        return mfcc_vjp_array(w.samples, upstream, cfg)
    raise ValueError(f"unknown extractor {extractor!r}")


EXTRACTORS = {
    "lpms": (lpms_array, lpms_vjp_array),
    "mfcc": (mfcc_array, mfcc_vjp_array),
}


def value_and_grad(extractor: str, x: np.ndarray, cfg: ExtractorConfig, head):
    """Evaluate ``head`` on the features of ``x`` and pull its gradient back to ``x``.

    ``head(features) -> (loss, d loss / d features)``.  Returns
    ``(loss, d loss / d x)`` with a single STFT shared by both passes.
    """
    x = np.asarray(x, dtype=np.float64)
    spec = stft_array(x, cfg)
    power = spec.real**2 + spec.imag**2
    if extractor == "lpms":
        loss, u = head(np.log(power + cfg.log_floor))
        grad_power = u / (power + cfg.log_floor)
    elif extractor == "mfcc":
        fb = mel_filterbank(cfg)
        dct = dct_matrix(cfg.n_cepstral_coeffs, cfg.n_mel_filters)
        mel = power @ fb.T
        loss, u = head(np.log(mel + cfg.log_floor) @ dct.T)
        grad_power = (_dct_backward(u, dct) / (mel + cfg.log_floor)) @ fb
    else:
        raise ValueError(f"unknown extractor {extractor!r}")
    return loss, _power_backward(x, spec, grad_power, cfg)
