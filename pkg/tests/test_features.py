import numpy as np
import pytest

from voxadv.features import (
    DEFAULT_CONFIG,
    ExtractorConfig,
    FeatureMatrix,
    analysis_window,
    griffin_lim_with_errors,
    lpms_array,
    lpms_forward,
    lpms_vjp_array,
    mel_filterbank,
    mfcc_array,
    mfcc_forward,
    mfcc_vjp_array,
    power_spectrum_array,
    reconstruct_with_phase,
    stft,
    stft_array,
    value_and_grad,
    vjp,
)
from voxadv.gradcheck import fd_vjp_full, fd_vjp_local, rel_l2
from voxadv.signal import Waveform

CFG = DEFAULT_CONFIG


def _harmonic(n=8000, f0=140.0, seed=0):
    r = np.random.default_rng(seed)
    t = np.arange(n) / 16000
    x = sum(np.sin(2 * np.pi * k * f0 * t + r.uniform(0, 2 * np.pi)) / k for k in range(1, 15))
    return 0.3 * x / np.max(np.abs(x))


def test_exact_bin_sinusoid_with_rect_window():
    cfg = ExtractorConfig(frame_len_samples=512, hop_samples=256, fft_size=512, window="rect")
    k = 37
    x = np.cos(2 * np.pi * k * np.arange(2048) / 512)
    mag = stft(Waveform(x), cfg).magnitude
    assert np.all(np.argmax(mag, axis=1) == k)
    off = np.delete(mag, k, axis=1)
    assert np.max(off) < 1e-9 * np.max(mag)


def test_zero_signal_spectra():
    x = np.zeros(1600)
    assert not np.any(stft(Waveform(x)).magnitude)
    assert np.all(lpms_array(x) == np.log(CFG.log_floor))


def test_stft_matches_naive_dft(rng):
    n = CFG.span(3)
    x = rng.standard_normal(n)
    win = analysis_window(CFG)
    naive = np.zeros((3, CFG.n_bins), dtype=complex)
    for f in range(3):
        seg = np.zeros(CFG.fft_size)
        seg[: CFG.frame_len_samples] = x[f * CFG.hop_samples : f * CFG.hop_samples + CFG.frame_len_samples] * win
        for k in range(CFG.n_bins):
            naive[f, k] = sum(seg[m] * np.exp(-2j * np.pi * k * m / CFG.fft_size) for m in range(CFG.fft_size))
    assert np.max(np.abs(stft_array(x, CFG) - naive)) < 1e-9


def test_lpms_scaling_adds_log4_on_loud_bins():
    x = _harmonic()
    a, b = lpms_array(x), lpms_array(2 * x)
    loud = np.exp(a) > 1e6 * CFG.log_floor
    assert loud.sum() > 100
    assert np.allclose((b - a)[loud], np.log(4.0), atol=1e-5)


def test_lpms_is_log_of_power(rng):
    x = rng.standard_normal(4000)
    spec = stft_array(x, CFG)
    oracle = np.log(np.abs(spec) ** 2 + CFG.log_floor)
    assert np.allclose(lpms_array(x), oracle, rtol=0, atol=1e-9)
    assert lpms_forward(Waveform(x)).kind == "lpms"


def test_mfcc_of_silence_is_scaled_constant():
    c = mfcc_array(np.zeros(1600))
    M = CFG.n_mel_filters
    assert np.allclose(c[:, 0], np.log(CFG.log_floor) * np.sqrt(M), rtol=1e-12)
    assert np.allclose(c[:, 1:], 0.0, atol=1e-9)


def test_mel_rows_sum_to_triangle_area():
    mel = lambda f: 2595.0 * np.log10(1 + f / 700.0)  # noqa: E731
    inv = lambda m: 700.0 * (10 ** (m / 2595.0) - 1)  # noqa: E731
    edges = inv(np.linspace(mel(CFG.mel_low_hz), mel(CFG.mel_high_hz), CFG.n_mel_filters + 2))
    df = CFG.sample_rate / CFG.fft_size
    area = (edges[2:] - edges[:-2]) / 2
    assert np.allclose(mel_filterbank(CFG).sum(axis=1) * df, area, rtol=1e-12)


def test_mfcc_matches_explicit_pipeline(rng):
    x = rng.standard_normal(3200)
    power = np.abs(stft_array(x, CFG)) ** 2
    fb = mel_filterbank(CFG)
    M, C = CFG.n_mel_filters, CFG.n_cepstral_coeffs
    logmel = np.log(power @ fb.T + CFG.log_floor)
    out = np.zeros((power.shape[0], C))
    for t in range(power.shape[0]):
        for k in range(C):
            scale = np.sqrt(1.0 / M) if k == 0 else np.sqrt(2.0 / M)
            out[t, k] = scale * sum(logmel[t, m] * np.cos(np.pi * k * (2 * m + 1) / (2 * M)) for m in range(M))
    assert np.max(np.abs(mfcc_array(x) - out)) < 1e-9
    assert mfcc_forward(Waveform(x)).shape == out.shape


def test_feature_matrix_validation():
    with pytest.raises(ValueError):
        FeatureMatrix(np.zeros(3), "lpms")
    with pytest.raises(ValueError):
        FeatureMatrix(np.zeros((2, 2)), "cqcc")
    with pytest.raises(ValueError):
        FeatureMatrix(np.array([[np.inf]]), "mfcc")


def test_too_short_signal_is_rejected():
    with pytest.raises(ValueError, match="shorter than one frame"):
        lpms_array(np.zeros(CFG.frame_len_samples - 1))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"hop_samples": 500},
        {"fft_size": 500},
        {"fft_size": 256},
        {"n_cepstral_coeffs": 30},
        {"window": "hamming"},
        {"log_floor": 0.0},
        {"mel_high_hz": 9000.0},
    ],
)
def test_extractor_config_validation(kwargs):
    with pytest.raises(ValueError):
        ExtractorConfig(**kwargs)


# ---------------------------------------------------------------------------
# backward passes


@pytest.mark.parametrize("kind, fwd, back", [("lpms", lpms_array, lpms_vjp_array), ("mfcc", mfcc_array, mfcc_vjp_array)])
def test_vjp_zero_and_linearity(rng, kind, fwd, back):
    x = 0.1 * rng.standard_normal(2400)
    shape = fwd(x).shape
    assert not np.any(back(x, np.zeros(shape)))
    u1, u2 = rng.standard_normal(shape), rng.standard_normal(shape)
    assert np.max(np.abs(back(x, u1 + u2) - back(x, u1) - back(x, u2))) < 1e-10 * np.max(np.abs(back(x, u1)))


@pytest.mark.parametrize("kind, fwd, back", [("lpms", lpms_array, lpms_vjp_array), ("mfcc", mfcc_array, mfcc_vjp_array)])
def test_vjp_matches_finite_differences(rng, kind, fwd, back):
    x = 0.1 * rng.standard_normal(4000)
    u = rng.standard_normal(fwd(x).shape)
    assert rel_l2(back(x, u), fd_vjp_local(kind, x, u, CFG, h=1e-5)) < 1e-4


def test_local_and_full_finite_differences_agree(rng):
    # 3 frames plus a tail that no frame covers
    x = 0.1 * rng.standard_normal(CFG.span(3) + 37)
    for kind, fwd in (("lpms", lpms_array), ("mfcc", mfcc_array)):
        u = rng.standard_normal(fwd(x).shape)
        full = fd_vjp_full(kind, x, u, CFG)
        assert rel_l2(fd_vjp_local(kind, x, u, CFG), full) < 1e-8
        assert not np.any(full[CFG.span(3) :])


def test_vjp_dispatch_and_shape_check(rng):
    w = Waveform(0.1 * rng.standard_normal(2000))
    u = rng.standard_normal(lpms_array(w.samples).shape)
    assert np.array_equal(vjp("lpms", w, CFG, FeatureMatrix(u, "lpms")), lpms_vjp_array(w.samples, u))
    with pytest.raises(ValueError, match="upstream shape"):
        vjp("lpms", w, CFG, u[:, :-1])
    with pytest.raises(ValueError):
        vjp("cqcc", w, CFG, u)


def test_value_and_grad_matches_separate_passes(rng):
    x = 0.1 * rng.standard_normal(3000)
    for kind, fwd, back in (("lpms", lpms_array, lpms_vjp_array), ("mfcc", mfcc_array, mfcc_vjp_array)):
        u = rng.standard_normal(fwd(x).shape)
        loss, g = value_and_grad(kind, x, CFG, lambda f, u=u: (float(np.sum(u * f)), u))
        assert loss == pytest.approx(float(np.sum(u * fwd(x))), rel=1e-12)
        assert np.allclose(g, back(x, u), rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------------------
# resynthesis


def test_griffin_lim_recovers_a_true_magnitude():
    x = _harmonic()
    mag = np.abs(stft_array(x, CFG))
    _, errors = griffin_lim_with_errors(mag, CFG, iters=100)
    assert errors[-1] < 0.1
    assert all(b <= a + 1e-9 for a, b in zip(errors, errors[1:]))


def test_griffin_lim_of_zero_is_zero():
    w, _ = griffin_lim_with_errors(np.zeros((5, CFG.n_bins)), CFG, iters=3)
    assert not np.any(w.samples)


def test_griffin_lim_rejects_bad_magnitude():
    with pytest.raises(ValueError):
        griffin_lim_with_errors(-np.ones((3, CFG.n_bins)), CFG)
    with pytest.raises(ValueError):
        griffin_lim_with_errors(np.ones((3, 7)), CFG)


def _rms(a):
    return float(np.sqrt(np.mean(a**2)))


def test_original_phase_reconstruction(rng):
    x = _harmonic(seed=1)
    spec = stft_array(x, CFG)
    mag, phase = np.abs(spec), np.angle(spec)
    n = CFG.span(spec.shape[0])
    assert _rms(reconstruct_with_phase(mag, phase, CFG).samples - x[:n]) < 1e-6
    assert _rms(reconstruct_with_phase(2 * mag, phase, CFG).samples - 2 * x[:n]) < 1e-6
    bent = mag * np.exp(rng.uniform(-0.5, 0.5, mag.shape))
    resynth = np.abs(stft_array(reconstruct_with_phase(bent, phase, CFG).samples, CFG))
    assert np.linalg.norm(resynth - bent) / np.linalg.norm(bent) > 1e-3


def test_power_spectrum_batch_axes(rng):
    xs = rng.standard_normal((3, 2000))
    batched = power_spectrum_array(xs, CFG)
    assert np.allclose(batched[1], power_spectrum_array(xs[1], CFG))
