import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from voxadv.signal import (
    BallSpec,
    Waveform,
    WavFormatError,
    clip_to_ball,
    linf_distance,
    quantize_pcm16,
    read_wav,
    write_wav,
)

samples = arrays(np.float64, st.integers(1, 400), elements=st.floats(-1.0, 1.0))


def _raw_wav(path, pcm: np.ndarray, rate=16000, width=2, channels=1):
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(width)
        fh.setframerate(rate)
        fh.writeframes(pcm.tobytes())


@settings(max_examples=50, deadline=None)
@given(samples)
def test_wav_round_trip_within_one_step(tmp_path_factory, x):
    path = tmp_path_factory.mktemp("rt") / "x.wav"
    write_wav(Waveform(x), path)
    back = read_wav(path)
    assert len(back) == len(x)
    assert np.max(np.abs(back.samples - x)) <= 1 / 32768


def test_zero_file_reads_as_zeros(tmp_path):
    _raw_wav(tmp_path / "z.wav", np.zeros(16000, dtype="<i2"))
    w = read_wav(tmp_path / "z.wav")
    assert len(w) == 16000 and w.sample_rate == 16000
    assert not np.any(w.samples)


def test_most_negative_code_is_minus_one(tmp_path):
    _raw_wav(tmp_path / "m.wav", np.array([-32768], dtype="<i2"))
    assert read_wav(tmp_path / "m.wav").samples[0] == -1.0


@pytest.mark.parametrize("value, code", [(1.5, 32767), (0.0, 0), (0.25, 8192), (-1.0, -32768), (-2.0, -32768)])
def test_quantize_codes(value, code):
    assert quantize_pcm16(np.array([value]))[0] == code


@pytest.mark.parametrize(
    "kwargs, match",
    [({"rate": 8000}, "16000"), ({"width": 1}, "16-bit"), ({"channels": 2}, "mono")],
)
def test_reader_rejects_other_formats(tmp_path, kwargs, match):
    pcm = np.zeros(64, dtype="<i2" if kwargs.get("width", 2) == 2 else "u1")
    _raw_wav(tmp_path / "bad.wav", pcm, **kwargs)
    with pytest.raises(WavFormatError, match=match):
        read_wav(tmp_path / "bad.wav")


def test_reader_rejects_garbage(tmp_path):
    (tmp_path / "junk.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(WavFormatError):
        read_wav(tmp_path / "junk.wav")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_wav(tmp_path / "absent.wav")


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]))
    w = Waveform(np.zeros(3))
    with pytest.raises(ValueError):
        w.samples[0] = 1.0


def test_linf_examples(rng):
    a = Waveform(rng.uniform(-0.5, 0.5, 1000))
    assert linf_distance(a, a) == 0.0
    assert linf_distance(a, a.with_samples(a.samples + 0.003)) == pytest.approx(0.003, abs=1e-15)
    b = Waveform(rng.uniform(-0.5, 0.5, 1000))
    brute = 0.0
    for u, v in zip(a.samples, b.samples):
        brute = max(brute, abs(u - v))
    assert linf_distance(a, b) == brute


def test_linf_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        linf_distance(Waveform(np.zeros(3)), Waveform(np.zeros(4)))


def test_clip_examples(rng):
    center = Waveform(np.zeros(1))
    assert clip_to_ball(Waveform(np.array([0.01])), BallSpec(center, 0.001)).samples[0] == 0.001
    x = Waveform(rng.uniform(-0.5, 0.5, 200))
    cand = Waveform(x.samples + rng.uniform(-0.1, 0.1, 200))
    assert np.array_equal(clip_to_ball(cand, BallSpec(x, 0.0)).samples, x.samples)
    inside = Waveform(x.samples + rng.uniform(-0.001, 0.001, 200))
    assert np.array_equal(clip_to_ball(inside, BallSpec(x, 0.002)).samples, inside.samples)


@settings(max_examples=100, deadline=None)
@given(samples, st.floats(0.0, 0.1), st.integers(0, 2**32 - 1))
def test_clip_lands_in_ball_and_is_idempotent(x, eps, seed):
    r = np.random.default_rng(seed)
    center = Waveform(x)
    cand = Waveform(x + r.uniform(-1, 1, x.shape))
    ball = BallSpec(center, eps)
    once = clip_to_ball(cand, ball)
    # center + eps is rounded once, so allow a few ulps
    assert linf_distance(once, center) <= eps + 1e-12
    assert np.array_equal(clip_to_ball(once, ball).samples, once.samples)


def test_ball_rejects_negative_radius():
    with pytest.raises(ValueError):
        BallSpec(Waveform(np.zeros(1)), -0.1)
