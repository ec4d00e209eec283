"""Synthetic multi-speaker corpus with two families of vocoder-style spoofs.

Bonafide utterances come from a jittered glottal pulse train shaped by
time-varying formant resonators.  Spoofs re-synthesize such an utterance
through a machine vocoder stage:

* family ``A``: magnitude-only STFT squeezed through an 80-band mel
  bottleneck (as an acoustic model would emit), then Griffin-Lim;
* family ``B``: cepstrally smoothed spectral envelope with random phase.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .features import ExtractorConfig, griffin_lim, istft_array, mel_filterbank, stft_array
from .seeding import substream
from .signal import SAMPLE_RATE, Waveform, read_wav, write_wav

LABELS = ("bonafide", "spoof")
FAMILIES = ("A", "B", "none")
SPLITS = ("train_shadow", "train_target", "eval")
PEAK = 0.5
MIN_DURATION_S = 0.5

# vocoder analysis used to manufacture spoofs; deliberately not the CM front end
VOCODER_CONFIG = ExtractorConfig(frame_len_samples=512, hop_samples=128, fft_size=512)
GL_ITERS = 30
VOCODER_MELS = 80


class ManifestError(ValueError):
    """Malformed or inconsistent corpus manifest."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class SpeakerParams:
    id: str
    f0_hz: float
    formant_freqs_hz: tuple[float, float, float]
    formant_bandwidths_hz: tuple[float, float, float]
    jitter_pct: float
    breathiness: float
    tilt: float = 0.95

    def __post_init__(self):
        if not 80.0 <= self.f0_hz <= 300.0:
            raise ValueError(f"f0 {self.f0_hz} outside [80, 300] Hz")
        f = self.formant_freqs_hz
        if not (f[0] < f[1] < f[2] < 8000.0):
            raise ValueError(f"formants must be strictly increasing and below 8 kHz: {f}")
        if not 0.0 <= self.breathiness <= 1.0:
            raise ValueError("breathiness must be in [0, 1]")


def synth_speaker(seed: int, speaker_id: str | None = None) -> SpeakerParams:
    rng = substream(seed, "speaker")
    female = rng.random() < 0.5
    f0 = rng.uniform(180.0, 280.0) if female else rng.uniform(85.0, 145.0)
    scale = 1.15 if female else 1.0
    f1 = rng.uniform(350.0, 800.0) * scale
    f2 = max(f1 + 300.0, rng.uniform(1000.0, 2200.0) * scale)
    f3 = max(f2 + 400.0, rng.uniform(2300.0, 3300.0) * scale)
    return SpeakerParams(
        id=speaker_id or f"spk{seed}",
        f0_hz=float(f0),
        formant_freqs_hz=(float(f1), float(f2), float(f3)),
        formant_bandwidths_hz=(
            float(rng.uniform(50.0, 130.0)),
            float(rng.uniform(70.0, 180.0)),
            float(rng.uniform(100.0, 260.0)),
        ),
        jitter_pct=float(rng.uniform(0.5, 2.0)),
        breathiness=float(rng.uniform(0.05, 0.35)),
        tilt=float(rng.uniform(0.90, 0.98)),
    )


# ---------------------------------------------------------------------------
# bonafide synthesis


def _smooth_walk(rng, n_points: int, n_samples: int, spread: float) -> np.ndarray:
    knots = rng.uniform(-spread, spread, n_points)
    return np.interp(np.linspace(0, n_points - 1, n_samples), np.arange(n_points), knots)


def _glottal_source(sp: SpeakerParams, n: int, rng) -> np.ndarray:
    contour = sp.f0_hz * (1.0 + _smooth_walk(rng, 6, n, 0.08))
    src = np.zeros(n)
    t = 0.0
    while True:
        idx = int(t)
        if idx >= n:
            break
        src[idx] = 1.0
        period = SAMPLE_RATE / contour[idx]
        t += period * (1.0 + rng.normal(0.0, sp.jitter_pct / 100.0))
    # spectral tilt of the glottal flow
    src = sps.lfilter([1.0], [1.0, -sp.tilt], src)
    src = sps.lfilter([1.0], [1.0, -sp.tilt], src)
    return src - np.mean(src)


def _resonator(freq: float, bw: float) -> tuple[np.ndarray, np.ndarray]:
    r = np.exp(-np.pi * bw / SAMPLE_RATE)
    theta = 2 * np.pi * freq / SAMPLE_RATE
    a = np.array([1.0, -2 * r * np.cos(theta), r * r])
    return np.array([a.sum()]), a


def _formant_filter(x: np.ndarray, sp: SpeakerParams, rng, block: int = 160) -> np.ndarray:
    n = x.shape[0]
    drift = [_smooth_walk(rng, 5, n, 0.07) for _ in range(3)]
    out = x.copy()
    for k in range(3):
        zi = np.zeros(2)
        y = np.empty(n)
        for start in range(0, n, block):
            stop = min(start + block, n)
            freq = sp.formant_freqs_hz[k] * (1.0 + drift[k][start])
            b, a = _resonator(freq, sp.formant_bandwidths_hz[k])
            y[start:stop], zi = sps.lfilter(b, a, out[start:stop], zi=zi)
        out = y
    return out


def _envelope(rng, n: int) -> np.ndarray:
    n_syll = max(1, int(round(n / SAMPLE_RATE * rng.uniform(3.0, 5.0))))
    t = np.arange(n)
    env = np.full(n, 0.12)
    centers = (np.arange(n_syll) + 0.5 + rng.uniform(-0.2, 0.2, n_syll)) * n / n_syll
    width = n / n_syll * 0.35
    for c in centers:
        env += np.exp(-0.5 * ((t - c) / width) ** 2)
    return env / env.max()


def _normalize(x: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(x))
    return x * (PEAK / peak) if peak > 0 else x


def synth_bonafide(sp: SpeakerParams, duration_s: float = 1.0, seed: int = 0) -> Waveform:
    if duration_s < MIN_DURATION_S:
        raise ValueError(f"duration must be at least {MIN_DURATION_S} s")
    n = int(round(duration_s * SAMPLE_RATE))
    rng = substream(seed, "utterance", sp.id)
    voiced = _glottal_source(sp, n, rng)
    voiced /= np.std(voiced) + 1e-12
    breath = rng.normal(0.0, 1.0, n) * sp.breathiness
    shaped = _formant_filter(voiced + breath, sp, rng)
    shaped /= np.std(shaped) + 1e-12
    env = _envelope(rng, n)
    floor_noise = rng.normal(0.0, 1e-3, n)
    return Waveform(_normalize(shaped * env + floor_noise), SAMPLE_RATE)


# ---------------------------------------------------------------------------
# spoof synthesis


def _fit_length(x: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n)
    m = min(n, x.shape[0])
    out[:m] = x[:m]
    return out


def _pad(x: np.ndarray) -> np.ndarray:
    # keep real content away from the poorly covered first and last frames
    pad = VOCODER_CONFIG.frame_len_samples
    return np.concatenate([np.zeros(pad), x, np.zeros(pad)])


def _unpad(y: np.ndarray, n: int) -> np.ndarray:
    pad = VOCODER_CONFIG.frame_len_samples
    return _fit_length(y[pad:], n)


@lru_cache(maxsize=None)
def _vocoder_mel_pair() -> tuple[np.ndarray, np.ndarray]:
    fb = mel_filterbank(replace(VOCODER_CONFIG, n_mel_filters=VOCODER_MELS))
    return fb, np.linalg.pinv(fb)


def vocode_griffin_lim(x: np.ndarray, iters: int = GL_ITERS) -> np.ndarray:
    fb, inv = _vocoder_mel_pair()
    power = np.abs(stft_array(_pad(x), VOCODER_CONFIG)) ** 2
    restored = np.maximum((power @ fb.T) @ inv.T, 0.0)
    return _unpad(griffin_lim(np.sqrt(restored), VOCODER_CONFIG, iters).samples, x.shape[0])


def vocode_envelope(
    x: np.ndarray, rng, n_lifter: int = 120, phase_spread: float = np.pi / 2, cutoff_hz: float = 7000.0, top_gain: float = 0.7
) -> np.ndarray:
    """Cepstrally smoothed magnitude with jittered phase and a dulled top band."""
    cfg = VOCODER_CONFIG
    spec = stft_array(_pad(x), cfg)
    logmag = np.log(np.abs(spec) + 1e-9)
    # liftering keeps the envelope and the lower pitch harmonics
    cep = np.fft.irfft(logmag, n=cfg.fft_size, axis=-1)
    cep[:, n_lifter : cfg.fft_size - n_lifter + 1] = 0.0
    smooth = np.fft.rfft(cep, axis=-1).real
    freqs = np.arange(cfg.n_bins) * SAMPLE_RATE / cfg.fft_size
    smooth = smooth + np.where(freqs > cutoff_hz, np.log(top_gain), 0.0)
    phase = np.angle(spec) + rng.uniform(-phase_spread, phase_spread, spec.shape)
    return _unpad(istft_array(np.exp(smooth) * np.exp(1j * phase), cfg), x.shape[0])


def synth_spoof(sp: SpeakerParams, duration_s: float = 1.0, seed: int = 0, family: str = "A") -> Waveform:
    """Machine re-synthesis of the bonafide utterance ``(sp, duration_s, seed)``."""
    base = synth_bonafide(sp, duration_s, seed).samples
    if family == "A":
        out = vocode_griffin_lim(base)
    elif family == "B":
        out = vocode_envelope(base, substream(seed, "spoof-B", sp.id))
    else:
        raise ValueError(f"unknown artefact family {family!r}")
    return Waveform(_normalize(out), SAMPLE_RATE)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    label: str
    artefact_family: str
    path: str
    split: str = "eval"

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"bad label {self.label!r}")
        if self.artefact_family not in FAMILIES:
            raise ValueError(f"bad artefact family {self.artefact_family!r}")
        if (self.label == "spoof") == (self.artefact_family == "none"):
            raise ValueError(f"{self.utterance_id}: spoof entries need a family and bonafide entries 'none'")


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def __post_init__(self):
        ids = [e.utterance_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate utterance ids")
        owners: dict[str, str] = {}
        for e in self.entries:
            if owners.setdefault(e.speaker_id, e.split) != e.split:
                raise ManifestError(f"speaker {e.speaker_id} appears in more than one split")

    def __len__(self) -> int:
        return len(self.entries)

    def select(self, split=None, label=None, family=None, speaker=None) -> list[ManifestEntry]:
        return [
            e
            for e in self.entries
            if (split is None or e.split == split)
            and (label is None or e.label == label)
            and (family is None or e.artefact_family == family)
            and (speaker is None or e.speaker_id == speaker)
        ]

    def speakers(self, split=None) -> list[str]:
        return sorted({e.speaker_id for e in self.entries if split is None or e.split == split})

    def path_of(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def load(self, entry: ManifestEntry) -> Waveform:
        return read_wav(self.path_of(entry))

    def missing_files(self) -> list[str]:
        return [e.utterance_id for e in self.entries if not self.path_of(e).exists()]

    def write(self, path) -> None:
        """One tab-separated record per line: id, speaker, label, family, relative path, split."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            for e in self.entries:
                writer.writerow([e.utterance_id, e.speaker_id, e.label, e.artefact_family, e.path, e.split])


def load_external_manifest(path, require_files: bool = True) -> CorpusManifest:
    """Parse a tab-separated manifest; paths are relative to its directory.

    Five columns (id, speaker, label, family, path) are required; a sixth
    column gives the split and defaults to ``eval``.
    """
    path = Path(path)
    entries = []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) < 5:
                raise ManifestError(f"expected at least 5 tab-separated fields, got {len(cols)}", lineno)
            uid, spk, label, family, rel = cols[:5]
            split = cols[5] if len(cols) > 5 and cols[5] else "eval"
            if label not in LABELS:
                raise ManifestError(f"label must be one of {LABELS}, got {label!r}", lineno)
            if family not in FAMILIES:
                raise ManifestError(f"artefact family must be one of {FAMILIES}, got {family!r}", lineno)
            if split not in SPLITS:
                raise ManifestError(f"split must be one of {SPLITS}, got {split!r}", lineno)
            try:
                entries.append(ManifestEntry(uid, spk, label, family, rel, split))
            except ValueError as exc:
                raise ManifestError(str(exc), lineno) from exc
    try:
        manifest = CorpusManifest(entries, path.parent)
    except ManifestError as exc:
        raise ManifestError(str(exc)) from exc
    if require_files:
        missing = manifest.missing_files()
        if missing:
            raise ManifestError(f"{len(missing)} referenced files are missing, first: {missing[0]}")
    return manifest


# ---------------------------------------------------------------------------
# corpus builder


@dataclass(frozen=True)
class CorpusConfig:
    n_speakers: int = 20
    utts_per_speaker: int = 10
    duration_s: float = 1.0
    seed: int = 0


def split_speakers(n_speakers: int) -> dict[str, int]:
    if n_speakers < 6:
        raise ValueError(f"need at least 6 speakers, got {n_speakers}")
    n_train = max(2, int(round(0.3 * n_speakers)))
    return {"train_shadow": n_train, "train_target": n_train, "eval": n_speakers - 2 * n_train}


def build_corpus(out_dir, cfg: CorpusConfig = CorpusConfig()) -> CorpusManifest:
    """Write WAVs plus ``manifest.tsv`` and ``speakers.json`` under ``out_dir``.

    Every split gets, per utterance index, one bonafide take and one spoof of
    each artefact family.  Spoofs use their own utterance seeds, so they never
    copy a bonafide take verbatim.
    """
    out_dir = Path(out_dir)
    sizes = split_speakers(cfg.n_speakers)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    entries = []
    speakers = {}
    spk_index = 0
    for split in SPLITS:
        for _ in range(sizes[split]):
            spk_seed = int(substream(cfg.seed, "corpus", "speaker", spk_index).integers(2**31))
            sp = synth_speaker(spk_seed, f"spk{spk_index:03d}")
            speakers[sp.id] = {"split": split, **asdict(sp)}
            for u in range(cfg.utts_per_speaker):
                utt_seed = int(substream(cfg.seed, "corpus", "utt", spk_index, u).integers(2**31))
                spoof_seed = utt_seed ^ 0x5F5F5F
                takes = [
                    ("bonafide", "none", synth_bonafide(sp, cfg.duration_s, utt_seed)),
                    ("spoof", "A", synth_spoof(sp, cfg.duration_s, spoof_seed, "A")),
                    ("spoof", "B", synth_spoof(sp, cfg.duration_s, spoof_seed, "B")),
                ]
                for label, family, wav in takes:
                    tag = "bona" if label == "bonafide" else f"spoof{family}"
                    uid = f"{sp.id}_u{u:02d}_{tag}"
                    rel = f"wav/{uid}.wav"
                    write_wav(wav, out_dir / rel)
                    entries.append(ManifestEntry(uid, sp.id, label, family, rel, split))
            spk_index += 1
    manifest = CorpusManifest(entries, out_dir)
    manifest.write(out_dir / "manifest.tsv")
    with open(out_dir / "speakers.json", "w") as fh:
        json.dump({"config": asdict(cfg), "speakers": speakers}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
