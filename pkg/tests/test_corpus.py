import numpy as np
import pytest
from scipy import stats

from voxadv.corpus import (
    CorpusConfig,
    CorpusManifest,
    ManifestEntry,
    ManifestError,
    SpeakerParams,
    build_corpus,
    load_external_manifest,
    split_speakers,
    synth_bonafide,
    synth_speaker,
    synth_spoof,
)
from voxadv.features import lpms_array, mfcc_array
from voxadv.models import _cosine_loss


def test_speaker_params_are_deterministic_and_valid():
    assert synth_speaker(5) == synth_speaker(5)
    f0 = []
    for seed in range(100):
        sp = synth_speaker(seed)
        f1, f2, f3 = sp.formant_freqs_hz
        assert f1 < f2 < f3 < 8000
        f0.append(sp.f0_hz)
    f0 = np.array(f0)
    assert np.any(f0 < 150) and np.any(f0 > 180)


def test_speaker_params_validation():
    with pytest.raises(ValueError):
        SpeakerParams("x", 50.0, (500.0, 1500.0, 2500.0), (80.0, 90.0, 100.0), 1.0, 0.1)
    with pytest.raises(ValueError):
        SpeakerParams("x", 120.0, (1500.0, 500.0, 2500.0), (80.0, 90.0, 100.0), 1.0, 0.1)


def _long_spectrum(x):
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x)), n=4 * len(x))) ** 2
    freqs = np.fft.rfftfreq(4 * len(x), 1 / 16000)
    return freqs, spec


def test_bonafide_has_pitch_and_formant_structure():
    sp = synth_speaker(11)
    w = synth_bonafide(sp, 1.0, seed=4)
    assert np.array_equal(w.samples, synth_bonafide(sp, 1.0, seed=4).samples)
    freqs, spec = _long_spectrum(w.samples)
    band = (freqs > 0.6 * sp.f0_hz) & (freqs < 1.4 * sp.f0_hz)
    peak = freqs[band][np.argmax(spec[band])]
    assert abs(peak - sp.f0_hz) / sp.f0_hz < 0.12
    # smoothed envelope: more energy near F1 than far above F3
    f1, _, f3 = sp.formant_freqs_hz
    near = spec[(freqs > 0.8 * f1) & (freqs < 1.2 * f1)].mean()
    far = spec[(freqs > f3 + 2000) & (freqs < f3 + 3000)].mean()
    assert near > 10 * far
    # LPMS shows the same low-frequency peak frame-averaged
    mean_lpms = lpms_array(w.samples).mean(axis=0)
    bin_hz = 16000 / 512
    assert np.argmax(mean_lpms) * bin_hz < 1.5 * f1 + 200


def test_durations():
    sp = synth_speaker(1)
    assert len(synth_bonafide(sp, 0.75, 0)) == 12000
    with pytest.raises(ValueError):
        synth_bonafide(sp, 0.1, 0)
    with pytest.raises(ValueError):
        synth_spoof(sp, 1.0, 0, "C")


def _stats_embedding(x):
    m = mfcc_array(x)
    return np.concatenate([m.mean(axis=0), m.std(axis=0)])


def test_speaker_identity_statistics():
    """Cross-speaker distance exceeds same-speaker distance, and spoofs keep the speaker."""
    spk = [synth_speaker(s) for s in (101, 202, 303, 404)]
    bona = {sp.id: [_stats_embedding(synth_bonafide(sp, 1.0, u).samples) for u in range(3)] for sp in spk}
    spoof = {sp.id: _stats_embedding(synth_spoof(sp, 1.0, 99, "A").samples) for sp in spk}
    center = np.mean([e for v in bona.values() for e in v], axis=0)

    def d(a, b):
        return _cosine_loss(a - center, b - center)

    same = [d(v[0], v[i]) for v in bona.values() for i in (1, 2)]
    cross = [d(bona[a.id][0], bona[b.id][1]) for a in spk for b in spk if a.id != b.id]
    assert np.mean(cross) > np.mean(same)
    spoof_same = [d(spoof[sp.id], bona[sp.id][0]) for sp in spk]
    assert np.mean(spoof_same) < np.mean(cross)


def test_families_leave_different_artefacts():
    sp = synth_speaker(7)
    a = np.array([lpms_array(synth_spoof(sp, 1.0, s, "A").samples).mean(axis=0) for s in range(8)])
    b = np.array([lpms_array(synth_spoof(sp, 1.0, s, "B").samples).mean(axis=0) for s in range(8)])
    p = stats.ttest_ind(a, b, axis=0).pvalue
    assert np.min(p) < 1e-3


def test_split_sizes():
    assert split_speakers(20) == {"train_shadow": 6, "train_target": 6, "eval": 8}
    with pytest.raises(ValueError):
        split_speakers(5)


def test_small_corpus_layout(small_corpus):
    root, manifest = small_corpus
    assert len(manifest) == 8 * 4 * 3
    by_split = {s: set(manifest.speakers(s)) for s in ("train_shadow", "train_target", "eval")}
    assert not (by_split["train_shadow"] & by_split["train_target"])
    assert not (by_split["eval"] & (by_split["train_shadow"] | by_split["train_target"]))
    assert (root / "speakers.json").exists()
    again = load_external_manifest(root / "manifest.tsv")
    assert [e for e in again.entries] == manifest.entries
    first = manifest.entries[0]
    assert np.array_equal(again.load(first).samples, manifest.load(first).samples)


def test_corpus_is_reproducible(tmp_path):
    cfg = CorpusConfig(n_speakers=6, utts_per_speaker=1, duration_s=0.5, seed=9)
    m1 = build_corpus(tmp_path / "a", cfg)
    build_corpus(tmp_path / "b", cfg)
    assert (tmp_path / "a/manifest.tsv").read_bytes() == (tmp_path / "b/manifest.tsv").read_bytes()
    for e in m1.entries:
        assert (tmp_path / "a" / e.path).read_bytes() == (tmp_path / "b" / e.path).read_bytes()


def test_default_corpus_dimensions():
    cfg = CorpusConfig()
    assert (cfg.n_speakers, cfg.utts_per_speaker) == (20, 10)


def test_manifest_parsing(tmp_path):
    empty = tmp_path / "empty.tsv"
    empty.write_text("")
    assert len(load_external_manifest(empty)) == 0
    bad = tmp_path / "bad.tsv"
    bad.write_text("u1\tspk\tbonafide\tnone\tx.wav\nu2\tspk\n")
    with pytest.raises(ManifestError) as err:
        load_external_manifest(bad, require_files=False)
    assert err.value.line == 2
    wrong = tmp_path / "wrong.tsv"
    wrong.write_text("u1\tspk\tfake\tnone\tx.wav\n")
    with pytest.raises(ManifestError, match="label"):
        load_external_manifest(wrong, require_files=False)
    missing = tmp_path / "missing.tsv"
    missing.write_text("u1\tspk\tbonafide\tnone\tnope.wav\n")
    with pytest.raises(ManifestError, match="missing"):
        load_external_manifest(missing)
    five = load_external_manifest(missing, require_files=False)
    assert five.entries[0].split == "eval"


def test_manifest_invariants():
    with pytest.raises(ValueError):
        ManifestEntry("u", "s", "spoof", "none", "x.wav")
    with pytest.raises(ManifestError, match="duplicate"):
        CorpusManifest([ManifestEntry("u", "s", "bonafide", "none", "x.wav")] * 2)
    with pytest.raises(ManifestError, match="more than one split"):
        CorpusManifest(
            [
                ManifestEntry("u1", "s", "bonafide", "none", "x.wav", "eval"),
                ManifestEntry("u2", "s", "bonafide", "none", "y.wav", "train_shadow"),
            ]
        )
