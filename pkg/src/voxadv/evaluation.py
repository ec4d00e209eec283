"""Experiment harness: model training on a corpus, success-rate grids and report files.

A *pair* is one (ASV, CM) system.  An experiment crafts adversarial spoofs
with a shadow pair and counts how many the target pair accepts, for every
epsilon of a grid.  The epsilon = 0 column is the unperturbed spoofs.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, asv_loss_and_grad, cm_loss_and_grad, cmspec, reference_embedding, run_time_domain
from .channel import ChannelConfig, apply_channel, codec_aware_craft
from .corpus import CorpusManifest, ManifestEntry
from .features import lpms_array, mfcc_array
from .metrics import ScoreSet, compute_eer
from .models import (
    AsvHyper,
    AsvModel,
    CmHyper,
    CmModel,
    Verdict,
    VoiceprintStore,
    _cosine_loss,
    decide,
    enroll,
    load_model,
    save_model,
    train_asv,
    train_cm,
)
from .seeding import substream
from .signal import Waveform

EPSILONS = (0.0, 0.001, 0.003, 0.005, 0.007)
FEATURE_EPSILONS = (0.0, 0.1, 1.0, 5.0, 10.0, 20.0)
SCOPES = ("joint", "asv", "cm")
# share of the clean-point CM/ASV gradient L1 ratio used for "auto" lambda_asv
AUTO_LAMBDA_FRACTION = 0.1


# ---------------------------------------------------------------------------
# corpus access


class Bench:
    """Read-through cache of a corpus plus the enrollment conventions of the eval split."""

    def __init__(self, manifest: CorpusManifest, channel: ChannelConfig | None = None):
        self.manifest = manifest
        self._cache: dict[str, Waveform] = {}
        self.channel = channel

    def wav(self, entry: ManifestEntry) -> Waveform:
        w = self._cache.get(entry.utterance_id)
        if w is None:
            w = self.manifest.load(entry)
            self._cache[entry.utterance_id] = w
        return w

    def eval_speakers(self) -> list[str]:
        return self.manifest.speakers("eval")

    def bonafide(self, speaker: str) -> list[ManifestEntry]:
        return sorted(self.manifest.select(label="bonafide", speaker=speaker), key=lambda e: e.utterance_id)

    def enrollment(self, speaker: str) -> ManifestEntry:
        """The first bonafide take (by id) is the enrolled voiceprint."""
        takes = self.bonafide(speaker)
        if not takes:
            raise ValueError(f"speaker {speaker} has no bonafide takes")
        return takes[0]

    def references(self, speaker: str) -> list[ManifestEntry]:
        """Bonafide takes an attacker may use as ``y``: everything but the enrollment."""
        return self.bonafide(speaker)[1:]

    def spoofs(self, family: str = "A") -> list[ManifestEntry]:
        return sorted(self.manifest.select(split="eval", label="spoof", family=family), key=lambda e: e.utterance_id)


@dataclass(eq=False)
class SystemPair:
    name: str
    asv: AsvModel
    cm: CmModel
    store: VoiceprintStore = field(default_factory=VoiceprintStore)


def enroll_eval_speakers(bench: Bench, asv: AsvModel, channel: ChannelConfig | None = None) -> VoiceprintStore:
    store = VoiceprintStore()
    for spk in bench.eval_speakers():
        entry = bench.enrollment(spk)
        w = bench.wav(entry)
        if channel is not None:
            w = apply_channel(w, replace(channel, loss_rate=0.0))
        enroll(store, spk, w, asv, source=entry.utterance_id)
    return store


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class PairRecipe:
    """How one (ASV, CM) pair is trained."""

    name: str
    split: str
    family: str = "A"
    cm: CmHyper = CmHyper()
    asv: AsvHyper = AsvHyper()
    channel_matched: bool = False
    # ASV training adds copies of every bonafide take with uniform noise of these peak amplitudes
    asv_noise_levels: tuple = (0.001, 0.003, 0.007)


DEFAULT_RECIPES = (
    PairRecipe("shadow", "train_shadow", "A", CmHyper(seed=11, hidden=0), AsvHyper(dim=32, seed=11)),
    PairRecipe("target", "train_target", "A", CmHyper(seed=23, hidden=16), AsvHyper(dim=24, seed=23)),
    PairRecipe("shadowB", "train_shadow", "B", CmHyper(seed=37, hidden=0), AsvHyper(dim=32, seed=11)),
    PairRecipe("target_tel", "train_target", "A", CmHyper(seed=23, hidden=16), AsvHyper(dim=24, seed=23), True),
)


def train_pair(bench: Bench, recipe: PairRecipe, channel: ChannelConfig | None = None) -> tuple[AsvModel, CmModel]:
    """Fit the CM on bonafide vs ``recipe.family`` spoofs and the ASV on bonafide, within one split.

    With ``channel_matched`` every training take is first passed through the
    loss-free channel, as a telephone-band deployment would be trained.
    """
    entries = [
        e
        for e in bench.manifest.select(split=recipe.split)
        if e.label == "bonafide" or e.artefact_family == recipe.family
    ]
    entries.sort(key=lambda e: e.utterance_id)
    if not entries:
        raise ValueError(f"split {recipe.split} is empty")
    clean_channel = replace(channel or ChannelConfig(), loss_rate=0.0)

    def load(e):
        w = bench.wav(e)
        return apply_channel(w, clean_channel) if recipe.channel_matched else w

    waves = [load(e).samples for e in entries]
    pooled = np.array([lpms_array(w).mean(axis=0) for w in waves])
    labels = [e.label == "spoof" for e in entries]
    cm = train_cm(pooled, labels, recipe.cm, groups=[e.speaker_id for e in entries])
    feats, speakers, takes = [], [], []
    for e, x in zip(entries, waves):
        if e.label != "bonafide":
            continue
        rng = substream(recipe.asv.seed, "augment", e.utterance_id)
        for level in (0.0, *recipe.asv_noise_levels):
            noisy = x + rng.uniform(-level, level, x.shape) if level else x
            feats.append(mfcc_array(noisy))
            speakers.append(e.speaker_id)
            takes.append(e.utterance_id)
    asv = train_asv(feats, speakers, recipe.asv, groups=takes)
    for m in (cm, asv):
        m.meta.update(name=recipe.name, split=recipe.split, family=recipe.family, channel_matched=recipe.channel_matched)
    return asv, cm


def eer_rows(models: dict[str, tuple[AsvModel, CmModel]]) -> list[dict]:
    rows = []
    for name in sorted(models):
        asv, cm = models[name]
        for kind, m in (("asv", asv), ("cm", cm)):
            rows.append(
                {
                    "model": f"{name}_{kind}",
                    "kind": kind,
                    "split": m.meta.get("split", ""),
                    "family": m.meta.get("family", "") if kind == "cm" else "none",
                    "heldout_eer": m.meta.get("heldout_eer", float("nan")),
                    "threshold": m.threshold,
                }
            )
    return rows


def save_pairs(models: dict[str, tuple[AsvModel, CmModel]], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, (asv, cm) in models.items():
        save_model(asv, out_dir / f"{name}_asv.json")
        save_model(cm, out_dir / f"{name}_cm.json")


def load_pair(model_dir, name: str) -> tuple[AsvModel, CmModel]:
    model_dir = Path(model_dir)
    return load_model(model_dir / f"{name}_asv.json"), load_model(model_dir / f"{name}_cm.json")


# ---------------------------------------------------------------------------
# metrics


def scoped_accept(v: Verdict, scope: str) -> bool:
    if scope == "joint":
        return v.accept
    if scope == "asv":
        return v.asv_accept
    if scope == "cm":
        return v.cm_accept
    raise ValueError(f"unknown scope {scope!r}")


def attack_success_rate(adversarials: list[tuple[Waveform, str]], target: SystemPair) -> float:
    """Fraction of ``(waveform, claimed user)`` trials the target jointly accepts."""
    for _, user in adversarials:
        if user not in target.store:
            raise KeyError(f"user {user!r} is not enrolled")
    if not adversarials:
        return 0.0
    hits = [decide(target.asv, target.cm, target.store, user, w).accept for w, user in adversarials]
    return float(np.mean(hits))


def asv_eer_on_eval(bench: Bench, asv: AsvModel) -> float:
    """EER of enrollment-vs-take trials over the eval speakers."""
    store = enroll_eval_speakers(bench, asv)
    gen, imp = [], []
    for spk in bench.eval_speakers():
        for e in bench.references(spk):
            emb = asv.embed_values(mfcc_array(bench.wav(e).samples, asv.extractor))
            for user in store.users():
                (gen if user == spk else imp).append(_cosine_loss(emb, store[user].embedding))
    return compute_eer(ScoreSet(gen, imp))[0]


# ---------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class ExperimentSpec:
    """One report row: craft with ``shadow``, score with ``target``.

    ``lambda_asv`` may be ``"auto"``: it is then set to a fixed share of the
    median ratio between the L1 norms of the CM and ASV input gradients on
    the clean samples, so that neither term swamps the sign of their sum.
    """

    shadow: str
    target: str
    method: str = "advjoint"
    epsilons: tuple = EPSILONS
    channel: ChannelConfig | None = None
    sample_count: int = 200
    seed: int = 0
    scope: str = "joint"
    codec_aware: bool = False
    family: str = "A"
    lambda_cm: float = 1.0
    lambda_asv: float | str = "auto"
    iterations: int = 100
    mode: str = "blackbox"
    label: str = ""

    def __post_init__(self):
        if self.method not in ("advcm", "advsr", "advjoint", "cmspec"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.scope not in SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.mode not in ("whitebox", "blackbox"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if any(not e >= 0 for e in self.epsilons):
            raise ValueError("epsilons must be >= 0")

    @property
    def row_label(self) -> str:
        if self.label:
            return self.label
        tag = "+codec-aware" if self.codec_aware else ""
        return f"{self.method}{tag}:{self.shadow}->{self.target}"

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["epsilons"] = list(self.epsilons)
        return rec


@dataclass
class EvalReport:
    rows: list[str]
    epsilons: list[float]
    rates: list[list[float]]
    components: dict[str, list[list[float]]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if 0.0 not in self.epsilons:
            raise ValueError("reports must include the epsilon = 0 column")
        for row in self.rates:
            if len(row) != len(self.epsilons) or any(not 0.0 <= r <= 1.0 for r in row):
                raise ValueError("rates must be in [0, 1], one per epsilon")

    def rate(self, row: str, epsilon: float) -> float:
        return self.rates[self.rows.index(row)][self.epsilons.index(epsilon)]

    def merge(self, other: "EvalReport") -> "EvalReport":
        if other.epsilons != self.epsilons:
            raise ValueError("epsilon grids differ")
        comps = {k: self.components.get(k, []) + other.components.get(k, []) for k in set(self.components) | set(other.components)}
        meta = dict(self.metadata)
        meta["rows"] = self.metadata.get("rows", []) + other.metadata.get("rows", [])
        meta["warnings"] = self.metadata.get("warnings", []) + other.metadata.get("warnings", [])
        meta.setdefault("runtime_s", 0.0)
        meta["runtime_s"] += other.metadata.get("runtime_s", 0.0)
        return EvalReport(self.rows + other.rows, self.epsilons, self.rates + other.rates, comps, meta)


def _sample_seed(seed: int, *names) -> int:
    return int(substream(seed, *names).integers(2**63 - 1))


def pick_samples(bench: Bench, family: str, count: int, seed: int) -> list[ManifestEntry]:
    pool = bench.spoofs(family)
    if count >= len(pool):
        return pool
    keep = np.sort(substream(seed, "eval-samples").permutation(len(pool))[:count])
    return [pool[i] for i in keep]


def pick_reference(bench: Bench, asv: AsvModel, speaker: str) -> Waveform:
    """The victim take most central under the attacker's ASV (medoid of the references)."""
    refs = [bench.wav(e) for e in bench.references(speaker)]
    if not refs:
        raise ValueError(f"speaker {speaker} has no reference takes")
    emb = [asv.embed_values(mfcc_array(w.samples, asv.extractor)) for w in refs]
    cost = [sum(_cosine_loss(a, b) for b in emb) for a in emb]
    return refs[int(np.argmin(cost))]


def calibrate_lambda_asv(cm: CmModel, asv: AsvModel, pairs: list[tuple[Waveform, Waveform]]) -> float:
    ratios = []
    for x, y in pairs:
        _, gc = cm_loss_and_grad(cm, x.samples)
        _, ga = asv_loss_and_grad(asv, x.samples, reference_embedding(asv, y))
        na = np.abs(ga).sum()
        if na > 0:
            ratios.append(np.abs(gc).sum() / na)
    return float(AUTO_LAMBDA_FRACTION * np.median(ratios)) if ratios else 1.0


def run_experiment(spec: ExperimentSpec, bench: Bench, pairs: dict[str, SystemPair]) -> EvalReport:
    """Fill one row of success rates over ``spec.epsilons``."""
    t0 = time.perf_counter()
    warnings = []
    if spec.mode == "blackbox" and spec.shadow == spec.target:
        warnings.append(f"{spec.row_label}: black-box row uses the same pair as shadow and target")
    if spec.method == "cmspec":
        raise ValueError("use run_cmspec for the feature-domain baseline")
    shadow, target = pairs[spec.shadow], pairs[spec.target]
    eps_grid = sorted(set([0.0, *map(float, spec.epsilons)]))
    samples = pick_samples(bench, spec.family, spec.sample_count, spec.seed)
    refs = {spk: pick_reference(bench, shadow.asv, spk) for spk in sorted({e.speaker_id for e in samples})}
    lam_asv = spec.lambda_asv
    if lam_asv == "auto":
        lam_asv = calibrate_lambda_asv(shadow.cm, shadow.asv, [(bench.wav(e), refs[e.speaker_id]) for e in samples])
    lam_asv = float(lam_asv)

    rates, asv_rates, cm_rates = [], [], []
    for eps in eps_grid:
        hits = []
        for i, entry in enumerate(samples):
            x = bench.wav(entry)
            user = entry.speaker_id
            if eps == 0.0:
                adv = x
            else:
                cfg = AttackConfig(
                    eps,
                    iterations=spec.iterations,
                    lambda_cm=spec.lambda_cm,
                    lambda_asv=lam_asv,
                    seed=_sample_seed(spec.seed, "attack", i),
                    method=spec.method,
                )

                def attack(w, cfg=cfg, user=user):
                    return run_time_domain(spec.method, w, cfg, shadow.cm, shadow.asv, refs[user])

                if spec.codec_aware and spec.channel is not None:
                    adv = codec_aware_craft(attack, x, spec.channel, eps)
                else:
                    adv = attack(x).adversarial
            if spec.channel is not None:
                adv = apply_channel(adv, replace(spec.channel, seed=_sample_seed(spec.seed, "channel", i)))
            v = decide(target.asv, target.cm, target.store, user, adv)
            hits.append((scoped_accept(v, spec.scope), v.asv_accept, v.cm_accept))
        h = np.array(hits, dtype=float).reshape(-1, 3)
        means = h.mean(axis=0) if len(h) else np.zeros(3)
        rates.append(float(means[0]))
        asv_rates.append(float(means[1]))
        cm_rates.append(float(means[2]))
    meta = {
        "rows": [
            {
                "label": spec.row_label,
                "spec": spec.to_record(),
                "lambda_asv_used": lam_asv,
                "samples_used": len(samples),
                "channel": asdict(spec.channel) if spec.channel else None,
            }
        ],
        "warnings": warnings,
        "runtime_s": time.perf_counter() - t0,
    }
    return EvalReport([spec.row_label], eps_grid, [rates], {"asv": [asv_rates], "cm": [cm_rates]}, meta)


def run_cmspec(
    bench: Bench,
    pair: SystemPair,
    epsilons=FEATURE_EPSILONS,
    sample_count: int = 200,
    seed: int = 0,
    iterations: int = 100,
    family: str = "A",
    name: str = "",
    early_stop: bool = True,
) -> EvalReport:
    """CM acceptance of feature-domain adversarials, fed directly and after resynthesis.

    With ``early_stop`` (the default) each search halts as soon as the CM
    accepts the perturbed features, which is the feature-domain attacker's
    own success criterion.
    """
    t0 = time.perf_counter()
    eps_grid = sorted(set([0.0, *map(float, epsilons)]))
    samples = pick_samples(bench, family, sample_count, seed)
    direct, recon = [], []
    for eps in eps_grid:
        d, r = [], []
        for i, entry in enumerate(samples):
            cfg = AttackConfig(
                eps, iterations=iterations, seed=_sample_seed(seed, "attack", i), method="cmspec", early_stop=early_stop
            )
            res = cmspec(pair.cm, None, bench.wav(entry), cfg)
            d.append(res.direct_accept)
            r.append(res.reconstructed_score < pair.cm.threshold)
        direct.append(float(np.mean(d)) if d else 0.0)
        recon.append(float(np.mean(r)) if r else 0.0)
    name = name or pair.name
    meta = {
        "rows": [{"label": f"cmspec-direct:{name}"}, {"label": f"cmspec-reconstructed:{name}"}],
        "warnings": [],
        "samples_used": len(samples),
        "seed": seed,
        "iterations": iterations,
        "early_stop": early_stop,
        "epsilon_domain": "log-power features",
        "runtime_s": time.perf_counter() - t0,
    }
    return EvalReport([f"cmspec-direct:{name}", f"cmspec-reconstructed:{name}"], eps_grid, [direct, recon], {}, meta)


# ---------------------------------------------------------------------------
# presets


def _grid(shadow, target, mode, seed, samples, rows, **common):
    return [
        ExperimentSpec(shadow, target, method=m, scope=s, mode=mode, seed=seed, sample_count=samples, **common)
        for m, s in rows
    ]


def preset_specs(name: str, seed: int = 0, sample_count: int = 200, iterations: int = 100) -> list[ExperimentSpec]:
    own = [("advcm", "cm"), ("advsr", "asv"), ("advjoint", "joint")]
    if name == "whitebox-grid":
        return _grid("shadow", "shadow", "whitebox", seed, sample_count, own, iterations=iterations)
    if name == "blackbox-grid":
        rows = [("advcm", "joint"), ("advsr", "joint"), ("advjoint", "joint")]
        return _grid("shadow", "target", "blackbox", seed, sample_count, rows, iterations=iterations)
    if name == "telephony-grid":
        ch = ChannelConfig(loss_rate=0.02, redundancy=True, seed=seed)
        return [
            ExperimentSpec("shadow", "target_tel", channel=ch, seed=seed, sample_count=sample_count, iterations=iterations),
            ExperimentSpec(
                "shadow", "target_tel", channel=ch, codec_aware=True, seed=seed, sample_count=sample_count, iterations=iterations
            ),
        ]
    if name == "appendixB-grid":
        return [
            ExperimentSpec("shadow", "target", seed=seed, sample_count=sample_count, iterations=iterations),
            ExperimentSpec("shadowB", "target", seed=seed, sample_count=sample_count, iterations=iterations),
        ]
    raise KeyError(name)


PRESETS = ("whitebox-grid", "blackbox-grid", "telephony-grid", "appendixB-grid", "cmspec-grid")


def build_pairs(bench: Bench, models: dict[str, tuple[AsvModel, CmModel]], channel: ChannelConfig | None = None) -> dict[str, SystemPair]:
    pairs = {}
    for name, (asv, cm) in models.items():
        matched = bool(cm.meta.get("channel_matched"))
        store = enroll_eval_speakers(bench, asv, (channel or ChannelConfig()) if matched else None)
        pairs[name] = SystemPair(name, asv, cm, store)
    return pairs


def run_preset(
    name: str, bench: Bench, pairs: dict[str, SystemPair], seed: int = 0, sample_count: int = 200, iterations: int = 100
) -> EvalReport:
    if name == "cmspec-grid":
        return run_cmspec(bench, pairs["shadow"], sample_count=sample_count, seed=seed, iterations=iterations)
    report = None
    for spec in preset_specs(name, seed, sample_count, iterations):
        part = run_experiment(spec, bench, pairs)
        report = part if report is None else report.merge(part)
    report.metadata["preset"] = name
    return report


# ---------------------------------------------------------------------------
# report files


def _fmt(x: float) -> str:
    return repr(float(x))


def report_csv(r: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["row", *(_fmt(e) for e in r.epsilons)])
    for label, row in zip(r.rows, r.rates):
        writer.writerow([label, *(_fmt(v) for v in row)])
    return buf.getvalue()


def emit_report(r: EvalReport, path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (the grid) and ``<path>.json`` (grid, components and configs).

    Wall-clock runtime is left out so that reruns are byte-identical.
    """
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".csv", ".json") else path
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = base.with_suffix(".csv"), base.with_suffix(".json")
    csv_path.write_text(report_csv(r))
    meta = {k: v for k, v in r.metadata.items() if k != "runtime_s"}
    record = {
        "rows": r.rows,
        "epsilons": r.epsilons,
        "rates": r.rates,
        "components": r.components,
        "metadata": meta,
    }
    json_path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def read_report_csv(path) -> tuple[list[str], list[float], list[list[float]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    eps = [float(v) for v in rows[0][1:]]
    return [r[0] for r in rows[1:]], eps, [[float(v) for v in r[1:]] for r in rows[1:]]
