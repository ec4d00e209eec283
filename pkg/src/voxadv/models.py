"""Desk-scale differentiable countermeasure (CM) and speaker verifier (ASV).

Both scorers follow the "lower is more acceptable" convention: a CM score is
the logit of the spoof probability and an ASV score is one minus the cosine
similarity of two speaker embeddings.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import DEFAULT_CONFIG, ExtractorConfig, FeatureMatrix, lpms_array, mfcc_array
from .metrics import ScoreSet, compute_eer
from .seeding import substream
from .signal import Waveform

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


def _require_kind(feats: FeatureMatrix, kind: str) -> np.ndarray:
    if not isinstance(feats, FeatureMatrix):
        raise TypeError("expected a FeatureMatrix")
    if feats.kind != kind:
        raise ValueError(f"expected {kind} features, got {feats.kind}")
    return feats.values


# ---------------------------------------------------------------------------
# countermeasure


@dataclass(eq=False)
class CmModel:
    """Scorer over frame-averaged LPMS, optionally with one tanh hidden layer.

    With ``hidden == 0`` the score is ``w . z + b`` on standardized pooled
    features ``z``; otherwise it is ``v . tanh(W z + c) + b``.
    """

    mean: np.ndarray
    scale: np.ndarray
    w_hidden: np.ndarray  # (hidden, n_bins), empty when hidden == 0
    b_hidden: np.ndarray
    w_out: np.ndarray
    b_out: float
    threshold: float = 0.0
    extractor: ExtractorConfig = DEFAULT_CONFIG
    pooling: str = "mean-over-frames"
    meta: dict = field(default_factory=dict)

    @property
    def hidden(self) -> int:
        return self.w_hidden.shape[0]

    def score_pooled(self, pooled: np.ndarray) -> np.ndarray:
        """Scores for pooled feature rows, shape (n, n_bins) -> (n,)."""
        z = (np.atleast_2d(pooled) - self.mean) / self.scale
        if self.hidden:
            z = np.tanh(z @ self.w_hidden.T + self.b_hidden)
        return z @ self.w_out + self.b_out

    def grad_pooled(self, pooled: np.ndarray) -> np.ndarray:
        """d score / d pooled features for a single pooled row."""
        z = (pooled - self.mean) / self.scale
        if self.hidden:
            h = np.tanh(self.w_hidden @ z + self.b_hidden)
            gz = self.w_hidden.T @ (self.w_out * (1.0 - h * h))
        else:
            gz = self.w_out
        return gz / self.scale


def cm_score(m: CmModel, feats: FeatureMatrix) -> float:
    values = _require_kind(feats, "lpms")
    return float(m.score_pooled(values.mean(axis=0))[0])


def cm_input_grad(m: CmModel, feats: FeatureMatrix) -> FeatureMatrix:
    values = _require_kind(feats, "lpms")
    g = m.grad_pooled(values.mean(axis=0)) / values.shape[0]
    return FeatureMatrix(np.broadcast_to(g, values.shape).copy(), "lpms")


def cm_accepts(m: CmModel, score: float) -> bool:
    return score < m.threshold


@dataclass(frozen=True)
class CmHyper:
    learning_rate: float = 0.05
    epochs: int = 300
    seed: int = 0
    hidden: int = 0
    l2: float = 1e-2
    holdout_fraction: float = 0.3


def _holdout_mask(n: int, groups, fraction: float, rng) -> np.ndarray:
    if groups is not None:
        uniq = sorted(set(groups))
        n_hold = max(1, int(round(fraction * len(uniq))))
        held = set(rng.permutation(np.array(uniq, dtype=object))[:n_hold].tolist())
        return np.array([g in held for g in groups])
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[: max(1, int(round(fraction * n)))]] = True
    return mask


def train_cm(pooled: np.ndarray, labels, hyper: CmHyper = CmHyper(), groups=None, extractor=DEFAULT_CONFIG) -> CmModel:
    """Fit a CM on frame-averaged LPMS rows by full-batch Adam on cross-entropy.

    ``labels`` are 1 for spoof and 0 for bonafide.  When ``groups`` (speaker
    ids) are given, the held-out split used to place the EER threshold is
    speaker-disjoint from the fitting split.
    """
    X = np.asarray(pooled, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("pooled must be (n, n_bins) with one label per row")
    if len(set(y.tolist())) < 2:
        raise ValueError("training corpus must contain both bonafide and spoof examples")
    rng = substream(hyper.seed, "train_cm")
    hold = _holdout_mask(len(y), groups, hyper.holdout_fraction, rng)
    if len(set(y[~hold].tolist())) < 2 or len(set(y[hold].tolist())) < 2:
        hold = _holdout_mask(len(y), None, hyper.holdout_fraction, rng)
    Xf, yf = X[~hold], y[~hold]
    mean = Xf.mean(axis=0)
    scale = Xf.std(axis=0) + 1e-6
    Z = (Xf - mean) / scale
    d, h = X.shape[1], hyper.hidden
    params = {
        "w_hidden": rng.normal(0.0, 1.0 / np.sqrt(d), (h, d)),
        "b_hidden": np.zeros(h),
        "w_out": rng.normal(0.0, 0.01 if h == 0 else 1.0 / np.sqrt(h), h or d),
        "b_out": np.zeros(1),
    }
    moments = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in params.items()}
    beta1, beta2 = 0.9, 0.999
    for epoch in range(1, hyper.epochs + 1):
        if h:
            act = np.tanh(Z @ params["w_hidden"].T + params["b_hidden"])
        else:
            act = Z
        logits = act @ params["w_out"] + params["b_out"][0]
        err = (1.0 / (1.0 + np.exp(-logits)) - yf) / len(yf)
        grads = {"w_out": act.T @ err + hyper.l2 * params["w_out"], "b_out": np.array([err.sum()])}
        if h:
            back = np.outer(err, params["w_out"]) * (1.0 - act * act)
            grads["w_hidden"] = back.T @ Z + hyper.l2 * params["w_hidden"]
            grads["b_hidden"] = back.sum(axis=0)
        for k, g in grads.items():
            m1, m2 = moments[k]
            m1 *= beta1
            m1 += (1 - beta1) * g
            m2 *= beta2
            m2 += (1 - beta2) * g * g
            step = hyper.learning_rate * (m1 / (1 - beta1**epoch)) / (np.sqrt(m2 / (1 - beta2**epoch)) + 1e-8)
            params[k] = params[k] - step
    model = CmModel(
        mean=mean,
        scale=scale,
        w_hidden=params["w_hidden"],
        b_hidden=params["b_hidden"],
        w_out=params["w_out"],
        b_out=float(params["b_out"][0]),
        extractor=extractor,
    )
    held = model.score_pooled(X[hold])
    eer, thr = compute_eer(ScoreSet(held[y[hold] == 0], held[y[hold] == 1]))
    model.threshold = thr
    model.meta = {"heldout_eer": eer, "hyper": asdict(hyper), "n_train": int((~hold).sum()), "n_heldout": int(hold.sum())}
    return model


# ---------------------------------------------------------------------------
# speaker verifier


def pooled_stats(values: np.ndarray) -> np.ndarray:
    if values.shape[0] < 2:
        raise ValueError("statistics pooling needs at least 2 frames")
    mu = values.mean(axis=0)
    sd = np.sqrt(np.mean((values - mu) ** 2, axis=0))
    return np.concatenate([mu, sd])


def pooled_stats_vjp(values: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    n, c = values.shape
    mu = values.mean(axis=0)
    centered = values - mu
    sd = np.sqrt(np.mean(centered**2, axis=0))
    g_sd = np.divide(upstream[c:], n * sd, out=np.zeros(c), where=sd > 0)
    return upstream[:c] / n + centered * g_sd


@dataclass(eq=False)
class AsvModel:
    """Mean/std statistics pooling of MFCC frames, centered and linearly projected."""

    center: np.ndarray
    projection: np.ndarray  # (dim, 2 * n_ceps)
    threshold: float = 0.5
    extractor: ExtractorConfig = DEFAULT_CONFIG
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.projection.shape[0]

    def embed_values(self, values: np.ndarray) -> np.ndarray:
        return self.projection @ (pooled_stats(values) - self.center)


def asv_embed(m: AsvModel, feats: FeatureMatrix) -> np.ndarray:
    return m.embed_values(_require_kind(feats, "mfcc"))


def _cosine_loss(a: np.ndarray, b: np.ndarray) -> float:
    aa, bb = float(a @ a), float(b @ b)
    if aa == 0.0 or bb == 0.0:
        raise ValueError("zero-norm embedding")
    # sqrt(aa * bb) == aa exactly when a == b, so self-loss is exactly zero
    cos = float(a @ b) / np.sqrt(aa * bb)
    return 1.0 - min(1.0, max(-1.0, cos))


def asv_loss_embeddings(ex: np.ndarray, ey: np.ndarray) -> float:
    return _cosine_loss(ex, ey)


def asv_loss(m: AsvModel, feats_x: FeatureMatrix, feats_y: FeatureMatrix) -> float:
    return _cosine_loss(asv_embed(m, feats_x), asv_embed(m, feats_y))


def asv_loss_grad_values(m: AsvModel, values_x: np.ndarray, ey: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss against a fixed reference embedding and its gradient w.r.t. the MFCC frames."""
    ex = m.embed_values(values_x)
    nx, ny = np.linalg.norm(ex), np.linalg.norm(ey)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("zero-norm embedding")
    cos = float(ex @ ey) / (nx * ny)
    g_emb = -(ey / (nx * ny) - cos * ex / (nx * nx))
    return 1.0 - cos, pooled_stats_vjp(values_x, m.projection.T @ g_emb)


def asv_input_grad(m: AsvModel, feats_x: FeatureMatrix, feats_y: FeatureMatrix) -> FeatureMatrix:
    _, g = asv_loss_grad_values(m, _require_kind(feats_x, "mfcc"), asv_embed(m, feats_y))
    return FeatureMatrix(g, "mfcc")


def asv_accepts(m: AsvModel, loss: float) -> bool:
    return loss < m.threshold


@dataclass(frozen=True)
class AsvHyper:
    dim: int = 32
    wccn_reg: float = 0.1
    holdout_fraction: float = 0.3
    seed: int = 0


def train_asv(
    mfccs: list[np.ndarray], speakers, hyper: AsvHyper = AsvHyper(), extractor=DEFAULT_CONFIG, groups=None
) -> AsvModel:
    """Fit centering, within-speaker whitening and a PCA projection on bonafide MFCCs.

    A per-speaker fraction of takes is held out to place the threshold at the
    EER point of same-speaker versus cross-speaker trials.  ``groups`` marks
    items derived from the same take (e.g. augmented copies), which are
    always held out together.
    """
    speakers = list(speakers)
    if len(set(speakers)) < 2:
        raise ValueError("need at least two speakers")
    stats = np.array([pooled_stats(v) for v in mfccs])
    rng = substream(hyper.seed, "train_asv")
    groups = list(range(len(speakers))) if groups is None else list(groups)
    hold = np.zeros(len(speakers), dtype=bool)
    for spk in sorted(set(speakers)):
        takes = sorted({g for g, s in zip(groups, speakers) if s == spk})
        n_hold = int(round(hyper.holdout_fraction * len(takes)))
        if len(takes) - n_hold >= 2 and n_hold >= 2:
            held = {takes[i] for i in rng.permutation(len(takes))[:n_hold]}
            hold |= np.array([g in held for g in groups])
    fit = ~hold
    spk_arr = np.array(speakers, dtype=object)
    S = stats[fit]
    center = S.mean(axis=0)
    within = np.zeros((S.shape[1], S.shape[1]))
    for spk in sorted(set(spk_arr[fit].tolist())):
        d = S[spk_arr[fit] == spk]
        d = d - d.mean(axis=0)
        within += d.T @ d
    within /= S.shape[0]
    within += hyper.wccn_reg * np.mean(np.diag(within)) * np.eye(within.shape[0])
    evals, evecs = np.linalg.eigh(within)
    whiten = (evecs / np.sqrt(evals)).T
    Zw = (S - center) @ whiten.T
    _, _, vt = np.linalg.svd(Zw - Zw.mean(axis=0), full_matrices=False)
    dim = min(hyper.dim, vt.shape[0])
    vt = vt[:dim]
    # fix the SVD sign ambiguity so the projection is reproducible
    pivot = np.argmax(np.abs(vt), axis=1)
    vt = vt * np.sign(vt[np.arange(dim), pivot])[:, None]
    model = AsvModel(center=center, projection=vt @ whiten, extractor=extractor)
    if hold.any():
        emb = (stats[hold] - center) @ model.projection.T
        hs = spk_arr[hold]
        gen, imp = [], []
        for i in range(len(emb)):
            for j in range(i + 1, len(emb)):
                (gen if hs[i] == hs[j] else imp).append(_cosine_loss(emb[i], emb[j]))
        eer, thr = compute_eer(ScoreSet(gen, imp))
        model.threshold = thr
        model.meta["heldout_eer"] = eer
    model.meta["hyper"] = asdict(hyper)
    return model


# ---------------------------------------------------------------------------
# enrollment and the joint decision


@dataclass(frozen=True)
class Voiceprint:
    embedding: np.ndarray
    source: str = ""


@dataclass
class VoiceprintStore:
    prints: dict[str, Voiceprint] = field(default_factory=dict)

    def __contains__(self, user_id: str) -> bool:
        return user_id in self.prints

    def __getitem__(self, user_id: str) -> Voiceprint:
        try:
            return self.prints[user_id]
        except KeyError:
            raise KeyError(f"user {user_id!r} is not enrolled") from None

    def users(self) -> list[str]:
        return sorted(self.prints)


def enroll(store: VoiceprintStore, user_id: str, w: Waveform, asv: AsvModel, overwrite: bool = False, source: str = "") -> None:
    if user_id in store and not overwrite:
        raise ValueError(f"user {user_id!r} is already enrolled")
    emb = asv.embed_values(mfcc_array(w.samples, asv.extractor))
    store.prints[user_id] = Voiceprint(emb, source)


@dataclass(frozen=True)
class Verdict:
    asv_accept: bool
    cm_accept: bool
    asv_score: float
    cm_score: float

    @property
    def accept(self) -> bool:
        return self.asv_accept and self.cm_accept


def decide_samples(asv: AsvModel, cm: CmModel, store: VoiceprintStore, user_id: str, samples: np.ndarray) -> Verdict:
    reference = store[user_id].embedding
    a = _cosine_loss(asv.embed_values(mfcc_array(samples, asv.extractor)), reference)
    c = float(cm.score_pooled(lpms_array(samples, cm.extractor).mean(axis=0))[0])
    return Verdict(asv_accepts(asv, a), cm_accepts(cm, c), a, c)


def decide(asv: AsvModel, cm: CmModel, store: VoiceprintStore, user_id: str, w: Waveform) -> Verdict:
    return decide_samples(asv, cm, store, user_id, w.samples)


# ---------------------------------------------------------------------------
# persistence


def _config_dict(cfg: ExtractorConfig) -> dict:
    return asdict(cfg)


def _arr(a) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


def model_to_record(model) -> dict:
    if isinstance(model, CmModel):
        weights = {
            "mean": _arr(model.mean),
            "scale": _arr(model.scale),
            "w_hidden": _arr(model.w_hidden),
            "b_hidden": _arr(model.b_hidden),
            "w_out": _arr(model.w_out),
            "b_out": float(model.b_out),
        }
        kind = "cm"
        extra = {"pooling": model.pooling, "hidden": model.hidden}
    elif isinstance(model, AsvModel):
        weights = {"center": _arr(model.center), "projection": _arr(model.projection)}
        kind = "asv"
        extra = {"dim": model.dim}
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    return {
        "format_version": FORMAT_VERSION,
        "model_type": kind,
        "extractor": _config_dict(model.extractor),
        "threshold": float(model.threshold),
        "weights": weights,
        "meta": model.meta,
        **extra,
    }


def model_from_record(rec: dict):
    if rec.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {rec.get('format_version')!r}")
    cfg = ExtractorConfig(**rec["extractor"])
    w = rec["weights"]
    if rec["model_type"] == "cm":
        n_bins = len(w["mean"])
        return CmModel(
            mean=np.array(w["mean"]),
            scale=np.array(w["scale"]),
            w_hidden=np.array(w["w_hidden"], dtype=np.float64).reshape(-1, n_bins),
            b_hidden=np.array(w["b_hidden"], dtype=np.float64),
            w_out=np.array(w["w_out"]),
            b_out=float(w["b_out"]),
            threshold=float(rec["threshold"]),
            extractor=cfg,
            pooling=rec.get("pooling", "mean-over-frames"),
            meta=rec.get("meta", {}),
        )
    if rec["model_type"] == "asv":
        return AsvModel(
            center=np.array(w["center"]),
            projection=np.array(w["projection"]),
            threshold=float(rec["threshold"]),
            extractor=cfg,
            meta=rec.get("meta", {}),
        )
    raise ModelFormatError(f"unknown model type {rec['model_type']!r}")


def save_model(model, path) -> None:
    with open(Path(path), "w") as fh:
        json.dump(model_to_record(model), fh, sort_keys=True)
        fh.write("\n")


def load_model(path):
    with open(Path(path)) as fh:
        return model_from_record(json.load(fh))
