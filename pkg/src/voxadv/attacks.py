"""Sign-gradient PGD attacks in the waveform domain and the feature-domain baseline.

Every time-domain attack starts from ``x + U(-eps, eps)`` and repeats
``x' <- clip(x' - alpha * sign(grad))`` for a fixed budget.  The gradient of
the model loss w.r.t. the features is pulled back to the samples through the
analytic VJP of the extractor.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .features import ExtractorConfig, FeatureMatrix, lpms_array, mfcc_array, reconstruct_with_phase, stft_array, value_and_grad
from .models import AsvModel, CmModel, asv_loss_grad_values
from .seeding import substream
from .signal import Waveform, clip_array

METHODS = ("advcm", "advsr", "advjoint", "cmspec")
TIME_DOMAIN_METHODS = ("advcm", "advsr", "advjoint")


@dataclass(frozen=True)
class AttackConfig:
    """PGD budget.  ``alpha`` defaults to ``epsilon / 10``."""

    epsilon: float
    alpha: float | None = None
    iterations: int = 100
    lambda_cm: float = 1.0
    lambda_asv: float = 1.0
    seed: int = 0
    method: str = "advjoint"
    early_stop: bool = False

    def __post_init__(self):
        if not self.epsilon >= 0 or not np.isfinite(self.epsilon):
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if self.alpha is None:
            object.__setattr__(self, "alpha", self.epsilon / 10.0)
        if self.epsilon > 0 and not 0 < self.alpha <= self.epsilon:
            raise ValueError(f"alpha must lie in (0, epsilon], got {self.alpha}")
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if not (np.isfinite(self.lambda_cm) and np.isfinite(self.lambda_asv)):
            raise ValueError("lambda weights must be finite")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")


@dataclass(frozen=True)
class AttackResult:
    adversarial: Waveform
    loss_trajectory: list[float] = field(default_factory=list)
    final_linf: float = 0.0
    iterations_run: int = 0


def _init_point(x: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    rng = substream(cfg.seed, "attack-init")
    delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
    return clip_array(x + delta, x, cfg.epsilon)


def pgd(x: Waveform, cfg: AttackConfig, step: Callable, accepted: Callable | None = None) -> AttackResult:
    """Generic sign-gradient PGD loop.

    ``step(x') -> (loss, grad, state)`` and ``accepted(state) -> bool`` decide
    the optional early stop, which is checked before each update.
    """
    if cfg.epsilon == 0:
        return AttackResult(x, [], 0.0, 0)
    x0 = x.samples
    cur = _init_point(x0, cfg)
    losses: list[float] = []
    for _ in range(cfg.iterations):
        loss, grad, state = step(cur)
        losses.append(float(loss))
        if cfg.early_stop and accepted is not None and accepted(state):
            break
        cur = clip_array(cur - cfg.alpha * np.sign(grad), x0, cfg.epsilon)
    adv = x.with_samples(cur)
    return AttackResult(adv, losses, float(np.max(np.abs(cur - x0))) if cur.size else 0.0, len(losses))


def _cm_head(cm: CmModel):
    def head(values):
        pooled = values.mean(axis=0)
        score = float(cm.score_pooled(pooled)[0])
        g = cm.grad_pooled(pooled) / values.shape[0]
        return score, np.broadcast_to(g, values.shape)

    return head


def _asv_head(asv: AsvModel, ey: np.ndarray):
    def head(values):
        return asv_loss_grad_values(asv, values, ey)

    return head


def cm_loss_and_grad(cm: CmModel, x: np.ndarray, cfg_feat: ExtractorConfig | None = None):
    return value_and_grad("lpms", x, cfg_feat or cm.extractor, _cm_head(cm))


def asv_loss_and_grad(asv: AsvModel, x: np.ndarray, ey: np.ndarray, cfg_feat: ExtractorConfig | None = None):
    return value_and_grad("mfcc", x, cfg_feat or asv.extractor, _asv_head(asv, ey))


def reference_embedding(asv: AsvModel, y: Waveform, cfg_feat: ExtractorConfig | None = None) -> np.ndarray:
    return asv.embed_values(mfcc_array(y.samples, cfg_feat or asv.extractor))


def advcm(cm: CmModel, cfg_feat: ExtractorConfig | None, x: Waveform, cfg: AttackConfig) -> AttackResult:
    """Push the CM score of ``x`` below its threshold."""

    def step(cur):
        score, grad = cm_loss_and_grad(cm, cur, cfg_feat)
        return score, grad, score

    return pgd(x, cfg, step, lambda score: score < cm.threshold)


def advsr(asv: AsvModel, cfg_feat: ExtractorConfig | None, x: Waveform, y: Waveform, cfg: AttackConfig) -> AttackResult:
    """Pull the speaker embedding of ``x`` towards the bonafide reference ``y``."""
    ey = reference_embedding(asv, y, cfg_feat)

    def step(cur):
        loss, grad = asv_loss_and_grad(asv, cur, ey, cfg_feat)
        return loss, grad, loss

    return pgd(x, cfg, step, lambda loss: loss < asv.threshold)


def advjoint(
    cm: CmModel,
    asv: AsvModel,
    cfg_feat_cm: ExtractorConfig | None,
    cfg_feat_asv: ExtractorConfig | None,
    x: Waveform,
    y: Waveform,
    cfg: AttackConfig,
) -> AttackResult:
    """Weighted sum of the CM and ASV gradients; the loss is weighted the same way.

    A branch whose weight is zero is not evaluated, so the iterates coincide
    with the single-model attack under the same seed.
    """
    ey = reference_embedding(asv, y, cfg_feat_asv)

    def step(cur):
        loss = 0.0
        grad = np.zeros_like(cur)
        cm_score = asv_score = None
        if cfg.lambda_cm != 0:
            cm_score, g = cm_loss_and_grad(cm, cur, cfg_feat_cm)
            loss, grad = cfg.lambda_cm * cm_score, cfg.lambda_cm * g
        if cfg.lambda_asv != 0:
            asv_score, g = asv_loss_and_grad(asv, cur, ey, cfg_feat_asv)
            loss, grad = loss + cfg.lambda_asv * asv_score, grad + cfg.lambda_asv * g
        return loss, grad, (cm_score, asv_score)

    def accepted(state):
        cm_score, asv_score = state
        return (cm_score is None or cm_score < cm.threshold) and (asv_score is None or asv_score < asv.threshold)

    return pgd(x, cfg, step, accepted)


@dataclass(frozen=True)
class CmspecResult:
    adv_features: FeatureMatrix
    direct_accept: bool
    reconstructed: Waveform
    direct_score: float
    reconstructed_score: float
    loss_trajectory: list[float] = field(default_factory=list)


def cmspec(cm: CmModel, cfg_feat: ExtractorConfig | None, x: Waveform, cfg: AttackConfig) -> CmspecResult:
    """PGD on the LPMS itself, then resynthesis with the original phase.

    ``cfg.epsilon`` is an L-infinity budget in log-power units.  Samples past
    the last full frame are not covered by any frame and are copied from ``x``.
    """
    fcfg = cfg_feat or cm.extractor
    spec = stft_array(x.samples, fcfg)
    power = spec.real**2 + spec.imag**2
    f0 = np.log(power + fcfg.log_floor)
    head = _cm_head(cm)
    losses: list[float] = []
    if cfg.epsilon == 0:
        feats = f0
    else:
        rng = substream(cfg.seed, "attack-init")
        feats = clip_array(f0 + rng.uniform(-cfg.epsilon, cfg.epsilon, f0.shape), f0, cfg.epsilon)
        for _ in range(cfg.iterations):
            score, g = head(feats)
            losses.append(score)
            if cfg.early_stop and score < cm.threshold:
                break
            feats = clip_array(feats - cfg.alpha * np.sign(g), f0, cfg.epsilon)
    direct = float(cm.score_pooled(feats.mean(axis=0))[0])
    magnitude = np.sqrt(np.maximum(np.exp(feats) - fcfg.log_floor, 0.0))
    body = reconstruct_with_phase(magnitude, np.angle(spec), fcfg).samples
    out = x.samples.copy()
    out[: body.shape[0]] = body
    rec = x.with_samples(out)
    rec_score = float(cm.score_pooled(lpms_array(out, fcfg).mean(axis=0))[0])
    return CmspecResult(FeatureMatrix(feats, "lpms"), direct < cm.threshold, rec, direct, rec_score, losses)


def run_time_domain(
    method: str,
    x: Waveform,
    cfg: AttackConfig,
    cm: CmModel | None = None,
    asv: AsvModel | None = None,
    y: Waveform | None = None,
) -> AttackResult:
    """Dispatch one of the waveform-domain attacks by name."""
    if method == "advcm":
        return advcm(cm, None, x, cfg)
    if method == "advsr":
        return advsr(asv, None, x, y, cfg)
    if method == "advjoint":
        return advjoint(cm, asv, None, None, x, y, cfg)
    raise ValueError(f"{method!r} is not a time-domain attack")


# ---------------------------------------------------------------------------
# batch specs


@dataclass(frozen=True)
class BatchItem:
    """One line of a batch attack file (JSON lines)."""

    input: str
    target_user: str
    method: str
    epsilon: float
    seed: int = 0
    reference: str | None = None
    output: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.method in ("advsr", "advjoint") and not self.reference:
            raise ValueError(f"{self.method} needs a bonafide reference path")


def read_batch(path) -> list[BatchItem]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                items.append(BatchItem(**json.loads(line)))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return items


def write_batch(items: list[BatchItem], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(asdict(item), sort_keys=True) + "\n")
