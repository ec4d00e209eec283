"""Error-rate metrics for score sets where lower scores mean "accept"."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ScoreSet:
    genuine_scores: np.ndarray
    imposter_scores: np.ndarray
    polarity: str = "lower_is_accept"

    def __post_init__(self):
        if self.polarity != "lower_is_accept":
            raise ValueError(f"unsupported polarity {self.polarity!r}")
        object.__setattr__(self, "genuine_scores", np.asarray(self.genuine_scores, dtype=np.float64).ravel())
        object.__setattr__(self, "imposter_scores", np.asarray(self.imposter_scores, dtype=np.float64).ravel())


def far(imposter_scores, threshold: float) -> float:
    """Fraction of imposter trials accepted (score < threshold)."""
    imp = np.asarray(imposter_scores, dtype=np.float64)
    return float(np.mean(imp < threshold)) if imp.size else 0.0


def frr(genuine_scores, threshold: float) -> float:
    """Fraction of genuine trials rejected (score >= threshold)."""
    gen = np.asarray(genuine_scores, dtype=np.float64)
    return float(np.mean(gen >= threshold)) if gen.size else 0.0


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """Midpoints between adjacent distinct scores, plus one point beyond each end."""
    uniq = np.unique(scores)
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    return np.concatenate([[uniq[0] - 1.0], mids, [uniq[-1] + 1.0]])


def compute_eer(s: ScoreSet) -> tuple[float, float]:
    """Equal error rate and its threshold.

    The operating points are evaluated at every candidate threshold and the
    FAR = FRR crossing is located by linear interpolation between the two
    adjacent points that bracket it.
    """
    gen, imp = s.genuine_scores, s.imposter_scores
    if gen.size == 0 or imp.size == 0:
        raise ValueError("EER needs non-empty genuine and imposter score lists")
    thr = candidate_thresholds(np.concatenate([gen, imp]))
    # accept iff score < t
    fars = np.searchsorted(np.sort(imp), thr, side="left") / imp.size
    frrs = 1.0 - np.searchsorted(np.sort(gen), thr, side="left") / gen.size
    diff = fars - frrs
    i = int(np.argmax(diff >= 0))  # diff[-1] == 1 so a crossing always exists
    if i == 0:
        return float(frrs[0]), float(thr[0])
    d0, d1 = diff[i - 1], diff[i]
    lam = -d0 / (d1 - d0)
    eer = frrs[i - 1] + lam * (frrs[i] - frrs[i - 1])
    return float(eer), float(thr[i - 1] + lam * (thr[i] - thr[i - 1]))
