"""Finite-difference audits of every analytic gradient in the package.

The waveform-level check perturbs one sample at a time, but only recomputes
the few frames that contain it: a sample at position ``i`` touches frames
``j`` with ``j * hop <= i < j * hop + frame_len`` and nothing else, so the
central difference of ``<u, g(x)>`` restricted to those frames equals the
full-signal difference.  Perturbations of one hop-block share the same frame
range and are evaluated as one batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import DEFAULT_CONFIG, EXTRACTORS, ExtractorConfig
from .models import AsvModel, CmModel, asv_loss_grad_values, pooled_stats
from .seeding import substream

FD_STEP = 1e-6
TOLERANCE = 1e-4


def rel_l2(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def fd_vjp_full(extractor: str, x: np.ndarray, upstream: np.ndarray, cfg: ExtractorConfig = DEFAULT_CONFIG, h: float = FD_STEP) -> np.ndarray:
    """Plain central differences of ``<upstream, g(x)>`` over the whole signal (slow)."""
    forward = EXTRACTORS[extractor][0]
    grad = np.zeros_like(x)
    for i in range(x.shape[0]):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (np.sum(upstream * forward(xp, cfg)) - np.sum(upstream * forward(xm, cfg))) / (2 * h)
    return grad


def fd_vjp_local(extractor: str, x: np.ndarray, upstream: np.ndarray, cfg: ExtractorConfig = DEFAULT_CONFIG, h: float = FD_STEP) -> np.ndarray:
    """Central differences of ``<upstream, g(x)>`` recomputing only the affected frames."""
    forward = EXTRACTORS[extractor][0]
    hop, size = cfg.hop_samples, cfg.frame_len_samples
    n_frames = upstream.shape[0]
    covered = (n_frames - 1) * hop + size
    grad = np.zeros_like(x)
    for start in range(0, covered, hop):
        stop = min(start + hop, covered)
        lo = max(0, -(-(start + 1 - size) // hop))  # first frame containing sample start
        hi = min(n_frames - 1, (stop - 1) // hop)  # last frame containing sample stop - 1
        a, b = lo * hop, hi * hop + size
        excerpt = x[a:b]
        idx = np.arange(start, stop) - a
        batch = np.repeat(excerpt[None, :], 2 * idx.size, axis=0)
        rows = np.arange(idx.size)
        batch[rows, idx] += h
        batch[rows + idx.size, idx] -= h
        values = np.einsum("bfc,fc->b", forward(batch, cfg), upstream[lo : hi + 1])
        grad[start:stop] = (values[: idx.size] - values[idx.size :]) / (2 * h)
    return grad


@dataclass(frozen=True)
class CheckResult:
    path: str
    max_rel_error: float
    n_cases: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def check_extractor(extractor: str, n_waves: int = 20, duration_s: float = 0.5, seed: int = 0, cfg: ExtractorConfig = DEFAULT_CONFIG) -> CheckResult:
    """Analytic VJP against local finite differences on random noise waveforms."""
    forward, backward = EXTRACTORS[extractor]
    n = int(round(duration_s * cfg.sample_rate))
    worst = 0.0
    for k in range(n_waves):
        rng = substream(seed, "gradcheck", extractor, k)
        x = 0.1 * rng.standard_normal(n)
        upstream = rng.standard_normal(forward(x, cfg).shape)
        worst = max(worst, rel_l2(backward(x, upstream, cfg), fd_vjp_local(extractor, x, upstream, cfg)))
    return CheckResult(f"vjp:{extractor}", worst, n_waves)


def _random_cm(rng, n_bins: int, hidden: int) -> CmModel:
    return CmModel(
        mean=rng.standard_normal(n_bins),
        scale=rng.uniform(0.5, 2.0, n_bins),
        w_hidden=rng.standard_normal((hidden, n_bins)) / np.sqrt(n_bins),
        b_hidden=rng.standard_normal(hidden),
        w_out=rng.standard_normal(hidden if hidden else n_bins),
        b_out=float(rng.standard_normal()),
    )


def _fd_scalar(f, values: np.ndarray, h: float) -> np.ndarray:
    grad = np.zeros_like(values)
    for idx in np.ndindex(values.shape):
        vp, vm = values.copy(), values.copy()
        vp[idx] += h
        vm[idx] -= h
        grad[idx] = (f(vp) - f(vm)) / (2 * h)
    return grad


def check_cm(n_cases: int = 5, seed: int = 0, frames: int = 6, n_bins: int = 12) -> CheckResult:
    worst = 0.0
    for k in range(n_cases):
        rng = substream(seed, "gradcheck", "cm", k)
        m = _random_cm(rng, n_bins, hidden=0 if k % 2 == 0 else 5)
        values = rng.standard_normal((frames, n_bins))

        def score(v):
            return float(m.score_pooled(v.mean(axis=0))[0])

        analytic = np.broadcast_to(m.grad_pooled(values.mean(axis=0)) / frames, values.shape)
        worst = max(worst, rel_l2(analytic, _fd_scalar(score, values, 1e-6)))
    return CheckResult("cm_input_grad", worst, n_cases)


def check_asv(n_cases: int = 5, seed: int = 0, frames: int = 8, n_ceps: int = 6, dim: int = 5) -> CheckResult:
    worst = 0.0
    for k in range(n_cases):
        rng = substream(seed, "gradcheck", "asv", k)
        m = AsvModel(center=rng.standard_normal(2 * n_ceps), projection=rng.standard_normal((dim, 2 * n_ceps)))
        values = rng.standard_normal((frames, n_ceps))
        ey = m.embed_values(rng.standard_normal((frames, n_ceps)))
        _, analytic = asv_loss_grad_values(m, values, ey)

        def loss(v):
            return asv_loss_grad_values(m, v, ey)[0]

        worst = max(worst, rel_l2(analytic, _fd_scalar(loss, values, 1e-6)))
    return CheckResult("asv_input_grad", worst, n_cases)


def check_pooling(n_cases: int = 5, seed: int = 0) -> CheckResult:
    from .models import pooled_stats_vjp

    worst = 0.0
    for k in range(n_cases):
        rng = substream(seed, "gradcheck", "pool", k)
        values = rng.standard_normal((7, 4))
        u = rng.standard_normal(8)
        fd = _fd_scalar(lambda v: float(u @ pooled_stats(v)), values, 1e-6)
        worst = max(worst, rel_l2(pooled_stats_vjp(values, u), fd))
    return CheckResult("stats_pooling", worst, n_cases)


def run_all(seed: int = 0, n_waves: int = 20, duration_s: float = 0.5) -> list[CheckResult]:
    return [
        check_extractor("lpms", n_waves, duration_s, seed),
        check_extractor("mfcc", n_waves, duration_s, seed),
        check_cm(seed=seed),
        check_asv(seed=seed),
        check_pooling(seed=seed),
    ]
