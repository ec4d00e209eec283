import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxadv.metrics import ScoreSet, compute_eer, far, frr


def brute_force_eer(gen, imp):
    """Sweep every midpoint and interpolate the FAR = FRR crossing."""
    allv = np.unique(np.concatenate([gen, imp]))
    thr = [allv[0] - 1.0] + [(a + b) / 2 for a, b in zip(allv[:-1], allv[1:])] + [allv[-1] + 1.0]
    pts = [(sum(s < t for s in imp) / len(imp), sum(s >= t for s in gen) / len(gen)) for t in thr]
    for (fa0, fr0), (fa1, fr1) in zip(pts, pts[1:]):
        d0, d1 = fa0 - fr0, fa1 - fr1
        if d0 < 0 <= d1:
            lam = -d0 / (d1 - d0)
            return fr0 + lam * (fr1 - fr0)
    return pts[0][1]


def test_hand_example():
    # at t = 0.275 one imposter (0.25) is accepted and one genuine (0.3) rejected
    eer, thr = compute_eer(ScoreSet([0.1, 0.2, 0.3], [0.25, 0.4, 0.5]))
    assert eer == pytest.approx(1 / 3, abs=1e-12)
    assert thr == pytest.approx(0.275, abs=1e-12)


def test_perfect_and_identical():
    assert compute_eer(ScoreSet([0.1, 0.2], [0.8, 0.9]))[0] == 0.0
    s = [0.1, 0.5, 0.9]
    assert compute_eer(ScoreSet(s, s))[0] == pytest.approx(0.5)


def test_matches_brute_force_on_random_sets():
    r = np.random.default_rng(7)
    for _ in range(200):
        gen = np.round(r.normal(0, 1, r.integers(1, 30)), 1)
        imp = np.round(r.normal(1, 1, r.integers(1, 30)), 1)
        assert abs(compute_eer(ScoreSet(gen, imp))[0] - brute_force_eer(gen, imp)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=1, max_size=20),
    st.lists(st.floats(-5, 5), min_size=1, max_size=20),
)
def test_eer_in_unit_interval(gen, imp):
    eer, _ = compute_eer(ScoreSet(gen, imp))
    assert 0.0 <= eer <= 1.0


def test_far_frr_convention():
    assert far([0.1, 0.5], 0.5) == 0.5  # strict: score == threshold is rejected
    assert frr([0.1, 0.5], 0.5) == 0.5
    assert far([], 0.0) == 0.0


def test_errors():
    with pytest.raises(ValueError):
        compute_eer(ScoreSet([], [1.0]))
    with pytest.raises(ValueError):
        ScoreSet([1.0], [2.0], polarity="higher_is_accept")
