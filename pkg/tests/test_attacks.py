import numpy as np
import pytest

from voxadv.attacks import (
    AttackConfig,
    BatchItem,
    advcm,
    advjoint,
    advsr,
    cmspec,
    read_batch,
    run_time_domain,
    write_batch,
)
from voxadv.evaluation import pick_reference
from voxadv.features import lpms_array, stft_array
from voxadv.signal import Waveform, linf_distance


@pytest.fixture(scope="module")
def victim(small_bench, small_models):
    """A family-A spoof of an eval speaker and that speaker's medoid reference."""
    asv, cm = small_models["shadow"]
    spoof = small_bench.spoofs("A")[0]
    return small_bench.wav(spoof), pick_reference(small_bench, asv, spoof.speaker_id)


def _run(method, models, x, y, cfg):
    asv, cm = models
    return run_time_domain(method, x, cfg, cm=cm, asv=asv, y=y)


@pytest.mark.parametrize("method", ["advcm", "advsr", "advjoint"])
def test_zero_epsilon_is_identity(small_models, victim, method):
    x, y = victim
    res = _run(method, small_models["shadow"], x, y, AttackConfig(0.0, method=method))
    assert np.array_equal(res.adversarial.samples, x.samples)
    assert res.iterations_run == 0 and res.final_linf == 0.0


def test_advsr_on_its_own_reference_with_zero_budget(small_models, victim):
    _, y = victim
    asv, _ = small_models["shadow"]
    res = advsr(asv, None, y, y, AttackConfig(0.0, method="advsr"))
    assert np.array_equal(res.adversarial.samples, y.samples)


@pytest.mark.parametrize("method", ["advcm", "advsr", "advjoint"])
@pytest.mark.parametrize("eps", [0.001, 0.007])
def test_budget_and_trajectory_invariants(small_models, victim, method, eps):
    x, y = victim
    res = _run(method, small_models["shadow"], x, y, AttackConfig(eps, iterations=8, method=method, seed=5))
    assert res.final_linf <= eps + 1e-9
    assert linf_distance(res.adversarial, x) == res.final_linf
    assert len(res.loss_trajectory) == res.iterations_run == 8


@pytest.mark.parametrize("method", ["advcm", "advsr", "advjoint"])
def test_seeded_determinism(small_models, victim, method):
    x, y = victim
    cfg = AttackConfig(0.003, iterations=5, method=method, seed=9)
    a = _run(method, small_models["shadow"], x, y, cfg)
    b = _run(method, small_models["shadow"], x, y, cfg)
    assert np.array_equal(a.adversarial.samples, b.adversarial.samples)
    assert a.loss_trajectory == b.loss_trajectory
    c = _run(method, small_models["shadow"], x, y, AttackConfig(0.003, iterations=5, method=method, seed=10))
    assert not np.array_equal(a.adversarial.samples, c.adversarial.samples)


def test_degenerate_weights_reduce_to_single_attacks(small_models, victim):
    x, y = victim
    asv, cm = small_models["shadow"]
    only_cm = advjoint(cm, asv, None, None, x, y, AttackConfig(0.003, iterations=6, lambda_asv=0.0, seed=2))
    ref_cm = advcm(cm, None, x, AttackConfig(0.003, iterations=6, seed=2, method="advcm"))
    assert np.array_equal(only_cm.adversarial.samples, ref_cm.adversarial.samples)
    assert only_cm.loss_trajectory == ref_cm.loss_trajectory
    only_asv = advjoint(cm, asv, None, None, x, y, AttackConfig(0.003, iterations=6, lambda_cm=0.0, seed=2))
    ref_asv = advsr(asv, None, x, y, AttackConfig(0.003, iterations=6, seed=2, method="advsr"))
    assert np.array_equal(only_asv.adversarial.samples, ref_asv.adversarial.samples)
    assert only_asv.loss_trajectory == ref_asv.loss_trajectory


def test_advsr_descends_on_most_spoofs(small_bench, small_models):
    asv, _ = small_models["shadow"]
    spoofs = small_bench.spoofs("A") + small_bench.spoofs("B")
    down = 0
    for e in spoofs:
        y = pick_reference(small_bench, asv, e.speaker_id)
        res = advsr(asv, None, small_bench.wav(e), y, AttackConfig(0.003, iterations=10, method="advsr"))
        down += res.loss_trajectory[-1] <= res.loss_trajectory[0]
    assert down / len(spoofs) >= 0.9


def test_early_stop_halts_once_accepted(small_models, victim):
    x, _ = victim
    _, cm = small_models["shadow"]
    full = advcm(cm, None, x, AttackConfig(0.007, iterations=40, method="advcm"))
    early = advcm(cm, None, x, AttackConfig(0.007, iterations=40, method="advcm", early_stop=True))
    assert early.iterations_run <= full.iterations_run
    if early.iterations_run < 40:
        assert early.loss_trajectory[-1] < cm.threshold


def test_attack_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(-0.001)
    with pytest.raises(ValueError):
        AttackConfig(0.001, alpha=0.01)
    with pytest.raises(ValueError):
        AttackConfig(0.001, method="fgsm")
    with pytest.raises(ValueError):
        AttackConfig(0.001, iterations=0)
    assert AttackConfig(0.003).alpha == pytest.approx(0.0003)


# ---------------------------------------------------------------------------
# feature-domain baseline


def test_cmspec_zero_budget_round_trips(small_models, victim):
    x, _ = victim
    _, cm = small_models["shadow"]
    res = cmspec(cm, None, x, AttackConfig(0.0, method="cmspec"))
    assert np.array_equal(res.adv_features.values, lpms_array(x.samples))
    cfg = cm.extractor
    n = cfg.span(stft_array(x.samples, cfg).shape[0])
    err = res.reconstructed.samples[:n] - x.samples[:n]
    assert np.sqrt(np.mean(err**2)) < 1e-6
    assert np.array_equal(res.reconstructed.samples[n:], x.samples[n:])


def test_cmspec_respects_feature_budget(small_models, victim):
    x, _ = victim
    _, cm = small_models["shadow"]
    res = cmspec(cm, None, x, AttackConfig(1.0, iterations=10, method="cmspec"))
    assert np.max(np.abs(res.adv_features.values - lpms_array(x.samples))) <= 1.0 + 1e-9
    assert res.direct_accept == (res.direct_score < cm.threshold)
    assert len(res.reconstructed) == len(x)


# ---------------------------------------------------------------------------
# batch files


def test_batch_file_round_trip(tmp_path):
    items = [
        BatchItem("a.wav", "spk1", "advcm", 0.003),
        BatchItem("b.wav", "spk2", "advjoint", 0.001, seed=4, reference="r.wav", output="o.wav"),
    ]
    write_batch(items, tmp_path / "batch.jsonl")
    assert read_batch(tmp_path / "batch.jsonl") == items


def test_batch_validation(tmp_path):
    with pytest.raises(ValueError):
        BatchItem("a.wav", "spk", "advsr", 0.001)
    (tmp_path / "bad.jsonl").write_text('{"input": "a.wav", "target_user": "s", "method": "advcm", "epsilon": 0.1}\n{"input": 3}\n')
    with pytest.raises(ValueError, match=":2:"):
        read_batch(tmp_path / "bad.jsonl")


def test_unknown_time_domain_method(victim):
    with pytest.raises(ValueError):
        run_time_domain("cmspec", victim[0], AttackConfig(0.001, method="cmspec"))


def test_waveform_is_not_modified(small_models, victim):
    x, y = victim
    before = x.samples.copy()
    _run("advjoint", small_models["shadow"], x, y, AttackConfig(0.003, iterations=3))
    assert np.array_equal(x.samples, before)
    assert isinstance(x, Waveform)
