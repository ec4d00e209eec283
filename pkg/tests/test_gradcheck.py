from voxadv import cli, features
from voxadv.gradcheck import TOLERANCE, check_extractor, run_all


def test_all_paths_pass():
    results = run_all(n_waves=3)
    assert {r.path for r in results} >= {"vjp:lpms", "vjp:mfcc"}
    assert all(r.ok and r.max_rel_error < TOLERANCE for r in results)


def test_gradcheck_is_deterministic():
    assert check_extractor("mfcc", n_waves=2) == check_extractor("mfcc", n_waves=2)


def test_dct_sign_bug_is_caught(monkeypatch, capsys):
    original = features._dct_backward
    monkeypatch.setattr(features, "_dct_backward", lambda u, dct: -original(u, dct))
    assert not check_extractor("mfcc", n_waves=2).ok
    assert check_extractor("lpms", n_waves=2).ok
    assert cli.main(["gradcheck", "--waves", "2"]) == cli.EXIT_FAILURE
    assert "mfcc" in capsys.readouterr().err


def test_cli_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--waves", "2"]) == cli.EXIT_OK
    assert "max relative error" in capsys.readouterr().out
