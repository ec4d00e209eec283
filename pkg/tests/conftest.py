import numpy as np
import pytest

from voxadv.corpus import CorpusConfig, build_corpus
from voxadv.evaluation import DEFAULT_RECIPES, Bench, build_pairs, train_pair

# (criterion number, line) pairs, printed in the terminal summary
ACCEPTANCE_LINES: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES, key=lambda t: t[0]):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """8 speakers x 4 utterances: 2 shadow, 2 target and 4 eval speakers."""
    root = tmp_path_factory.mktemp("small_corpus")
    manifest = build_corpus(root, CorpusConfig(n_speakers=8, utts_per_speaker=4, duration_s=1.0, seed=3))
    return root, manifest


@pytest.fixture(scope="session")
def small_bench(small_corpus):
    return Bench(small_corpus[1])


@pytest.fixture(scope="session")
def small_models(small_bench):
    recipes = {r.name: r for r in DEFAULT_RECIPES}
    return {name: train_pair(small_bench, recipes[name]) for name in ("shadow", "target")}


@pytest.fixture(scope="session")
def small_pairs(small_bench, small_models):
    return build_pairs(small_bench, small_models)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
