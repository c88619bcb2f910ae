import json
from importlib import resources

import numpy as np
import pytest
from hypothesis import settings

from taskweight.dataset import CorpusSpec, corpus_labels, synthesize_corpus, write_corpus

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def shipped_spec(name):
    text = resources.files("taskweight.data").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return CorpusSpec.from_dict(json.loads(text))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def overfit_spec():
    return shipped_spec("overfit")


@pytest.fixture(scope="session")
def overfit_dir(tmp_path_factory, overfit_spec):
    out = tmp_path_factory.mktemp("overfit")
    clips = synthesize_corpus(overfit_spec)
    write_corpus(clips, out, *corpus_labels(overfit_spec))
    return out


ACCEPTANCE_LINES = []


def report_criterion(capsys, line):
    """Print an acceptance line immediately and again in the terminal summary."""
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print(f"\n{line}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
