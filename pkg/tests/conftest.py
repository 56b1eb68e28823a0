import numpy as np
import pytest

from transkb.dataset import WordVectorTable
from transkb.featurize import tokenize
from transkb.synthetic import nameable_kb, ring_kb, write_dataset

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, name, detail = ACCEPTANCE[key]
        status = "PASS" if ok is True else ("FAIL" if ok is False else ok)
        terminalreporter.write_line(f"[{status}] criterion {key}: {name} -- {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def ring():
    return ring_kb()


@pytest.fixture(scope="session")
def nameable():
    return nameable_kb(seed=0)


def random_word_vectors(texts, dim, seed=0, scale=0.5):
    words = sorted({w for t in texts for w in tokenize(t)})
    rng = np.random.default_rng(seed)
    return WordVectorTable({w: i for i, w in enumerate(words)}, rng.normal(scale=scale, size=(len(words), dim)))


@pytest.fixture(scope="session")
def nameable_wv(nameable):
    return random_word_vectors(nameable.descriptions.values(), 8)


@pytest.fixture
def ring_files(tmp_path, ring):
    return write_dataset(ring, tmp_path / "ring")


@pytest.fixture
def nameable_files(tmp_path, nameable):
    return write_dataset(nameable, tmp_path / "nameable")
