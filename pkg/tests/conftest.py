import numpy as np
import pytest

from prompt_adapt import classifier as clf
from prompt_adapt.data import generate_glyphs


@pytest.fixture(scope="session")
def glyphs():
    return generate_glyphs(400, 10, seed=7)


@pytest.fixture(scope="session")
def test_glyphs():
    return generate_glyphs(200, 10, seed=8)


@pytest.fixture(scope="session")
def small_model(glyphs):
    """A quickly trained, frozen classifier; accurate enough to give adaptation something to do."""
    model = clf.build_default(10, (3, 32, 32), seed=0)
    clf.train_source(model, glyphs.images, glyphs.labels, clf.TrainConfig(epochs=3, batch_size=50))
    return model.freeze()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; returns the verdict so tests can assert on it."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
