import pytest
from hypothesis import settings

from mdts.bench import make_numeric_synth, make_tfb_synth, sample_offline

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def tf8():
    return make_tfb_synth(8)


@pytest.fixture(scope="session")
def tf4():
    return make_tfb_synth(4, oracle_seed=3)


@pytest.fixture(scope="session")
def sphere2():
    return make_numeric_synth(2, kind="sphere", seed=1)


@pytest.fixture
def tf8_data(tf8):
    return sample_offline(tf8, 10, seed=0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
