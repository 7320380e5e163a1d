import numpy as np
import pytest

from seqtwins.data import prepare
from seqtwins.synthetic import write_movielens_like


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ml1m_like")
    write_movielens_like(out, n_users=60, n_items=120, min_actions=20, max_actions=60, seed=3)
    return out


@pytest.fixture(scope="session")
def small_prepared(synthetic_dir):
    return prepare("movielens-1m", synthetic_dir, seed=0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if not LINES:
        return
    terminalreporter.section("acceptance criteria")
    import re

    def key(line):
        label = line.split()[2].rstrip(":")
        return int(re.match(r"\d+", label).group()), label

    for line in sorted(LINES, key=key):
        terminalreporter.write_line(line)
