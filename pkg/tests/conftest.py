import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from chainsight.fixture import generate_fixture

settings.register_profile("ci", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile("ci")

np.seterr(all="raise", under="ignore")


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    """The bundled desk-scale synthetic chain (seed 7, 1000 blocks, 200 accounts)."""
    out = tmp_path_factory.mktemp("fixture")
    generate_fixture(out, seed=7, n_blocks=1000, n_accounts=200)
    return out


def addr(i):
    return "0x" + f"{i:040x}"


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
