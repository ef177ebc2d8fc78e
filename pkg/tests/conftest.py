import logging

import pytest

from ale_lab.manifold_core import LinkGeometry, build_conformal_family, family_grid, flat_profile

# filled by test_acceptance.py, printed once at the end of the session
ACCEPTANCE = {}


def pytest_configure(config):
    logging.getLogger("ale_lab").setLevel(logging.ERROR)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def link4():
    return LinkGeometry(4)


@pytest.fixture(scope="session")
def flat4(link4):
    return flat_profile(link4, family_grid(1.0, 11, 100))


@pytest.fixture(scope="session")
def gam4(link4):
    """g_{A,m} with n=4, m=0.1, A=1."""
    return build_conformal_family(link4, family_grid(1.0, 11, 100), 0.1, 1.0)
