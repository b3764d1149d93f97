import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repro", derandomize=True, print_blob=True)
settings.load_profile("repro")

from napsumq.queries import canonicalize, full_marginal_sets
from napsumq.schema import Schema, StandInSpec, toy_schema

_ACCEPTANCE_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if report.passed else "FAIL"
    _ACCEPTANCE_LINES.append((marker.args[0], f"criterion {marker.args[0]:>2}: {status}  {detail}"))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_queries():
    return canonicalize(full_marginal_sets(toy_schema(), [["x1", "x2", "x3"]]))


@pytest.fixture
def stand_in_queries():
    spec = StandInSpec()
    return canonicalize(full_marginal_sets(spec.schema, spec.scopes))


def random_schema_and_scopes(rng, d_range=(3, 6), max_card=3, n_scopes=None):
    """A small random schema with a random set of 1- to 3-variable scopes."""
    d = int(rng.integers(d_range[0], d_range[1] + 1))
    cards = rng.integers(2, max_card + 1, size=d).tolist()
    schema = Schema.from_cardinalities(cards)
    k = n_scopes or int(rng.integers(2, d + 1))
    scopes = set()
    while len(scopes) < k:
        size = int(rng.integers(1, min(3, d) + 1))
        scopes.add(tuple(sorted(rng.choice(d, size=size, replace=False).tolist())))
    return schema, sorted(scopes)
