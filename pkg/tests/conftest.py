import os

# single-threaded BLAS so repeated runs are bit-identical
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from oracles import random_similarity  # noqa: E402
from sttis.graph import build_graph  # noqa: E402
from sttis.model import ModelConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Four regions, three context slots, no dropout: cheap enough for finite differences."""
    return ModelConfig(n=4, o=4, d=3, w=3, p=2, f=2, alpha=2, heads_dli=2, heads_dlm=2, dropout=0.0,
                       q_recipe=(2, 1, 0), ffn_mult=2)


@pytest.fixture
def tiny_graph():
    return build_graph(random_similarity(4, np.random.default_rng(0)), seed=0)


# acceptance report ------------------------------------------------------------------

_criteria: list[tuple[int, str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (report.when == "call" or not report.passed):
        return
    status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
    detail = dict(item.user_properties).get("detail", "")
    _criteria.append((mark.args[0], mark.args[1], status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, detail in sorted(_criteria):
        terminalreporter.write_line(f"{status}  {number:>2}  {title:<36} {detail}".rstrip())
