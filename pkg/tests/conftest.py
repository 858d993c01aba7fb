import numpy as np
import pytest

from loggia.topology import Link, Topology, build_mini5


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="allow criterion 12 to train the full protocol when no finished run exists")


@pytest.fixture
def mini5():
    return build_mini5()


def random_topology(rng: np.random.Generator, n: int, extra: float = 0.4, int_delays: bool = False) -> Topology:
    """Connected random graph: random spanning tree plus extra edges."""
    links = {}
    order = rng.permutation(n)
    for i in range(1, n):
        u, v = int(order[i]), int(order[rng.integers(0, i)])
        links[(min(u, v), max(u, v))] = None
    for u in range(n):
        for v in range(u + 1, n):
            if (u, v) not in links and rng.random() < extra:
                links[(u, v)] = None
    out = []
    for u, v in sorted(links):
        delay = float(rng.integers(1, 6)) if int_delays else float(rng.uniform(0.5, 5.0))
        out.append(Link(u, v, float(rng.uniform(20, 200)), delay))
    return Topology(n, tuple(out), name=f"rand{n}")


# -- acceptance summary: one line per criterion at the end of the run --------

_CRITERIA: dict[str, tuple[str, str, float]] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.split("::")[-1]
    if "test_acceptance" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.outcome != "passed":
        doc = name[len("test_criterion_"):]
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _CRITERIA[doc] = (status, report.when, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        status, _, secs = _CRITERIA[key]
        num, _, title = key.partition("_")
        terminalreporter.write_line(f"criterion {int(num):2d} {status}  {title.replace('_', ' ')} ({secs:.1f} s)")
