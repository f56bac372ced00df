from collections import defaultdict

import pytest

from routelab import cli

_CRITERIA: dict[int, dict] = defaultdict(lambda: {"title": "", "outcomes": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry = _CRITERIA[mark.args[0]]
        entry["title"] = mark.args[1]
        entry["outcomes"].append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        status = "PASS" if entry["outcomes"] and all(entry["outcomes"]) else "FAIL"
        terminalreporter.write_line(f"Criterion {n:2d} {status}  {entry['title']}")


@pytest.fixture(scope="session")
def smoke_runs(tmp_path_factory):
    """Two independent smoke pipelines with identical settings."""
    dirs = []
    for name in ("run_a", "run_b"):
        out = tmp_path_factory.mktemp(name)
        assert cli.main(["pipeline", "--profile", "smoke", "--out-dir", str(out)]) == 0
        dirs.append(out)
    return tuple(dirs)
