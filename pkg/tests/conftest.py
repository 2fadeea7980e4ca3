import pytest

_ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}

#: Optional free-form measurements a criterion test wants printed on its
#: summary line (e.g. measured latencies). Keyed by criterion id.
ACCEPTANCE_DETAILS: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    cid, title = marker.kwargs["id"], marker.kwargs["title"]
    if report.when == "call":
        _ACCEPTANCE_RESULTS[cid] = (title, report.outcome)
    elif report.when == "setup" and report.outcome in ("failed", "skipped"):
        _ACCEPTANCE_RESULTS[cid] = (title, report.outcome)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_ACCEPTANCE_RESULTS):
        title, outcome = _ACCEPTANCE_RESULTS[cid]
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        detail = ACCEPTANCE_DETAILS.get(cid)
        suffix = f"  [{detail}]" if detail else ""
        terminalreporter.write_line(f"criterion {cid:>2}: {status}  {title}{suffix}")
