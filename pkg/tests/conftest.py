"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""
import pytest

_criteria: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    cid, title = marker.args
    entry = _criteria.setdefault(cid, {"title": title, "ok": True, "ran": False, "details": []})
    if rep.when == "call" or rep.failed:
        entry["ran"] = True
        entry["ok"] = entry["ok"] and rep.passed
    if rep.when == "call":
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_criteria, key=lambda c: int(c[1:])):
        e = _criteria[cid]
        status = "PASS" if e["ok"] and e["ran"] else ("FAIL" if e["ran"] else "NOT RUN")
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"{cid} {status:7s} {e['title']}" + (f" | {detail}" if detail else ""))
