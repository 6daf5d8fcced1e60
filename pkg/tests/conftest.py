import pytest

CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")
    config.addinivalue_line("markers", "slow: multi-minute training runs")
    config.stash[CRITERIA] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    ok, details = item.config.stash[CRITERIA].get(mark.args[0], (True, []))
    details = details + [v for k, v in item.user_properties if k == "detail" and v not in details]
    item.config.stash[CRITERIA][mark.args[0]] = (ok and rep.passed and not rep.skipped, details)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[CRITERIA]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, details = results[n]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}"
        if details:
            line += "  (" + "; ".join(details) + ")"
        terminalreporter.write_line(line)
