import pytest

CRITERIA = {
    1: "gradient correctness",
    2: "metric oracle",
    3: "masking statistics",
    4: "ProdBERT beats prod2vec on NEP",
    5: "hyperparameter directions",
    6: "intent pipeline",
    7: "equivariance and invariance",
    8: "t-SNE sanity",
    9: "determinism",
}

_results: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion verified by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.skipped:
        return
    if rep.when == "call" or rep.failed:
        details = [v for k, v in item.user_properties if k == "detail"]
        _results.setdefault(marker.args[0], []).append((item.name, rep.passed, details))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        runs = _results[n]
        ok = all(passed for _, passed, _ in runs)
        terminalreporter.write_line(f"criterion {n} ({CRITERIA.get(n, '?')}): {'PASS' if ok else 'FAIL'}")
        for name, passed, details in runs:
            extra = f": {'; '.join(details)}" if details else ""
            terminalreporter.write_line(f"    {'ok  ' if passed else 'FAIL'} {name}{extra}")
