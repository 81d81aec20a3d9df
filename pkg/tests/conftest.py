import numpy as np
import pytest

CRITERIA = {
    1: "gradient suite (ops + 7 systems, FD step 1e-5, rel err <= 1e-4, <= 2 min)",
    2: "pooling formula oracles (extended precision, 1e-10; zero-param 1e-12; shared logit exact)",
    3: "conv and metric oracles (loop conv 1e-12; EER/minDCF exact vs sweeps)",
    4: "invariances (frame permutation, monotone scores, forget-gate saturation)",
    5: "desk-scale separation (x_tdnn and x_gcnn_gatt EER <= 5%, <= 10 min)",
    6: "determinism (checkpoints, embeddings, scores bitwise)",
    7: "fusion contract (self-fusion exact; Att+GAtt fusion via CLI)",
}

_results: dict[int, list[tuple[str, str]]] = {}
_notes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion exercised by the test")


@pytest.fixture
def rng():
    return np.random.default_rng(20240)


@pytest.fixture
def note(request):
    """Attach a measurement to the acceptance summary line of the test's criterion."""
    marker = request.node.get_closest_marker("criterion")

    def add(text):
        if marker is not None:
            _notes.setdefault(marker.args[0], []).append(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _results.setdefault(marker.args[0], []).append((item.nodeid, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        runs = _results.get(n, [])
        if not runs:
            status = "NOT RUN"
        else:
            ok = sum(outcome == "passed" for _, outcome in runs)
            status = f"{'PASS' if ok == len(runs) else 'FAIL'} ({ok}/{len(runs)} checks)"
        extra = "; ".join(_notes.get(n, []))
        terminalreporter.write_line(f"[PRIMARY] criterion {n}: {status} - {title}" + (f" | {extra}" if extra else ""))
