import re

CRITERIA = {
    1: "oracle equivalence of average_precision",
    2: "LCA monotonicity",
    3: "fusion algebra",
    4: "MMLF contract",
    5: "calibration invariance and no-worse tuning",
    6: "directional Few/Many reproduction on the committed scenario",
    7: "MMF radius filter vs pairwise oracle",
    8: "identity kernel gives identity confusion matrix",
    9: "round-trip and CLI determinism",
    10: "rotation noise hurts more than translation noise",
}

_outcomes: dict[int, str] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)_", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.failed:
        _outcomes[n] = "FAIL"
    elif report.when == "call" and report.passed:
        _outcomes.setdefault(n, "PASS")
    elif report.skipped:
        _outcomes.setdefault(n, "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        status = _outcomes.get(n, "NOT RUN")
        terminalreporter.write_line(f"criterion {n:2d} [{status}] {title}")
