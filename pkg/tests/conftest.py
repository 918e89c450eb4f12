import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "checklist oracle over all 128 assessments",
    2: "AUC vs pairwise oracle and ROC area",
    3: "per-pool counts of conditions A-D at full scale",
    4: "GAN schedule, fade-in, range and checkpoint invariants",
    5: "finite-difference gradient checks",
    6: "toy cycle transfer convergence",
    7: "condition D beats A by >= 0.05 AUC (desk)",
    8: "grading distribution ordering (desk)",
    9: "end-to-end report determinism",
}
_outcomes = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.outcome != "passed":
        if report.skipped:
            _outcomes[n] = "SKIP"
        elif _outcomes.get(n) != "FAIL":
            _outcomes[n] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, text in CRITERIA.items():
        terminalreporter.write_line(f"criterion {n}: {_outcomes.get(n, 'NOT RUN'):7s} {text}")
