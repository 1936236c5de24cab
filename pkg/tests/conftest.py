"""Run-wide reporting: one PASS/FAIL summary line per acceptance criterion.

The acceptance gate in test_acceptance.py names its tests
``test_criterion_<n>_*``; after the run, every criterion number that was
exercised gets exactly one line, failing if any of its tests failed or
errored.
"""

import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = {}
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, ()):
            match = _CRITERION.search(report.nodeid)
            if match is None:
                continue
            number = int(match.group(1))
            ok = status == "passed"
            verdicts[number] = verdicts.get(number, True) and ok
    if not verdicts:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for number in sorted(verdicts):
        word = "PASS" if verdicts[number] else "FAIL"
        terminalreporter.write_line(f"acceptance criterion {number}: {word}")
