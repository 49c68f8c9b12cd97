"""Prints one pass/fail line per acceptance criterion at the end of the run."""

import sys

ACCEPTANCE_FILE = "test_acceptance.py"


def pytest_terminal_summary(terminalreporter):
    verdicts = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if ACCEPTANCE_FILE not in getattr(rep, "nodeid", ""):
                continue
            name = rep.nodeid.split("::")[-1]
            if outcome == "passed" and rep.when == "call":
                verdicts.setdefault(name, "PASS")
            elif outcome != "passed":
                verdicts[name] = "FAIL"
    if not verdicts:
        return
    module = sys.modules.get("test_acceptance")
    measured = getattr(module, "MEASURED", {})
    terminalreporter.section("acceptance criteria")
    for name in sorted(verdicts):
        terminalreporter.write_line(f"{verdicts[name]}  {name}  {measured.get(name, '')}".rstrip())
