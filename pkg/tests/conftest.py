import sys

CRITERIA: dict[str, str] = {}


def report(number, ok: bool, detail: str) -> bool:
    """Record and print one acceptance line; returns ``ok`` for the assert."""
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} {detail}"
    CRITERIA[str(number)] = line
    print(line, file=sys.__stdout__, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA, key=lambda k: (int(k.rstrip("ab")), k)):
        terminalreporter.write_line(CRITERIA[key])
