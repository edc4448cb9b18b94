"""Collects the one-line acceptance verdicts and prints them at the end of the session."""

VERDICTS: list[str] = []


def record(criterion: str, passed: bool, detail: str) -> bool:
    line = f"{criterion} {'PASS' if passed else 'FAIL'}  {detail}"
    VERDICTS.append(line)
    print(line, flush=True)
    return passed


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
