"""Collects one verdict per acceptance criterion and prints them at the end of the run."""

VERDICTS: dict = {}


def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
    VERDICTS[number] = (title, bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        title, ok, detail = VERDICTS[number]
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
