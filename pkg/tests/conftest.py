"""Shared pytest hooks: the acceptance suite reports one line per criterion."""

ACCEPTANCE: dict = {}


def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
    ACCEPTANCE[number] = (title, bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")
