from helpers import ACCEPTANCE, criterion_line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(criterion_line(n, *ACCEPTANCE[n]))
