import _support


def pytest_terminal_summary(terminalreporter):
    if _support.REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _support.REPORT:
            terminalreporter.write_line(line)
