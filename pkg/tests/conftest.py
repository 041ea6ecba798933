from .acceptance_log import lines


def pytest_terminal_summary(terminalreporter):
    verdicts = lines()
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for line in verdicts:
            terminalreporter.write_line(line)
