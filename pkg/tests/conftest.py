import helpers


def pytest_terminal_summary(terminalreporter):
    if helpers.ACCEPTANCE_RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in helpers.ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
