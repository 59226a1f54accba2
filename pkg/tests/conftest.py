# acceptance lines collected here and repeated at the end of the run
SCORECARD = []


def pytest_terminal_summary(terminalreporter):
    if SCORECARD:
        terminalreporter.section("acceptance criteria")
        for line in sorted(SCORECARD, key=lambda s: int(s.split("]")[1].split(".")[0])):
            terminalreporter.write_line(line)
