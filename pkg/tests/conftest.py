"""Shared pytest hooks: print the acceptance scoreboard after a run."""


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import SCOREBOARD
    except ImportError:
        return
    if SCOREBOARD:
        terminalreporter.section("acceptance scoreboard")
        for _, line in sorted(SCOREBOARD):
            terminalreporter.write_line(line)
