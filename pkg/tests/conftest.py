import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance scoreboard after capture is torn down."""
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "SCOREBOARD", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
