import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_registry import RESULTS  # noqa: E402


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, seconds, detail in RESULTS:
        terminalreporter.write_line(f"{status:6s} {label:<54s} {seconds:8.1f}s  {detail}")
