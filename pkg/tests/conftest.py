import contextlib
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_KEY] = []


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as detail:`` records PASS/FAIL plus free-form details."""
    lines = request.config.stash[_KEY]

    @contextlib.contextmanager
    def record(n, title):
        detail = {}
        try:
            yield detail
        except BaseException as e:
            msg = str(e).splitlines()[0] if str(e) else type(e).__name__
            lines.append((n, f"[{n:>2}] FAIL  {title}  {_fmt(detail)}  -- {msg}"))
            raise
        lines.append((n, f"[{n:>2}] PASS  {title}  {_fmt(detail)}"))

    return record


def _fmt(detail):
    return " ".join(f"{k}={v}" for k, v in detail.items())


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
