import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

GOLDEN = Path(__file__).parent / "golden"
ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    @contextmanager
    def record(number, title):
        detail = {}
        try:
            yield detail
        except BaseException as e:
            reason = (str(e).splitlines() or [type(e).__name__])[0]
            results[number] = ("FAIL", title, detail, reason)
            raise
        results[number] = ("PASS", title, detail, "")

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        status, title, detail, reason = results[number]
        facts = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in detail.items())
        line = f"{status} {number:>2} {title}: {facts}"
        terminalreporter.write_line(line + (f" [{reason}]" if reason else ""))
