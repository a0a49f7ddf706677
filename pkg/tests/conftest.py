import sys
import time
from contextlib import contextmanager
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synth import make_dataset  # noqa: E402

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def dataset(tmp_path):
    return make_dataset(tmp_path / "data")


@pytest.fixture
def criterion(request):
    """Time a block as one acceptance criterion and record PASS/FAIL for the summary."""
    results = request.config.stash.setdefault(_ACCEPTANCE, {})

    @contextmanager
    def run(number: int, title: str, limit_s: float):
        start = time.perf_counter()
        try:
            yield
        except BaseException as exc:
            elapsed = time.perf_counter() - start
            results[number] = ("FAIL", title, elapsed, limit_s, type(exc).__name__)
            print(f"FAIL criterion {number}: {title} ({elapsed:.2f}s) {exc!r}")
            raise
        elapsed = time.perf_counter() - start
        if elapsed >= limit_s:
            results[number] = ("FAIL", title, elapsed, limit_s, "time limit")
            print(f"FAIL criterion {number}: {title} ({elapsed:.2f}s, limit {limit_s:g}s)")
            pytest.fail(f"criterion {number} took {elapsed:.2f}s, limit {limit_s:g}s")
        results[number] = ("PASS", title, elapsed, limit_s, "")
        print(f"PASS criterion {number}: {title} ({elapsed:.2f}s)")

    return run


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(results):
        status, title, elapsed, limit_s, note = results[number]
        line = f"{status} criterion {number:>2}: {title} ({elapsed:.2f}s / {limit_s:g}s)"
        terminalreporter.write_line(line + (f" [{note}]" if note else ""))
