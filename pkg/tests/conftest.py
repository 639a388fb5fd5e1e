import os

# determinism claims are made for single-threaded BLAS; must be set before numpy loads
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import time  # noqa: E402
from contextlib import contextmanager  # noqa: E402
from dataclasses import dataclass  # noqa: E402

import pytest  # noqa: E402

_RESULTS = pytest.StashKey[dict]()


@dataclass
class Outcome:
    number: int
    title: str
    passed: bool = False
    detail: str = ""
    seconds: float = 0.0


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as rec:`` records pass/fail for the summary."""
    results = request.config.stash[_RESULTS]

    @contextmanager
    def run(number, title):
        rec = Outcome(number, title)
        results[number] = rec
        t0 = time.perf_counter()
        try:
            yield rec
        except BaseException as exc:
            rec.seconds = time.perf_counter() - t0
            msg = str(exc).strip().splitlines()
            rec.detail = (rec.detail + " | " if rec.detail else "") + (msg[0] if msg else type(exc).__name__)
            raise
        rec.seconds = time.perf_counter() - t0
        rec.passed = True

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        r = results[n]
        status = "PASS" if r.passed else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {r.number:>2}: {r.title} ({r.seconds:.1f}s) {r.detail}")
    passed = sum(r.passed for r in results.values())
    terminalreporter.write_line(f"{passed}/{len(results)} acceptance criteria passed")
