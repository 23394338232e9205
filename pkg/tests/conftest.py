import contextlib
import time

import pytest

RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[RESULTS] = []


@pytest.fixture
def criterion(request):
    """Context manager that times a block and records one pass/fail line for it.

    The yielded dict collects measured values; they are echoed on the line.
    """
    results = request.config.stash[RESULTS]

    @contextlib.contextmanager
    def run(number: int, title: str, limit_s: float | None = None):
        info: dict = {}
        start = time.perf_counter()
        status, why = "PASS", ""
        try:
            yield info
            elapsed = time.perf_counter() - start
            if limit_s is not None and elapsed >= limit_s:
                raise AssertionError(f"runtime {elapsed:.1f}s exceeds {limit_s:.0f}s")
        except BaseException as err:
            status = "FAIL"
            why = f" [{type(err).__name__}: {str(err).splitlines()[0] if str(err) else ''}]"
            raise
        finally:
            elapsed = time.perf_counter() - start
            detail = ", ".join(f"{k}={_fmt(v)}" for k, v in info.items())
            line = f"criterion {number}: {status}  {title} ({detail}; {elapsed:.1f}s){why}"
            results.append((number, line))
            print("\n" + line)

    return run


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.3e}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


@pytest.fixture(scope="session")
def data_cache(request):
    """Persistent directory for generated acceptance datasets (pytest cache)."""
    return request.config.cache.mkdir("kno-datasets")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(RESULTS, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(results, key=lambda r: r[0]):
        terminalreporter.write_line(line)
