import contextlib
import time

# criterion number -> (status, title, detail)
ACCEPTANCE = {}


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record a PASS or FAIL line for one acceptance criterion."""
    detail = {}
    start = time.perf_counter()
    try:
        yield detail
    except BaseException as exc:
        detail["error"] = f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        ACCEPTANCE[number] = ("FAIL", title, detail, time.perf_counter() - start)
        raise
    ACCEPTANCE[number] = ("PASS", title, detail, time.perf_counter() - start)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, title, detail, seconds = ACCEPTANCE[number]
        extras = ", ".join(f"{k}={v}" for k, v in detail.items())
        terminalreporter.write_line(f"criterion {number:2d} {status}: {title} ({seconds:.1f} s) {extras}".rstrip())
