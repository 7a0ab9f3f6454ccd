import contextlib
import time

# criterion number -> (title, passed, detail, seconds); filled by tests/test_acceptance.py
ACCEPTANCE = {}


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record PASS/FAIL for an acceptance criterion; failures still propagate."""
    notes = []
    start = time.perf_counter()
    try:
        yield notes
    except BaseException as exc:
        ACCEPTANCE[number] = (title, False, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}",
                              time.perf_counter() - start)
        raise
    ACCEPTANCE[number] = (title, True, "; ".join(notes), time.perf_counter() - start)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail, seconds = ACCEPTANCE[number]
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {title} ({seconds:.1f}s)"
        terminalreporter.write_line(line + (f" -- {detail}" if detail else ""))
