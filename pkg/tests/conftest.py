import contextlib

import pytest

_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Context manager that logs one PASS/FAIL line per acceptance criterion.

    Usage: ``with criterion(3, "title") as info: ...; info["detail"] = "..."``.
    """
    lines = request.config.stash.setdefault(_RESULTS, [])

    @contextlib.contextmanager
    def run(number, title):
        info = {}
        ok = False
        try:
            yield info
            ok = True
        finally:
            line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title}"
            if info.get("detail"):
                line += f" | {info['detail']}"
            lines.append((number, line))
            print(line)

    return run


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
