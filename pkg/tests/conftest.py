import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import pytest  # noqa: E402

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record ``(criterion, passed, detail)``; lines are printed in the terminal summary."""
    store = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        store[number] = (title, passed, detail)
        print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} | {detail}")
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        title, passed, detail = store[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {title} | {detail}")
