import pytest

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
CRITERIA: dict[int, list[tuple[bool, str]]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    CRITERIA.setdefault(number, []).append((passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        results = CRITERIA[number]
        ok = all(p for p, _ in results)
        detail = "; ".join(d for _, d in results)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(12345)
