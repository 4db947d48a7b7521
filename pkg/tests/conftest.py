import numpy as np
import pytest

from infsel.losskernels import Dataset, LossKernel


def mean_data(values) -> Dataset:
    """Squared loss on a constant unit feature: the loss is 0.5 * (theta - y)^2."""
    y = np.asarray(values, dtype=float)
    return Dataset(np.ones((y.size, 1)), y)


@pytest.fixture
def mean_kernel() -> LossKernel:
    return LossKernel("squared", 1, lam=0.0)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record a one-line verdict that is echoed in the terminal summary."""
    def report(number: int, passed: bool, detail: str, seconds: float, limit: float | None):
        budget = "" if limit is None else f" (limit {limit:.0f}s)"
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail} [{seconds:.1f}s{budget}]"
        _ACCEPTANCE_LINES.append(line)
        print(line)
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
