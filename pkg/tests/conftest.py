import pytest

from orfnet.synthetic import GeneratorConfig, generate


@pytest.fixture(scope="session")
def tiny_data():
    """A small generated dataset shared by the training and CLI tests."""
    return generate(GeneratorConfig(n_box=8, n_dot=6, n_unlabeled=10, n_val=2, n_test=6))


def pools_for(data, forms):
    return {f: [s.for_training() for s in data[f]] for f in forms}


_CRITERIA: list[str] = []


@pytest.fixture()
def criterion():
    """Record one acceptance line; every line is repeated in the terminal summary."""

    def report(number: int, passed: bool, detail: str) -> bool:
        line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        _CRITERIA.append(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
