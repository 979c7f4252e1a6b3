import pytest

from mitune.data import gen_dataset


@pytest.fixture(scope="session")
def seg1000():
    return gen_dataset("seg", 1000, 7)


@pytest.fixture(scope="session")
def msa1000():
    return gen_dataset("msa", 1000, 7)


@pytest.fixture(scope="session")
def small():
    return {t: gen_dataset(t, 12, 3) for t in ("seg", "cls", "msa")}


_RESULTS: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Store one acceptance line; printed in the terminal summary."""
    _RESULTS[criterion] = f"[criterion {criterion:2d}] {'PASS' if ok else 'FAIL'}  {detail}"
    print(_RESULTS[criterion], flush=True)


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_RESULTS):
            terminalreporter.write_line(_RESULTS[k])
