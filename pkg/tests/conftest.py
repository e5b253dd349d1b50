import pytest

from recem.config import RunConfig

TINY = dict(K=4, M=4, n_in=12, dim_r=6, dim_z=4, d=3, n_hidden=8, n_train=64, n_val=32, n_test=64,
            epochs=2, batch_size=32, seeds=[0])


@pytest.fixture
def tiny_config(tmp_path):
    return RunConfig(**TINY, out_dir=str(tmp_path / "runs"))


@pytest.fixture(autouse=True)
def single_worker(monkeypatch):
    monkeypatch.setenv("RECEM_THREADS", "1")


_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    def record(number: int, passed: bool, detail: str) -> bool:
        _VERDICTS.append(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
        print(_VERDICTS[-1])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
