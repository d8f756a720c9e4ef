import pytest

from psl import config, harness

_CRITERIA_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records a PASS/FAIL line and asserts ``ok``."""
    store = request.config.stash[_CRITERIA_KEY]

    def check(number: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {detail}"
        store.append((number, line))
        print(line)
        assert ok, line

    return check


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """The full desk spectrum (eps 0, 2, 4, 8; 15 epochs) for seeds 0, 1, 2 via the harness."""
    import time

    runs = {}
    start = time.perf_counter()
    for seed in (0, 1, 2):
        out = tmp_path_factory.mktemp(f"desk_seed{seed}")
        resolved = config.resolve({}, seed=seed)
        harness.run("train-spectrum", resolved, out)
        harness.run("eval-grid", resolved, out)
        harness.run("report", resolved, out)
        runs[seed] = out
    return runs, time.perf_counter() - start


@pytest.fixture(scope="session")
def desk_seed0(desk_runs):
    """Seed-0 spectrum models keyed by epsilon, plus the matching test split."""
    runs, _ = desk_runs
    ctx = harness.Context(config.resolve({}, seed=0), runs[0])
    _, test = ctx.datasets()
    return ctx.load_models(), test
