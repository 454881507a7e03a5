import pytest

from recloop.dataset import build_activity_trace, generate_synthetic, temporal_holdout
from recloop.engine import SimulationConfig


def make_world(n_users=40, n_items=120, n_epochs=3, rate=0.5, seed=0, epoch_days=30):
    """Synthetic log, holdout split and activity trace sized for ``n_epochs``."""
    n_days = 180 + n_epochs * epoch_days
    data = generate_synthetic(n_users, n_items, n_days, 1.0, 2, rate, seed=seed)
    split = temporal_holdout(data)
    trace = build_activity_trace(data, (split.sim_start_day, split.sim_start_day + n_epochs * epoch_days))
    return data, split, trace


@pytest.fixture(scope="session")
def world():
    return make_world()


@pytest.fixture
def base_config():
    return SimulationConfig(n_epochs=3, n_runs=2, model_kind="popularity", candidate_set_size=20, k_reclist=10)


# acceptance verdicts, printed once at the end of the session
VERDICTS: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    VERDICTS[criterion] = (bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
