import time
from pathlib import Path

import pytest
import torch

torch.set_num_threads(1)

FIXTURES = Path(__file__).parent / "fixtures"

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number n")


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    n, title = crit
    entry = _criteria.setdefault(n, {"title": title, "ok": True, "msg": ""})
    if report.failed:
        entry["ok"] = False
        msg = str(report.longrepr.reprcrash.message) if hasattr(report.longrepr, "reprcrash") else str(report.longrepr)
        entry["msg"] = msg.splitlines()[0][:160]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        line = f"criterion {n:2d}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        if not e["ok"]:
            line += f"  -- {e['msg']}"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def fixture_data(tmp_path_factory):
    from afa.data import fixture_spec, gen_data

    out = tmp_path_factory.mktemp("fixture_data")
    gen_data(fixture_spec(), out)
    return out


@pytest.fixture(scope="session")
def fixture_sets(fixture_data):
    from afa.data import load_split

    return load_split(fixture_data, "train"), load_split(fixture_data, "test")


@pytest.fixture(scope="session")
def probe():
    from afa.linalg import Rng

    return Rng(1234).child("probe").normal((64, 16))


@pytest.fixture(scope="session")
def fixture_run(fixture_data, tmp_path_factory, probe):
    """The default fixture stream, trained through the CLI code path, with a post-task-1 snapshot."""
    from afa.cli import train_to_dir
    from afa.model import fixture_config

    snap = {}

    def on_task(i, state, recs):
        if i == 0:
            moe = state.adapters.abfa
            snap["router"] = {n: s.router(0).weight.detach().clone() for n, s in moe.sites.items()}
            with torch.no_grad():
                snap["logits"] = {n: s.router(0).logits(probe).clone() for n, s in moe.sites.items()}

    out = tmp_path_factory.mktemp("run_a")
    t0 = time.perf_counter()
    state, matrix, records = train_to_dir(fixture_config(), fixture_data, out, threads=1, on_task=on_task)
    return {
        "state": state,
        "matrix": matrix,
        "records": records,
        "seconds": time.perf_counter() - t0,
        "snapshot": snap,
        "dir": out,
    }


SMALL_CONFIG = dict(d=8, n_experts=4, rank=4, n_prototypes=2, batch_size=8, iterations_abfa=150, iterations_affa=20)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """Three quick tasks for unit tests that need a trained model."""
    from afa.data import SyntheticSpec, gen_data

    out = tmp_path_factory.mktemp("small_data")
    gen_data(SyntheticSpec(n_tasks=3, classes_per_task=3, train_per_class=12, test_per_class=6, d_in=8), out)
    return out


@pytest.fixture(scope="session")
def small_run(small_data):
    from afa.data import load_split
    from afa.model import fixture_config
    from afa.trainer import run_stream

    train, test = load_split(small_data, "train"), load_split(small_data, "test")
    state, matrix, records = run_stream(fixture_config(**SMALL_CONFIG), train, test)
    return {"state": state, "matrix": matrix, "records": records, "train": train, "test": test}
