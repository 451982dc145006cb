import numpy as np
import pytest

from nbrflow.data import make_moons, split
from nbrflow.neighborhoods import build_table, fit_pca


def randomize(module, rng, scale=0.5):
    """Perturb every parameter so couplings are far from identity."""
    for p in module.parameters():
        p.data = p.data + rng.normal(0.0, scale, size=p.shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def moons_splits():
    r = np.random.default_rng(11)
    ds = make_moons(600, 0.1, r)
    return split(ds, [0.7, 0.15, 0.15], r)


@pytest.fixture(scope="session")
def moons_table(moons_splits):
    tr = moons_splits[0]
    return build_table(tr.x, fit_pca(tr.x), 5)


def _train(variant, splits, table, epochs, seed=0):
    from nbrflow.estimators import build_estimator
    from nbrflow.training import TrainConfig, fit

    tr, va, _ = splits
    est = build_estimator(variant, 2, table, hidden=32, rng=np.random.default_rng(seed))
    return fit(est, tr.x, va.x, TrainConfig(epochs=epochs, seed=seed, early_stop_patience=epochs))


@pytest.fixture(scope="session")
def trained_rnvp(moons_splits):
    return _train("rnvp", moons_splits, None, 40)


@pytest.fixture(scope="session")
def trained_nct(moons_splits, moons_table):
    return _train("nct", moons_splits, moons_table, 40)


@pytest.fixture(scope="session")
def trained_ncl(moons_splits, moons_table):
    return _train("ncl", moons_splits, moons_table, 25)


# acceptance reporting: one line per criterion in the terminal summary

ACCEPTANCE = {}


def record(number: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
