import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from factorcop import LongitudinalDataset

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_dataset(sizes, kind="normal", y=None, K=None, seed=0, p=1):
    """Dataset with the given subject sizes and intercept-only design."""
    rng = np.random.default_rng(seed)
    n = int(np.sum(sizes))
    ids = np.repeat([f"s{i}" for i in range(len(sizes))], sizes)
    time = np.concatenate([np.arange(k, dtype=float) for k in sizes])
    if y is None:
        if kind == "normal":
            y = rng.normal(size=n)
        elif kind == "gamma":
            y = rng.gamma(2.0, size=n)
        elif kind == "binary":
            y = rng.integers(0, 2, size=n)
        else:
            y = rng.integers(1, K + 1, size=n)
    X = np.column_stack([np.ones(n)] + [rng.normal(size=n) for _ in range(p - 1)])
    names = ["(Intercept)"] + [f"x{k}" for k in range(1, p)]
    if kind == "ordinal":
        X, names = X[:, 1:] if p > 1 else rng.normal(size=(n, 1)), names[1:] or ["x1"]
    return LongitudinalDataset.from_arrays(ids, time, y, X, kind, names, K)


@pytest.fixture
def dataset_factory():
    return make_dataset
