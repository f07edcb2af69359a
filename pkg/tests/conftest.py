import numpy as np
import pytest

from balm.model import draw_prior
from balm.transforms import pack
from balm.types import CovariatePrior, LayerDataset, ModelSpec, n_edges


def random_dataset(rng, n=5, L=3, density=0.5, mask=None, p=None):
    P = n_edges(n)
    Z = (rng.uniform(size=(L, P)) < density).astype(int)
    Y = np.where(Z == 1, rng.normal(size=(L, P)), 0.0)
    x = None if p is None else rng.normal(size=(L, p))
    return LayerDataset(n, L, Z, Y, mask=mask, covariates=x)


def random_instance(seed, n=5, L=3, M=2, K=2, likelihood="gaussian", coupling="coupled",
                    covariate=False, masked=True):
    """Dataset, spec and a flat parameter vector drawn from the prior."""
    rng = np.random.default_rng(seed)
    P = n_edges(n)
    mask = np.array([[0, 1], [L - 1, P - 1]]) if masked else None
    data = random_dataset(rng, n, L, mask=mask, p=2 if covariate else None)
    spec = ModelSpec(M=M, K=K, likelihood=likelihood, coupling=coupling,
                     covariate_prior=CovariatePrior() if covariate else None)
    phi = pack(draw_prior(spec, data, rng), spec, data)
    return data, spec, phi


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Print and keep one verdict line for the end-of-run summary."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
