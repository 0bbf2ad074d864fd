import re

import numpy as np
import pytest

from smf.model import Dataset, FactoredModel, LiftedState, SolverConfig, theta_shape


def random_dataset(seed=0, p=6, n=8, q=2, kappa=2):
    rng = np.random.default_rng(seed)
    return Dataset(rng.standard_normal((p, n)), rng.standard_normal((q, n)),
                   rng.integers(0, kappa + 1, n), kappa)


def random_state(data, variant, seed=0, scale=0.5):
    rng = np.random.default_rng(seed + 1000)
    theta = scale * rng.standard_normal(theta_shape(variant, data.p, data.n, data.kappa))
    gamma = scale * rng.standard_normal((data.q, data.kappa))
    return LiftedState(theta, gamma, variant)


def random_model(p, n, q, kappa, r, seed=0):
    rng = np.random.default_rng(seed)
    return FactoredModel(rng.standard_normal((p, r)), rng.standard_normal((r, n)),
                         rng.standard_normal((r, kappa)), rng.standard_normal((q, kappa)))


def fd_gradient(fun, z, step=1e-5):
    """Central finite differences of a scalar function of a flat vector."""
    grad = np.zeros_like(z)
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = step
        grad[i] = (fun(z + e) - fun(z - e)) / (2 * step)
    return grad


@pytest.fixture
def small_data():
    return random_dataset()


@pytest.fixture(params=["feature", "filter"])
def variant(request):
    return request.param


@pytest.fixture
def base_cfg(variant):
    return SolverConfig(variant=variant, xi=1.5, lam=0.7, tau=0.05, rank=2, max_iters=50)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(capsys):
    """Print one verdict line per criterion immediately and keep it for the final summary."""

    def emit(criterion, ok, detail):
        line = f"[acceptance {criterion}] {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=_criterion_key):
            terminalreporter.write_line(line)


def _criterion_key(line):
    ident = line.split("]")[0].split()[1]
    digits = re.match(r"\d+", ident).group()
    return int(digits), ident[len(digits):]
