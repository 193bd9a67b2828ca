"""Shared fixtures and the acceptance summary printed at the end of a run."""

import numpy as np
import pytest

from dmhe.cstr4 import CSTR4Params, Q_NOMINAL, cstr4_model, refined_steady_state
from dmhe.model import NonlinearModel, simulate

# filled by tests/test_acceptance.py: criterion id -> (passed, detail)
ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")


@pytest.fixture(scope="session")
def cstr():
    return cstr4_model()


@pytest.fixture(scope="session")
def params():
    return CSTR4Params()


@pytest.fixture(scope="session")
def x_s():
    return refined_steady_state()


@pytest.fixture(scope="session")
def nominal_traj(cstr, x_s, params):
    """Noise-free 60-step trajectory at the steady state."""
    return simulate(cstr, x_s, params.theta(), np.tile(Q_NOMINAL, (60, 1)))


def linear_model(A, B, C, n_p=0):
    """Time-invariant linear model with analytic Jacobians."""
    A, B, C = (np.atleast_2d(np.asarray(M, float)) for M in (A, B, C))
    n, nu, ny = A.shape[0], B.shape[1], C.shape[0]
    return NonlinearModel(n, nu, ny, n_p, lambda x, u, th: A @ x + B @ u, lambda x, th: C @ x,
                          f_jac=lambda x, u, th: (A, np.zeros((n, n_p))),
                          h_jac=lambda x, th: (C, np.zeros((ny, n_p))))


def random_stable_system(rng, n=3, nu=1, ny=2, radius=0.9):
    A = rng.standard_normal((n, n))
    A *= radius / max(abs(np.linalg.eigvals(A)))
    return A, rng.standard_normal((n, nu)), rng.standard_normal((ny, n))
