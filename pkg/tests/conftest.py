import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sdequiv.core import FiniteSupport, QGMDP, linear_policy
from sdequiv.envs import LQGEnv, NL1DEnv
from sdequiv.exact import GridModel

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

FROZEN = json.loads((Path(__file__).parent / "oracle" / "frozen.json").read_text())


@pytest.fixture(scope="session")
def frozen():
    return FROZEN


@pytest.fixture
def scalar_lqg():
    return LQGEnv(0.9, 0.5, 1.0, 0.1, 0.04, 0.9, p0={"atoms": [[1.0]]}, Theta=-0.5)


@pytest.fixture
def lqg_2d():
    return LQGEnv(
        [[0.9, 0.1], [0.0, 0.8]], [[0.5, 0.0], [0.1, 0.5]], np.diag([1.0, 0.5]),
        0.1 * np.eye(2), 0.04 * np.eye(2), 0.9,
        p0={"atoms": [[1.0, -0.5]]}, Theta=[[-0.5, -0.1], [0.0, -0.4]],
    )


@pytest.fixture
def nl1d():
    return NL1DEnv()


@pytest.fixture
def nl1d_grid(nl1d):
    h = nl1d.half_width()
    return GridModel([(-h, h, 401)], 10)


def lqg_grid(env, nodes=801, span=5.0, order=10):
    std = env.stationary_std()
    reach = np.max(np.abs(env.p0.atoms()[0]), axis=0)
    return GridModel([(-(span * s + m), span * s + m, nodes) for s, m in zip(std, reach)], order)


def frozen_mdp(n_x=1, n_u=1, gamma=0.9, q=1.0, x0=0.3, R=0.0, Sigma=1e-12):
    """Dynamics that ignore the control: every state is absorbing."""
    return QGMDP(
        n_x=n_x, n_u=n_u,
        f=lambda X, U: X.copy(),
        q=lambda X: np.full(X.shape[0], q),
        r=lambda X: np.zeros((X.shape[0], n_u)),
        R=R * np.eye(n_u), Sigma=Sigma * np.eye(n_u), gamma=gamma,
        p0=FiniteSupport(np.full((1, n_x), x0), [1.0]),
        f_jac_u=lambda X, U: np.zeros((X.shape[0], n_x, n_u)),
    )


def zero_policy(n_u=1, n_x=1):
    return linear_policy(np.zeros((n_u, n_x)))


# acceptance lines, printed once at the end of the session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
