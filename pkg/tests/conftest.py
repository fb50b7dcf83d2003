import numpy as np
import pytest

import mimicsde as m


@pytest.fixture(scope="session")
def heston():
    return m.heston_model(1.5, 0.04, 0.3, -0.5, r=0.02, q=0.0)


@pytest.fixture(scope="session")
def heston_killing():
    return m.heston_model(1.5, 0.04, 0.3, -0.5, r=0.02, q=0.0, with_killing=True)


@pytest.fixture(scope="session")
def start():
    return m.SpaceTimePoint(0.0, (0.0, 0.09))


@pytest.fixture(scope="session")
def small_ensemble(heston, start):
    """4000 paths, h = 2^-6, T = 1: shared by the statistical unit tests."""
    grid = m.TimeGrid(0.0, 1.0, 2.0**-6)
    return m.simulate_sde(heston, start, grid, 4000, 123)


def zero_model(d: int = 2) -> m.CoefficientModel:
    return m.CoefficientModel(
        d=d,
        a=lambda t, x: np.zeros((np.asarray(x).shape[0], d, d)),
        b=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
        c=lambda t, x: np.zeros(np.asarray(x).shape[0]),
        budget=m.RegularityBudget(1e-9, 1.0, 1e-9, 0.5),
        time_independent=True,
        name="zero",
    )


def constant_model(b_vec, a_mat=None, d=None) -> m.CoefficientModel:
    b_vec = np.asarray(b_vec, dtype=float)
    d = d or b_vec.shape[0]
    a_mat = np.eye(d) if a_mat is None else np.asarray(a_mat, dtype=float)
    return m.CoefficientModel(
        d=d,
        a=lambda t, x: np.broadcast_to(a_mat, (np.asarray(x).shape[0], d, d)).copy(),
        b=lambda t, x: np.broadcast_to(b_vec, np.asarray(x).shape).copy(),
        c=lambda t, x: np.zeros(np.asarray(x).shape[0]),
        budget=m.RegularityBudget(0.5, 10.0, max(float(b_vec[-1]), 1e-9), 0.5),
        time_independent=True,
        name="constant",
    )
