import numpy as np
import pytest
from hypothesis import settings

from asyncadmm.data import make_logistic_problem, make_quadratic_problem

settings.register_profile("slow_ok", deadline=None, max_examples=50)
settings.load_profile("slow_ok")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def quad_problem(seed=3, N=3, n=4, **kw):
    return make_quadratic_problem(N=N, n=n, seed=seed, **kw)


def logistic_problem(seed=3, m=60, n=4, N=3, **kw):
    problem, _ = make_logistic_problem(m=m, n=n, N=N, seed=seed, **kw)
    return problem


@pytest.fixture
def small_quadratic():
    return quad_problem()


@pytest.fixture
def small_logistic():
    return logistic_problem()
