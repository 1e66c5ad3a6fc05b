import numpy as np
import pytest

from delayopt import hjb, models


@pytest.fixture(scope="session")
def merton_nodelay_spec():
    return models.build_merton(models.MertonParams(), m=4)


@pytest.fixture(scope="session")
def merton_nodelay_solution(merton_nodelay_spec):
    """Shared no-delay portfolio solve on a geometric wealth grid."""
    spec = merton_nodelay_spec
    chain = hjb.reduce_to_lag_chain(spec, 1)
    axes = (np.array([1.0]), np.geomspace(0.005, 100.0, 281),
            np.array([1.0]), np.array([1.0]))
    result = hjb.value_iteration(chain, axes, tol=1e-7, max_iter=30000)
    return chain, result


@pytest.fixture(scope="session")
def merton_delay_spec():
    p = models.MertonParams(
        mu=models.ClampedAffine(base=0.05, slope=0.4, lo=0.02, hi=0.12),
        nu=models.ClampedAffine(base=0.25, slope=0.5, lo=0.15, hi=0.45),
        d=0.2,
        kernel_drift={"preset": "affine_ramp", "scale": 0.5},
        kernel_noise={"preset": "affine_ramp", "scale": 0.5},
    )
    return models.build_merton(p, m=20)


@pytest.fixture(scope="session")
def merton_delay_solution(merton_delay_spec):
    spec = merton_delay_spec
    chain = hjb.reduce_to_lag_chain(spec, 1)
    axes = (np.geomspace(0.4, 2.5, 9), np.geomspace(0.01, 50.0, 81),
            np.geomspace(0.4, 2.5, 9), np.array([1.0]))
    result = hjb.value_iteration(chain, axes, tol=1e-6, max_iter=30000)
    return chain, result


@pytest.fixture(scope="session")
def advertising_spec():
    return models.build_advertising(models.AdvertisingParams(), m=100)


@pytest.fixture(scope="session")
def advertising_solution(advertising_spec):
    chain = hjb.reduce_to_lag_chain(advertising_spec, 2)
    axes = (np.linspace(-1.0, 2.5, 29), np.linspace(-1.0, 2.5, 9),
            np.linspace(-1.0, 2.5, 9))
    result = hjb.value_iteration(chain, axes, tol=1e-8, max_iter=10000)
    return chain, result
