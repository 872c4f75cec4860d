from unittest import mock

import numpy as np
import pytest

from dmmmen import geweke, sampler
from dmmmen.errors import InvalidConfig


def test_batch_means_iid():
    x = np.random.default_rng(0).standard_normal((50000, 1))
    assert geweke.batch_means_variance(x)[0] == pytest.approx(1 / 50000, rel=0.35)


def test_batch_means_ar1():
    # AR(1) with coefficient r: variance of the mean is (1+r)/(1-r) / ((1-r^2) N) * (1-r^2)
    rng = np.random.default_rng(1)
    r, N = 0.8, 200000
    e = rng.standard_normal(N)
    x = np.empty(N)
    x[0] = e[0]
    for t in range(1, N):
        x[t] = r * x[t - 1] + e[t]
    expected = (1 / (1 - r) ** 2) / N
    assert geweke.batch_means_variance(x[:, None])[0] == pytest.approx(expected, rel=0.4)


def test_statistics_are_label_symmetric():
    from dmmmen.model import sample_prior
    from helpers import permute_state
    X = np.random.default_rng(0).standard_normal((20, 3))
    st, y = sample_prior(geweke.GEWEKE_HP, X, np.random.default_rng(1))
    a = geweke.geweke_statistics(st, y)
    b = geweke.geweke_statistics(permute_state(st, [2, 0, 1]), y)
    np.testing.assert_allclose(a, b, rtol=1e-14)


def test_sampler_passes_short_run():
    rep = geweke.geweke_joint_test(iters=10000, seed=0)
    assert rep.passed, dict(zip(rep.names, rep.z_scores))
    assert set(rep.to_dict()["statistics"]) == set(geweke.STATISTICS)


def test_detects_wrong_variance_conditional():
    orig = sampler.sigma2_conditional_params

    def off_by_one(*args, **kwargs):
        shape, scale = orig(*args, **kwargs)
        return shape + 1.0, scale

    with mock.patch.object(sampler, "sigma2_conditional_params", off_by_one):
        rep = geweke.geweke_joint_test(iters=10000, seed=0)
    assert not rep.passed
    assert np.max(np.abs(rep.z_scores)) > 10


def test_rejects_zero_iterations():
    with pytest.raises(InvalidConfig):
        geweke.geweke_joint_test(iters=0)
