import json
import math

import numpy as np
import pytest
from hypothesis import example, given, strategies as st
from scipy import integrate, stats

from dmmmen import model
from dmmmen.errors import InvalidConfig
from dmmmen.model import (Hyperparameters, OrthantNetPrior, inverse_stick_breaking,
                          orthant_logdensity, sample_prior, stick_breaking)

from helpers import orthant_oracle, permute_state, tau_prior_logpdf

pos = st.floats(0.05, 5.0)


def test_hyperparameter_defaults():
    hp = Hyperparameters()
    assert (hp.J, hp.K, hp.V) == (20, 3, 2.0)
    assert hp.dirichlet_mass == pytest.approx(1 / 3)
    assert hp.total_sweeps == 2000 + 2000 * 2


def test_hyperparameter_validation(tmp_path):
    with pytest.raises(InvalidConfig):
        Hyperparameters(J=0)
    with pytest.raises(InvalidConfig):
        Hyperparameters(a=-1.0)
    with pytest.raises(InvalidConfig):
        Hyperparameters(prior="lasso")
    with pytest.raises(InvalidConfig):
        Hyperparameters.from_dict({"J": 3, "gamma": 1})
    p = tmp_path / "hp.json"
    p.write_text(json.dumps({"J": 4, "K": 2}))
    assert Hyperparameters.from_json(p).to_dict()["J"] == 4
    p.write_text("[1]")
    with pytest.raises(InvalidConfig):
        Hyperparameters.from_json(p)


def test_orthant_prior_requires_positive():
    with pytest.raises(ValueError):
        OrthantNetPrior(0.0, 1.0)


def test_loglik_point_matches_scipy():
    x, b = np.array([1.0, 2.0]), np.array([0.5, -0.25])
    assert model.loglik_point(x, 1.0, b, 0.3) == pytest.approx(
        stats.norm.logpdf(1.0, 0.0, math.sqrt(0.3)), rel=1e-13)
    with pytest.raises(ValueError):
        model.loglik_point(x, 1.0, b, 0.0)


@given(st.lists(st.floats(0.01, 0.99), min_size=0, max_size=8))
def test_stick_breaking_simplex_and_inverse(u):
    pi = stick_breaking(u)
    assert pi.shape == (len(u) + 1,)
    assert np.all(pi >= 0) and abs(pi.sum() - 1) < 1e-12
    np.testing.assert_allclose(stick_breaking(inverse_stick_breaking(pi)), pi, atol=1e-12)


def test_stick_breaking_hand_values():
    np.testing.assert_allclose(stick_breaking([0.5, 0.5]), [0.5, 0.25, 0.25])
    with pytest.raises(ValueError):
        stick_breaking([1.0])


@pytest.mark.parametrize("l1,l2,s2", [(1.0, 1.0, 1.0), (0.3, 2.0, 0.5), (4.0, 0.5, 2.0)])
def test_orthant_density_integrates_to_one_p1(l1, l2, s2):
    f = lambda b: math.exp(orthant_logdensity([b], OrthantNetPrior(l1, l2), s2))
    tot = integrate.quad(f, -np.inf, 0)[0] + integrate.quad(f, 0, np.inf)[0]
    assert tot == pytest.approx(1.0, abs=1e-6)


def test_orthant_density_is_product_over_coordinates():
    pr = OrthantNetPrior(1.2, 0.8)
    b = np.array([0.3, -1.1, 2.0])
    joint = orthant_logdensity(b, pr, 0.7)
    parts = sum(orthant_logdensity([v], pr, 0.7) for v in b)
    assert joint == pytest.approx(parts, rel=1e-13)


@given(st.floats(-3, 3), pos, pos, pos)
@example(6.103515625e-05, 1.0, 1.0, 1.0)
@example(0.0, 0.05, 5.0, 0.05)
def test_orthant_density_matches_scale_mixture(b, l1, l2, s2):
    lhs = math.exp(orthant_logdensity([b], OrthantNetPrior(l1, l2), s2))
    assert lhs == pytest.approx(orthant_oracle(b, l1, l2, s2), rel=1e-5, abs=1e-9)


def test_orthant_density_symmetric_and_peaked_at_zero():
    pr = OrthantNetPrior(1.0, 1.0)
    assert orthant_logdensity([0.7], pr, 1.0) == orthant_logdensity([-0.7], pr, 1.0)
    assert orthant_logdensity([0.0], pr, 1.0) > orthant_logdensity([0.1], pr, 1.0)


def test_tau_logprior_matches_scipy():
    t = np.array([0.01, 0.3, 0.9])
    np.testing.assert_allclose(model.tau_logprior(t, 0.7), tau_prior_logpdf(t, 0.7), rtol=1e-12)


def test_log_erfc_sqrt_large_argument():
    assert np.isfinite(model.log_erfc_sqrt(1e6))
    assert model.log_erfc_sqrt(0.25) == pytest.approx(math.log(math.erfc(0.5)))


@pytest.mark.parametrize("rate", [0.05, 0.6, 3.0, 40.0])
def test_tau_prior_sampler_ks(rate):
    rng = np.random.default_rng(3)
    draws = model.sample_tau_prior(np.full(40000, rate), rng)
    assert np.all((draws > 0) & (draws < 1))
    mass = math.erfc(math.sqrt(rate))
    cdf = lambda t: stats.invgamma.cdf(t, 0.5, scale=rate) / mass
    assert stats.kstest(draws, cdf).statistic < 0.01


def test_sample_prior_state_is_valid():
    hp = Hyperparameters(J=4, K=2)
    X = np.random.default_rng(0).standard_normal((30, 3))
    st_, y = sample_prior(hp, X, np.random.default_rng(1))
    st_.check()
    assert y.shape == (30,)


def test_joint_logdensity_permutation_invariant():
    hp = Hyperparameters(J=5, K=2)
    rng = np.random.default_rng(4)
    X = rng.standard_normal((40, 3))
    st_, y = sample_prior(hp, X, rng)
    base = model.joint_logdensity(st_, X, y, hp)
    for _ in range(10):
        perm = rng.permutation(5)
        assert abs(model.joint_logdensity(permute_state(st_, perm), X, y, hp) - base) <= 1e-10


def test_observed_loglik_matches_direct_sum():
    hp = Hyperparameters(J=3, K=1)
    rng = np.random.default_rng(5)
    X = rng.standard_normal((10, 2))
    st_, y = sample_prior(hp, X, rng)
    direct = sum(math.log(sum(st_.pi[j] * stats.norm.pdf(y[i], X[i] @ st_.beta[j],
                                                          math.sqrt(st_.sigma2[j]))
                              for j in range(3))) for i in range(10))
    assert model.observed_loglik(st_, X, y) == pytest.approx(direct, rel=1e-10)
