"""Joint-distribution ("getting it right") test of the sampler.

Two simulators of p(theta, y | X) are compared:

* marginal-conditional: theta from the prior, then y | theta, independently;
* successive-conditional: alternate one sampler sweep theta | y with a fresh
  y | theta.

If every conditional update is correct both produce the same joint, so the
means of any test statistic agree up to Monte Carlo error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model
from .errors import InvalidConfig
from .model import Hyperparameters
from .sampler import GibbsSampler

# Light-tailed settings so every statistic below has a finite variance.
GEWEKE_HP = Hyperparameters(J=3, K=2, a=4.0, b=3.0, e=2.0, f=2.0, R=3.0, L=3.0, V=6.0,
                            burn_in=0, n_samples=1, thin=1, seed=0)

STATISTICS = ("beta_mean", "beta_sq", "log_sigma2", "log_lambda1", "log_lambda2",
              "tau_mean", "tau_sq", "log_alpha", "pi_sq", "w_sq", "occupied", "log_y_sq")


def geweke_statistics(state: model.MixtureState, y) -> np.ndarray:
    """Label-symmetric test functions of (theta, y)."""
    return np.array([
        state.beta.mean(),
        (state.beta ** 2).mean(),
        np.log(state.sigma2).mean(),
        np.log(state.lambda1).mean(),
        np.log(state.lambda2).mean(),
        state.tau.mean(),
        (state.tau ** 2).mean(),
        math.log(state.alpha),
        float(np.sum(state.pi ** 2)),
        float(np.sum(state.w ** 2)),
        float(np.unique(state.z).size),
        math.log(float(np.mean(y ** 2))),
    ])


def _regenerate_y(state, X, rng):
    mu = (X * state.beta[state.z]).sum(axis=1)
    return mu + rng.standard_normal(X.shape[0]) * np.sqrt(state.sigma2[state.z])


def batch_means_variance(x, n_batches: int = 50) -> np.ndarray:
    """Variance of the sample mean of a correlated series (columns)."""
    x = np.asarray(x)
    N = x.shape[0] - x.shape[0] % n_batches
    b = x[:N].reshape(n_batches, N // n_batches, -1).mean(axis=1)
    return b.var(axis=0, ddof=1) / n_batches


@dataclass
class GewekeReport:
    names: tuple
    z_scores: np.ndarray
    forward_means: np.ndarray
    gibbs_means: np.ndarray
    iters: int
    threshold: float = 4.0
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.z_scores) <= self.threshold))

    def to_dict(self) -> dict:
        return {
            "iters": self.iters,
            "threshold": self.threshold,
            "passed": self.passed,
            "statistics": {n: {"z": float(z), "forward_mean": float(a), "gibbs_mean": float(b)}
                           for n, z, a, b in zip(self.names, self.z_scores,
                                                 self.forward_means, self.gibbs_means)},
        }


def geweke_joint_test(hp: Hyperparameters = GEWEKE_HP, n_synth: int = 20, iters: int = 100_000,
                      p: int = 3, seed: int = 0, threshold: float = 4.0) -> GewekeReport:
    if iters < 1:
        raise InvalidConfig("iters must be >= 1")
    if n_synth < 1 or p < 1:
        raise InvalidConfig("need n_synth >= 1 and p >= 1")
    ss = np.random.SeedSequence(seed)
    rng_x, rng_f, rng_g = (np.random.default_rng(s) for s in ss.spawn(3))
    X = rng_x.standard_normal((n_synth, p))
    if hp.intercept:
        X[:, -1] = 1.0

    forward = np.empty((iters, len(STATISTICS)))
    for t in range(iters):
        st, y = model.sample_prior(hp, X, rng_f)
        forward[t] = geweke_statistics(st, y)

    st, y = model.sample_prior(hp, X, rng_g)
    sampler = GibbsSampler(X, y, hp, rng_g, state=st)
    gibbs = np.empty_like(forward)
    for t in range(iters):
        sampler.sweep(adapt=False, record=False)
        sampler.y = _regenerate_y(sampler.state, X, rng_g)
        gibbs[t] = geweke_statistics(sampler.state, sampler.y)

    m_f, m_g = forward.mean(axis=0), gibbs.mean(axis=0)
    v_f = forward.var(axis=0, ddof=1) / iters
    v_g = batch_means_variance(gibbs) if iters >= 100 else gibbs.var(axis=0, ddof=1) / iters
    z = (m_g - m_f) / np.sqrt(v_f + v_g)
    return GewekeReport(names=STATISTICS, z_scores=z, forward_means=m_f, gibbs_means=m_g,
                        iters=iters, threshold=threshold)
