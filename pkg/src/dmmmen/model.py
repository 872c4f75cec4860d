"""Parameters and exact log-densities of the elastic-net regression mixture.

Component ``j`` of the mixture is a linear regression ``y ~ N(x beta_j,
sigma2_j)``.  Mixture weights come from a truncated stick-breaking process
and each coefficient vector draws its prior from one of ``K`` elastic nets,
selected by the indicator ``c_j``.  The elastic-net (orthant Gaussian)
density is represented through latent scales ``tau_jl`` in (0, 1)::

    beta_j | tau_j      ~ N(0, sigma2_j / lambda2 * diag(1 - tau_j))
    tau_jl              ~ InvGamma(1/2, rate) truncated to (0, 1)
    rate                = lambda1**2 / (8 * lambda2 * sigma2_j)

Component and class indices are 0-based throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from scipy import special

from .errors import InvalidConfig

LOG_2PI = math.log(2.0 * math.pi)
LOG_PI = math.log(math.pi)
# Latent scales are kept inside (0, 1) by these margins.
TAU_FLOOR = 1e-300
TAU_CEIL = 1.0 - 1e-12
# Prior variance multiplier of the "flat" coefficient prior used for ablations.
FLAT_PRIOR_VARIANCE = 1e6

PRIOR_KINDS = ("elastic-net", "flat")


@dataclass(frozen=True)
class Hyperparameters:
    J: int = 20
    K: int = 3
    a: float = 1.0
    b: float = 1.0
    e: float = 1.0
    f: float = 1.0
    R: float = 1.0
    L: float = 1.0
    V: float = 2.0
    burn_in: int = 2000
    n_samples: int = 2000
    thin: int = 2
    seed: int = 0
    # Append a constant column before fitting; its coefficient is reported
    # separately and never ranked as a feature.
    intercept: bool = False
    # "flat" swaps the elastic nets for N(0, sigma2 * 1e6 I) (ablation only).
    prior: str = "elastic-net"

    def __post_init__(self):
        for name in ("J", "K", "thin"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.n_samples < 1:
            raise InvalidConfig("n_samples must be >= 1")
        if self.burn_in < 0:
            raise InvalidConfig("burn_in must be >= 0")
        for name in ("a", "b", "e", "f", "R", "L", "V"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise InvalidConfig(f"{name} must be a positive real, got {v}")
        if self.prior not in PRIOR_KINDS:
            raise InvalidConfig(f"prior must be one of {PRIOR_KINDS}")

    @property
    def dirichlet_mass(self) -> float:
        return 1.0 / self.K

    @property
    def total_sweeps(self) -> int:
        return self.burn_in + self.n_samples * self.thin

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidConfig(f"unknown hyperparameter(s): {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "Hyperparameters":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InvalidConfig(f"{path}: {exc}") from None
        if not isinstance(d, dict):
            raise InvalidConfig(f"{path}: expected a JSON object")
        return cls.from_dict(d)

    def with_overrides(self, **kw) -> "Hyperparameters":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


@dataclass(frozen=True)
class OrthantNetPrior:
    lambda1: float
    lambda2: float

    def __post_init__(self):
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ValueError("elastic-net parameters must be strictly positive")


@dataclass
class MixtureState:
    """One draw of every latent variable and parameter."""

    u: np.ndarray        # (J-1,) stick fractions
    pi: np.ndarray       # (J,)
    alpha: float
    beta: np.ndarray     # (J, p)
    sigma2: np.ndarray   # (J,)
    z: np.ndarray        # (n,) component of each observation
    w: np.ndarray        # (K,)
    c: np.ndarray        # (J,) elastic net used by each component
    lambda1: np.ndarray  # (K,)
    lambda2: np.ndarray  # (K,)
    tau: np.ndarray      # (J, p)

    @property
    def J(self) -> int:
        return self.pi.shape[0]

    @property
    def K(self) -> int:
        return self.w.shape[0]

    def copy(self) -> "MixtureState":
        return MixtureState(**{f.name: np.copy(getattr(self, f.name))
                               if isinstance(getattr(self, f.name), np.ndarray)
                               else getattr(self, f.name) for f in fields(self)})

    def check(self) -> None:
        """Raise ``AssertionError`` if any state invariant is violated."""
        J, K = self.J, self.K
        assert self.u.shape == (J - 1,)
        assert np.all((self.u > 0) & (self.u < 1)), "stick fraction outside (0, 1)"
        assert np.all(self.pi >= 0) and abs(self.pi.sum() - 1) <= 1e-10
        np.testing.assert_allclose(self.pi, stick_breaking(self.u), rtol=0, atol=1e-10)
        assert np.all(self.w >= 0) and abs(self.w.sum() - 1) <= 1e-10
        assert self.tau.shape == self.beta.shape
        assert np.all((self.tau > 0) & (self.tau < 1)), "tau outside (0, 1)"
        assert np.all(self.sigma2 > 0) and np.all(np.isfinite(self.sigma2))
        assert np.all(self.lambda1 > 0) and np.all(self.lambda2 > 0)
        assert np.isfinite(self.alpha) and self.alpha > 0
        assert np.all(np.isfinite(self.beta))
        assert self.c.shape == (J,) and np.all((self.c >= 0) & (self.c < K))
        assert np.all((self.z >= 0) & (self.z < J))


# ---------------------------------------------------------------------------
# elementary densities
# ---------------------------------------------------------------------------

def loglik_point(x, y, beta_j, sigma2_j) -> float:
    """``log N(y | x . beta_j, sigma2_j)``."""
    if not sigma2_j > 0:
        raise ValueError(f"variance must be positive, got {sigma2_j}")
    r = float(y) - float(np.dot(x, beta_j))
    return -0.5 * (LOG_2PI + math.log(sigma2_j) + r * r / sigma2_j)


def gaussian_loglik(X, y, beta, sigma2) -> np.ndarray:
    """n x J matrix of ``log N(y_i | x_i beta_j, sigma2_j)``."""
    resid = y[:, None] - X @ beta.T
    return -0.5 * (LOG_2PI + np.log(sigma2)[None, :] + resid ** 2 / sigma2[None, :])


def stick_breaking(u) -> np.ndarray:
    """Mixture weights from stick fractions; the last weight takes the remainder."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if np.any(~((u > 0) & (u < 1))):
        raise ValueError("stick fractions must lie in (0, 1)")
    J = u.shape[0] + 1
    pi = np.empty(J)
    rest = np.concatenate(([1.0], np.cumprod(1.0 - u)))
    pi[:-1] = u * rest[:-1]
    pi[-1] = max(0.0, 1.0 - pi[:-1].sum())
    return pi


def inverse_stick_breaking(pi) -> np.ndarray:
    """Stick fractions reproducing ``pi``; clipped into (0, 1)."""
    pi = np.asarray(pi, dtype=np.float64)
    remaining = 1.0 - np.concatenate(([0.0], np.cumsum(pi[:-1])))
    with np.errstate(divide="ignore", invalid="ignore"):
        u = pi[:-1] / remaining[:-1]
    u = np.where(np.isfinite(u), u, 0.5)
    return np.clip(u, 1e-300, 1.0 - 1e-12)


def orthant_logdensity_rows(beta, lambda1, lambda2, sigma2) -> np.ndarray:
    """Normalized log elastic-net density for each row of ``beta``.

    Broadcasts ``lambda1``, ``lambda2`` and ``sigma2`` against the rows. A
    zero coefficient is treated as lying in the positive orthant.
    """
    beta = np.atleast_2d(np.asarray(beta, dtype=np.float64))
    l1 = np.asarray(lambda1, dtype=np.float64)[..., None]
    l2 = np.asarray(lambda2, dtype=np.float64)[..., None]
    s2 = np.asarray(sigma2, dtype=np.float64)[..., None]
    p = beta.shape[-1]
    sign = np.where(beta >= 0, 1.0, -1.0)
    mean = -(l1 / (2.0 * l2)) * sign
    var = s2 / l2
    lognorm = -0.5 * (LOG_2PI + np.log(var) + (beta - mean) ** 2 / var)
    # each orthant piece carries mass Phi(-l1 / (2 sigma sqrt(l2))) per axis;
    # there are two orthants per axis, hence the log 2
    logphi = special.log_ndtr(-l1 / (2.0 * np.sqrt(s2) * np.sqrt(l2)))
    return lognorm.sum(axis=-1) - p * (logphi[..., 0] + math.log(2.0))


def orthant_logdensity(beta_j, prior: OrthantNetPrior, sigma2_j) -> float:
    """Log elastic-net prior density of one coefficient vector."""
    if not sigma2_j > 0:
        raise ValueError(f"variance must be positive, got {sigma2_j}")
    if not (prior.lambda1 > 0 and prior.lambda2 > 0):
        raise ValueError("elastic-net parameters must be strictly positive")
    beta_j = np.asarray(beta_j, dtype=np.float64).reshape(-1)
    return float(orthant_logdensity_rows(beta_j, prior.lambda1, prior.lambda2, sigma2_j)[0])


def tau_rate(lambda1, lambda2, sigma2):
    """Rate of the truncated inverse-gamma prior on the latent scales."""
    return np.asarray(lambda1) ** 2 / (8.0 * np.asarray(lambda2) * np.asarray(sigma2))


def log_erfc_sqrt(r):
    """``log(erfc(sqrt(r)))`` without underflow for large ``r``."""
    r = np.asarray(r, dtype=np.float64)
    return np.log(special.erfcx(np.sqrt(r))) - r


def tau_logprior(tau, rate):
    """Elementwise log density of InvGamma(1/2, rate) truncated to (0, 1)."""
    tau = np.asarray(tau, dtype=np.float64)
    rate = np.asarray(rate, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return (0.5 * np.log(rate) - 0.5 * LOG_PI - 1.5 * np.log(tau) - rate / tau
                - log_erfc_sqrt(rate))


def beta_logprior_given_tau(beta, tau, sigma2, lambda2):
    """Per-row ``log N(beta_j | 0, sigma2_j / lambda2_j * diag(1 - tau_j))``."""
    scale = 1.0 - tau
    var = np.asarray(sigma2)[:, None] * scale / np.asarray(lambda2)[:, None]
    return -0.5 * (LOG_2PI + np.log(var) + beta ** 2 / var).sum(axis=1)


def sample_tau_prior(rate, rng) -> np.ndarray:
    """Draw from InvGamma(1/2, rate) truncated to (0, 1), elementwise.

    Works on ``g = 1/tau``, which is Gamma(1/2, rate) truncated to (1, inf).
    Small rates use the inverse CDF; large rates use exact rejection from a
    shifted exponential (acceptance ``g**-1/2`` >= 0.5 on average for
    rate >= 1).
    """
    rate = np.asarray(rate, dtype=np.float64)
    shape = rate.shape
    rate = rate.reshape(-1)
    g = np.empty_like(rate)
    small = rate < 1.0
    if np.any(small):
        rs = rate[small]
        q = rng.random(rs.shape[0]) * special.erfc(np.sqrt(rs))
        q = np.maximum(q, np.finfo(float).tiny)
        g[small] = special.gammainccinv(0.5, q) / rs
    big = np.flatnonzero(~small)
    while big.size:
        cand = 1.0 + rng.standard_exponential(big.size) / rate[big]
        ok = rng.random(big.size) < cand ** -0.5
        g[big[ok]] = cand[ok]
        big = big[~ok]
    tau = np.clip(1.0 / g, TAU_FLOOR, TAU_CEIL)
    return tau.reshape(shape)


# ---------------------------------------------------------------------------
# whole-model quantities
# ---------------------------------------------------------------------------

def observed_loglik(state: MixtureState, X, y) -> float:
    """Mixture log-likelihood with the allocations summed out."""
    with np.errstate(divide="ignore"):
        logpi = np.log(state.pi)
    lp = gaussian_loglik(X, y, state.beta, state.sigma2) + logpi[None, :]
    return float(special.logsumexp(lp, axis=1).sum())


def joint_logdensity(state: MixtureState, X, y, hp: Hyperparameters) -> float:
    """Log joint density of (state, y) given X, up to label-free constants.

    The Beta(1, alpha) prior on the stick fractions is left out because it
    is not exchangeable in the component labels; everything that remains is
    invariant under a consistent relabeling of the components.
    """
    n_idx = np.arange(y.shape[0])
    with np.errstate(divide="ignore"):
        logpi = np.log(state.pi)
        logw = np.log(state.w)
    ll = gaussian_loglik(X, y, state.beta, state.sigma2)[n_idx, state.z]
    total = float(ll.sum() + logpi[state.z].sum())
    # sigma2 ~ InvGamma(a, b)
    s2 = state.sigma2
    total += float(np.sum(hp.a * math.log(hp.b) - special.gammaln(hp.a)
                          - (hp.a + 1) * np.log(s2) - hp.b / s2))
    total += float((hp.e - 1) * math.log(state.alpha) - hp.f * state.alpha
                   + hp.e * math.log(hp.f) - special.gammaln(hp.e))
    if hp.prior == "flat":
        var = s2[:, None] * FLAT_PRIOR_VARIANCE
        total += float((-0.5 * (LOG_2PI + np.log(var) + state.beta ** 2 / var)).sum())
        return total
    l1 = state.lambda1[state.c]
    l2 = state.lambda2[state.c]
    total += float(beta_logprior_given_tau(state.beta, state.tau, s2, l2).sum())
    total += float(tau_logprior(state.tau, tau_rate(l1, l2, s2)[:, None]).sum())
    total += float(logw[state.c].sum())
    m = hp.dirichlet_mass
    total += float(special.gammaln(m * state.K) - state.K * special.gammaln(m)
                   + ((m - 1) * logw).sum())
    rate = hp.V / 2.0
    for lam, shape in ((state.lambda1, hp.R), (state.lambda2, hp.L)):
        total += float(np.sum(shape * math.log(rate) - special.gammaln(shape)
                              + (shape - 1) * np.log(lam) - rate * lam))
    return total


def sample_prior(hp: Hyperparameters, X, rng) -> tuple:
    """Forward-simulate (state, y) from the full generative model."""
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    J, K = hp.J, hp.K
    alpha = float(rng.gamma(hp.e, 1.0 / hp.f))
    u = np.clip(rng.beta(1.0, alpha, size=J - 1), 1e-300, 1.0 - 1e-12)
    pi = stick_breaking(u)
    w = rng.dirichlet(np.full(K, hp.dirichlet_mass))
    w = w / w.sum()
    c = rng.choice(K, size=J, p=w)
    lambda1 = rng.gamma(hp.R, 2.0 / hp.V, size=K)
    lambda2 = rng.gamma(hp.L, 2.0 / hp.V, size=K)
    sigma2 = hp.b / rng.gamma(hp.a, 1.0, size=J)
    if hp.prior == "flat":
        tau = np.full((J, p), 0.5)
        beta = rng.standard_normal((J, p)) * np.sqrt(sigma2 * FLAT_PRIOR_VARIANCE)[:, None]
    else:
        l1, l2 = lambda1[c], lambda2[c]
        tau = sample_tau_prior(np.broadcast_to(tau_rate(l1, l2, sigma2)[:, None], (J, p)), rng)
        sd = np.sqrt(sigma2[:, None] * (1.0 - tau) / l2[:, None])
        beta = rng.standard_normal((J, p)) * sd
    z = rng.choice(J, size=n, p=pi)
    y = (X * beta[z]).sum(axis=1) + rng.standard_normal(n) * np.sqrt(sigma2[z])
    state = MixtureState(u=u, pi=pi, alpha=alpha, beta=beta, sigma2=sigma2, z=z, w=w,
                         c=c, lambda1=lambda1, lambda2=lambda2, tau=tau)
    return state, y
