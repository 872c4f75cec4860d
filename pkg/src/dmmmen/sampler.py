"""Gibbs / Metropolis-Hastings sampler for the elastic-net regression mixture.

One sweep updates, in order::

    z -> (u, pi, alpha) -> c -> w -> tau -> (lambda1, lambda2) -> beta -> sigma2

``c`` is drawn with ``tau`` integrated out (against the closed-form
elastic-net density), so ``tau`` has to be refreshed before anything that
conditions on it; that is why it comes straight after ``w``.

Conditionals for ``beta``, ``tau`` and ``sigma2`` were derived by hand from
the likelihood and the scale-mixture prior:

* ``beta_j``   ~ N(A^-1 X'y, sigma2_j A^-1), A = X'X + lambda2 diag(1/(1-tau_j))
* ``tau_jl``   = w / (1 + w) with w ~ InverseGaussian(mean lambda1 / (2 lambda2 |beta_jl|),
  shape lambda1**2 / (4 lambda2 sigma2_j))
* ``sigma2_j`` ~ InvGamma(a + n_j/2 + p, scale) tilted by erfc(sqrt(rate))**-p,
  handled by an independence Metropolis step with the inverse-gamma part as
  proposal.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.cluster.vq import kmeans2

from . import model
from .data import DatasetMatrix
from .errors import DMMError, InvalidConfig, LinearAlgebraError, NumericalError
from .model import (FLAT_PRIOR_VARIANCE, TAU_CEIL, TAU_FLOOR, Hyperparameters,
                    MixtureState)

log = logging.getLogger(__name__)

TARGET_ACCEPT = 0.3
INITIAL_LOG_STEP = math.log(0.25)
_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
_STATE_FIELDS = ("u", "pi", "alpha", "beta", "sigma2", "z", "w", "c",
                 "lambda1", "lambda2", "tau")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def design_matrix(X, intercept: bool) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if intercept:
        return np.column_stack([X, np.ones(X.shape[0])])
    return X


def categorical_from_logits(logp, rng) -> np.ndarray:
    """One categorical draw per row of unnormalized log-probabilities."""
    m = logp.max(axis=1, keepdims=True)
    if np.any(~np.isfinite(m)):
        raise NumericalError("every category has zero probability")
    prob = np.exp(logp - m)
    cum = np.cumsum(prob, axis=1)
    u = rng.random(logp.shape[0])[:, None] * cum[:, -1:]
    return np.minimum((cum < u).sum(axis=1), logp.shape[1] - 1)


def inverse_gaussian(inv_mean, shape, rng) -> np.ndarray:
    """Inverse-Gaussian draws parameterized by ``1/mean`` (zero allowed).

    Uses the Michael-Schucany-Haas transformation written so that a zero
    inverse mean (the Levy limit) stays finite.
    """
    m = np.asarray(inv_mean, dtype=np.float64)
    lam = np.asarray(shape, dtype=np.float64)
    m, lam = np.broadcast_arrays(m, lam)
    nu = rng.standard_normal(m.shape) ** 2
    h = nu / (2.0 * lam)
    x = 1.0 / (m + h + np.sqrt(h * h + nu * m / lam))
    flip = rng.random(m.shape) * (1.0 + m * x) > 1.0
    with np.errstate(divide="ignore"):
        x = np.where(flip, 1.0 / (m * m * x), x)
    return x


def _cholesky(A):
    scale = max(1.0, float(np.max(np.abs(np.diag(A)))))
    for jit in _JITTERS:
        try:
            M = A if jit == 0.0 else A + (jit * scale) * np.eye(A.shape[0])
            return linalg.cholesky(M, lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
    raise LinearAlgebraError("coefficient precision matrix is not positive definite")


@dataclass
class ComponentStats:
    """Per-component sufficient statistics for the current allocation."""

    counts: np.ndarray  # (J,)
    XtX: np.ndarray     # (J, p, p)
    Xty: np.ndarray     # (J, p)
    yty: np.ndarray     # (J,)

    @classmethod
    def compute(cls, X, y, z, J):
        p = X.shape[1]
        counts = np.bincount(z, minlength=J)
        XtX = np.zeros((J, p, p))
        Xty = np.zeros((J, p))
        yty = np.zeros(J)
        order = np.argsort(z, kind="stable")
        bounds = np.concatenate(([0], np.cumsum(counts)))
        for j in np.flatnonzero(counts):
            rows = order[bounds[j]:bounds[j + 1]]
            Xj, yj = X[rows], y[rows]
            XtX[j] = Xj.T @ Xj
            Xty[j] = Xj.T @ yj
            yty[j] = yj @ yj
        return cls(counts, XtX, Xty, yty)

    def rss(self, beta) -> np.ndarray:
        quad = np.einsum("jp,jpq,jq->j", beta, self.XtX, beta)
        r = self.yty - 2.0 * np.einsum("jp,jp->j", beta, self.Xty) + quad
        return np.maximum(r, 0.0)


# ---------------------------------------------------------------------------
# block updates
# ---------------------------------------------------------------------------

def z_logits(state: MixtureState, X, y) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logpi = np.log(state.pi)
    return model.gaussian_loglik(X, y, state.beta, state.sigma2) + logpi[None, :]


def sample_z(state: MixtureState, X, y, rng) -> np.ndarray:
    return categorical_from_logits(z_logits(state, X, y), rng)


def sample_sticks_alpha(state: MixtureState, hp: Hyperparameters, rng):
    """Conjugate stick fractions given counts, then alpha given the sticks."""
    J = state.J
    counts = np.bincount(state.z, minlength=J).astype(np.float64)
    tail = np.cumsum(counts[::-1])[::-1]  # tail[j] = sum_{l >= j} n_l
    after = tail[1:]                        # sum_{l > j} n_l for j < J-1
    u = rng.beta(1.0 + counts[:-1], state.alpha + after) if J > 1 else np.empty(0)
    u = np.clip(u, 1e-300, 1.0 - 1e-12)
    pi = model.stick_breaking(u)
    rate = hp.f - np.log1p(-u).sum()
    if not np.isfinite(rate):
        raise NumericalError("stick remainder underflowed")
    alpha = float(rng.gamma(hp.e + J - 1, 1.0 / rate))
    alpha = max(alpha, 1e-300)
    return u, pi, alpha


def c_logits(state: MixtureState) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logw = np.log(state.w)
    cols = [model.orthant_logdensity_rows(state.beta, state.lambda1[k], state.lambda2[k],
                                          state.sigma2) for k in range(state.K)]
    return np.column_stack(cols) + logw[None, :]


def sample_c(state: MixtureState, rng) -> np.ndarray:
    if state.K == 1:
        return np.zeros(state.J, dtype=np.int64)
    return categorical_from_logits(c_logits(state), rng)


def sample_w(state: MixtureState, hp: Hyperparameters, rng) -> np.ndarray:
    K = state.K
    if K == 1:
        return np.ones(1)
    m = np.bincount(state.c, minlength=K)
    w = rng.dirichlet(hp.dirichlet_mass + m)
    return w / w.sum()


def tau_conditional_params(beta, sigma2, lambda1, lambda2):
    """(inverse mean, shape) of the inverse-Gaussian draw behind each tau."""
    inv_mean = 2.0 * lambda2 * np.abs(beta) / lambda1
    shape = lambda1 ** 2 / (4.0 * lambda2 * sigma2)
    return inv_mean, shape


def sample_tau(state: MixtureState, rng, retries: int = 3) -> np.ndarray:
    l1 = state.lambda1[state.c][:, None]
    l2 = state.lambda2[state.c][:, None]
    s2 = state.sigma2[:, None]
    inv_mean, shape = tau_conditional_params(state.beta, s2, l1, l2)
    inv_mean, shape = np.broadcast_arrays(inv_mean, shape)
    w = inverse_gaussian(inv_mean, shape, rng)
    for _ in range(retries):
        bad = ~(np.isfinite(w) & (w > 0))
        if not bad.any():
            break
        w[bad] = inverse_gaussian(inv_mean[bad], shape[bad], rng)
    else:
        if np.any(~(np.isfinite(w) & (w > 0))):
            raise NumericalError("latent scale draw failed")
    tau = w / (1.0 + w)
    return np.clip(tau, TAU_FLOOR, TAU_CEIL)


def lambda_logtarget(l1, l2, beta, tau, sigma2, hp: Hyperparameters) -> float:
    """Log posterior of one (lambda1, lambda2) pair on the log scale.

    ``beta``/``tau``/``sigma2`` hold the components currently assigned to
    this elastic net (possibly none). Includes the log-scale Jacobian.
    """
    rate = hp.V / 2.0
    lp = hp.R * math.log(l1) - rate * l1 + hp.L * math.log(l2) - rate * l2
    if beta.shape[0] == 0:
        return lp
    s2 = sigma2[:, None]
    scale = 1.0 - tau
    lp += 0.5 * beta.size * math.log(l2) - l2 * float(np.sum(beta ** 2 / (2.0 * s2 * scale)))
    r = l1 * l1 / (8.0 * l2 * sigma2)
    per_comp = 0.5 * np.log(r) - model.log_erfc_sqrt(r)
    lp += beta.shape[1] * float(per_comp.sum()) - float(np.sum(r[:, None] / tau))
    return lp


def sample_lambdas(state: MixtureState, hp: Hyperparameters, rng, log_steps):
    """Random-walk MH on (log lambda1_k, log lambda2_k), one coordinate at a time.

    Returns new arrays and a (K, 2) boolean acceptance matrix.
    """
    K = state.K
    l1 = state.lambda1.copy()
    l2 = state.lambda2.copy()
    accepted = np.zeros((K, 2), dtype=bool)
    for k in range(K):
        members = state.c == k
        b, t, s2 = state.beta[members], state.tau[members], state.sigma2[members]
        cur = lambda_logtarget(l1[k], l2[k], b, t, s2, hp)
        for i in range(2):
            prop1, prop2 = l1[k], l2[k]
            step = math.exp(log_steps[k, i]) * rng.standard_normal()
            if i == 0:
                prop1 = l1[k] * math.exp(step)
            else:
                prop2 = l2[k] * math.exp(step)
            if not (0 < prop1 < np.inf and 0 < prop2 < np.inf):
                rng.random()
                continue
            new = lambda_logtarget(prop1, prop2, b, t, s2, hp)
            if math.log(rng.random()) < new - cur:
                l1[k], l2[k], cur = prop1, prop2, new
                accepted[k, i] = True
    return l1, l2, accepted


def beta_prior_precision(state: MixtureState, hp: Hyperparameters) -> np.ndarray:
    """Diagonal prior precision (times sigma2) of every coefficient, (J, p)."""
    if hp.prior == "flat":
        return np.full(state.beta.shape, 1.0 / FLAT_PRIOR_VARIANCE)
    l2 = state.lambda2[state.c][:, None]
    return l2 / (1.0 - state.tau)


def sample_beta(state: MixtureState, stats: ComponentStats, hp: Hyperparameters,
                rng) -> np.ndarray:
    J, p = state.beta.shape
    prec = beta_prior_precision(state, hp)
    beta = np.empty((J, p))
    eps = rng.standard_normal((J, p))
    for j in range(J):
        A = stats.XtX[j].copy()
        A[np.diag_indices(p)] += prec[j]
        Lc = _cholesky(A)
        mean = linalg.cho_solve((Lc, True), stats.Xty[j], check_finite=False)
        noise = linalg.solve_triangular(Lc.T, eps[j], lower=False, check_finite=False)
        beta[j] = mean + math.sqrt(state.sigma2[j]) * noise
    return beta


def sigma2_conditional_params(n_j, rss, prior_quad, inv_tau_sum, p, l1, l2,
                              hp: Hyperparameters):
    """(shape, scale) of the inverse-gamma part of the sigma2 conditional.

    ``prior_quad`` is ``beta' Lambda beta`` with ``Lambda`` the prior
    precision (times sigma2). For the elastic net the truncated inverse-gamma
    prior on tau contributes ``p/2`` to the shape and ``lambda1**2/(8 lambda2)
    * sum(1/tau)`` to the scale; with ``lambda1 == 0`` that coupling is off.
    """
    shape = hp.a + 0.5 * n_j + 0.5 * p
    scale = hp.b + 0.5 * rss + 0.5 * prior_quad
    coupled = np.asarray(l1) > 0
    shape = shape + np.where(coupled, 0.5 * p, 0.0)
    scale = scale + np.where(coupled, l1 ** 2 / (8.0 * l2) * inv_tau_sum, 0.0)
    return shape, scale


def sigma2_log_tilt(sigma2, p, l1, l2):
    """Non-conjugate factor ``erfc(sqrt(rate))**-p`` of the sigma2 conditional."""
    l1 = np.asarray(l1, dtype=np.float64)
    r = model.tau_rate(l1, l2, sigma2)
    return np.where(l1 > 0, -p * model.log_erfc_sqrt(r), 0.0)


def sample_sigma2(state: MixtureState, stats: ComponentStats, hp: Hyperparameters, rng):
    """Independence MH step per component; returns (sigma2, accepted mask)."""
    J, p = state.beta.shape
    prec = beta_prior_precision(state, hp)
    prior_quad = np.sum(prec * state.beta ** 2, axis=1)
    rss = stats.rss(state.beta)
    if hp.prior == "flat":
        l1 = np.zeros(J)
        l2 = np.ones(J)
        inv_tau_sum = np.zeros(J)
    else:
        l1 = state.lambda1[state.c]
        l2 = state.lambda2[state.c]
        inv_tau_sum = np.sum(1.0 / state.tau, axis=1)
    shape, scale = sigma2_conditional_params(stats.counts, rss, prior_quad, inv_tau_sum, p,
                                             l1, l2, hp)
    prop = scale / rng.gamma(shape, 1.0, size=J)
    cur = state.sigma2
    log_ratio = sigma2_log_tilt(prop, p, l1, l2) - sigma2_log_tilt(cur, p, l1, l2)
    with np.errstate(divide="ignore"):
        accept = np.log(rng.random(J)) < log_ratio
    accept &= np.isfinite(prop) & (prop > 0)
    out = np.where(accept, prop, cur)
    if np.any(~(np.isfinite(out) & (out > 0))):
        raise NumericalError("variance draw is not a positive finite number")
    return out, accept


# ---------------------------------------------------------------------------
# chain
# ---------------------------------------------------------------------------

def initial_state(X, y, hp: Hyperparameters, rng, raw_X=None) -> MixtureState:
    """k-means start on the joint (x, y) vectors followed by per-cluster ridge fits."""
    n, p = X.shape
    J, K = hp.J, hp.K
    joint = np.column_stack([X if raw_X is None else raw_X, y])
    if n > J:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                _, z = kmeans2(joint, J, minit="++", seed=rng)
            except Exception:  # degenerate data: fall back to random labels
                z = rng.integers(0, J, size=n)
    else:
        z = rng.integers(0, J, size=n)
    z = np.asarray(z, dtype=np.int64)
    stats = ComponentStats.compute(X, y, z, J)
    beta = np.zeros((J, p))
    sigma2 = np.full(J, max(float(np.var(y)), 1e-8))
    for j in np.flatnonzero(stats.counts):
        A = stats.XtX[j] + 1e-3 * np.eye(p)
        beta[j] = linalg.solve(A, stats.Xty[j], assume_a="pos")
    rss = stats.rss(beta)
    has = stats.counts > 0
    sigma2[has] = np.maximum(rss[has] / stats.counts[has], 1e-8)
    pi0 = (stats.counts + 1.0) / (n + J)
    u = model.inverse_stick_breaking(pi0)
    state = MixtureState(
        u=u, pi=model.stick_breaking(u), alpha=1.0, beta=beta, sigma2=sigma2, z=z,
        w=np.full(K, 1.0 / K), c=rng.integers(0, K, size=J),
        lambda1=np.ones(K), lambda2=np.ones(K), tau=np.full((J, p), 0.5))
    return state


class GibbsSampler:
    """Holds the data, current state, RNG and MH step sizes of one chain."""

    def __init__(self, X, y, hp: Hyperparameters, rng, state: Optional[MixtureState] = None,
                 raw_X=None):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.hp = hp
        self.rng = rng
        self.state = state if state is not None else initial_state(self.X, self.y, hp, rng,
                                                                   raw_X=raw_X)
        self.log_steps = np.full((hp.K, 2), INITIAL_LOG_STEP)
        self.sweeps_done = 0
        self.lambda_accepts = np.zeros((hp.K, 2))
        self.lambda_trials = 0
        self.sigma2_accepts = 0.0
        self.sigma2_trials = 0

    def sweep(self, adapt: bool = False, record: bool = True) -> None:
        s, hp, rng = self.state, self.hp, self.rng
        s.z = sample_z(s, self.X, self.y, rng)
        s.u, s.pi, s.alpha = sample_sticks_alpha(s, hp, rng)
        if hp.prior != "flat":
            s.c = sample_c(s, rng)
            s.w = sample_w(s, hp, rng)
            s.tau = sample_tau(s, rng)
            s.lambda1, s.lambda2, acc = sample_lambdas(s, hp, rng, self.log_steps)
            if adapt:
                gain = 1.0 / (self.sweeps_done + 1.0) ** 0.6
                self.log_steps += gain * (acc - TARGET_ACCEPT)
            elif record:
                self.lambda_accepts += acc
                self.lambda_trials += 1
        stats = ComponentStats.compute(self.X, self.y, s.z, hp.J)
        s.beta = sample_beta(s, stats, hp, rng)
        s.sigma2, acc_s = sample_sigma2(s, stats, hp, rng)
        if record and not adapt:
            self.sigma2_accepts += float(acc_s.mean())
            self.sigma2_trials += 1
        self.sweeps_done += 1

    def checked_sweep(self, adapt: bool = False) -> None:
        try:
            self.sweep(adapt=adapt)
        except DMMError as exc:
            raise type(exc)(f"sweep {self.sweeps_done}: {exc}") from exc

    def accept_rates(self) -> np.ndarray:
        if self.lambda_trials == 0:
            return np.zeros((self.hp.K, 2))
        return self.lambda_accepts / self.lambda_trials


@dataclass
class PosteriorChain:
    """Thinned post-burn-in draws of one chain plus what is needed to resume it.

    ``samples`` maps each ``MixtureState`` field to an array stacked along a
    leading draw axis.
    """

    hp: Hyperparameters
    seed: int
    samples: dict
    loglik: np.ndarray
    accept_rates: np.ndarray            # (K, 2) lambda MH acceptance
    sigma2_accept_rate: float = 0.0
    chain_index: int = 0
    resume: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.loglik.shape[0])

    def draw(self, i: int) -> MixtureState:
        return MixtureState(**{k: (np.array(self.samples[k][i]) if k != "alpha"
                                   else float(self.samples[k][i])) for k in _STATE_FIELDS})

    @property
    def draws(self) -> list:
        return [self.draw(i) for i in range(len(self))]

    @property
    def n_features(self) -> int:
        p = self.samples["beta"].shape[-1]
        return p - 1 if self.hp.intercept else p


def chain_rng(seed: int, chain_index: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(chain_index),))
    return np.random.Generator(np.random.PCG64(ss))


def _stack_draws(states: list) -> dict:
    out = {}
    for k in _STATE_FIELDS:
        vals = [getattr(s, k) for s in states]
        out[k] = np.array(vals, dtype=np.int64 if k in ("z", "c") else np.float64)
    return out


def _collect(sampler: GibbsSampler, n_draws: int, thin: int, progress=None):
    states, ll = [], []
    for i in range(n_draws):
        for _ in range(thin):
            sampler.checked_sweep(adapt=False)
        st = sampler.state.copy()
        st.check()
        value = model.observed_loglik(st, sampler.X, sampler.y)
        if not np.isfinite(value):
            raise NumericalError(f"sweep {sampler.sweeps_done}: non-finite log-likelihood")
        states.append(st)
        ll.append(value)
        if progress is not None:
            progress(i + 1, n_draws)
    return states, np.array(ll)


def _resume_info(sampler: GibbsSampler) -> dict:
    return {
        "state": sampler.state.copy(),
        "rng_state": sampler.rng.bit_generator.state,
        "log_steps": sampler.log_steps.copy(),
        "sweeps_done": sampler.sweeps_done,
        "lambda_accepts": sampler.lambda_accepts.copy(),
        "lambda_trials": sampler.lambda_trials,
        "sigma2_accepts": sampler.sigma2_accepts,
        "sigma2_trials": sampler.sigma2_trials,
    }


def run_chain(data: DatasetMatrix, hp: Hyperparameters, chain_index: int = 0,
              progress=None) -> PosteriorChain:
    """Initialize, burn in (adapting MH steps), then store thinned draws."""
    if hp.n_samples < 1:
        raise InvalidConfig("n_samples must be >= 1")
    X = design_matrix(data.X, hp.intercept)
    rng = chain_rng(hp.seed, chain_index)
    sampler = GibbsSampler(X, data.y, hp, rng, raw_X=data.X)
    for _ in range(hp.burn_in):
        sampler.checked_sweep(adapt=True)
    log.debug("chain %d: burn-in done, log steps %s", chain_index, sampler.log_steps)
    states, ll = _collect(sampler, hp.n_samples, hp.thin, progress)
    return PosteriorChain(hp=hp, seed=hp.seed, samples=_stack_draws(states), loglik=ll,
                          accept_rates=sampler.accept_rates(),
                          sigma2_accept_rate=sampler.sigma2_accepts / max(sampler.sigma2_trials, 1),
                          chain_index=chain_index, resume=_resume_info(sampler))


def continue_chain(chain: PosteriorChain, data: DatasetMatrix, n_more: int,
                   progress=None) -> PosteriorChain:
    """Append ``n_more`` thinned draws, continuing exactly where ``chain`` stopped."""
    if n_more < 1:
        raise InvalidConfig("n_more must be >= 1")
    info = chain.resume
    if not info:
        raise InvalidConfig("chain carries no resume information")
    hp = chain.hp
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = info["rng_state"]
    X = design_matrix(data.X, hp.intercept)
    sampler = GibbsSampler(X, data.y, hp, rng, state=info["state"].copy())
    sampler.log_steps = np.array(info["log_steps"], dtype=np.float64)
    sampler.sweeps_done = int(info["sweeps_done"])
    sampler.lambda_accepts = np.array(info["lambda_accepts"], dtype=np.float64)
    sampler.lambda_trials = int(info["lambda_trials"])
    sampler.sigma2_accepts = float(info["sigma2_accepts"])
    sampler.sigma2_trials = int(info["sigma2_trials"])
    states, ll = _collect(sampler, n_more, hp.thin, progress)
    new = _stack_draws(states)
    samples = {k: np.concatenate([chain.samples[k], new[k]]) for k in _STATE_FIELDS}
    hp_total = hp.with_overrides(n_samples=len(chain) + n_more)
    return PosteriorChain(hp=hp_total, seed=chain.seed, samples=samples,
                          loglik=np.concatenate([chain.loglik, ll]),
                          accept_rates=sampler.accept_rates(),
                          sigma2_accept_rate=sampler.sigma2_accepts / max(sampler.sigma2_trials, 1),
                          chain_index=chain.chain_index, resume=_resume_info(sampler))


def _run_one(args):
    data, hp, idx = args
    return run_chain(data, hp, chain_index=idx)


def run_chains(data: DatasetMatrix, hp: Hyperparameters, n_chains: int = 1,
               workers: Optional[int] = None) -> list:
    """Independent chains with seeds spawned from ``hp.seed``; parallel when asked."""
    if n_chains < 1:
        raise InvalidConfig("need at least one chain")
    jobs = [(data, hp, i) for i in range(n_chains)]
    if n_chains == 1 or workers == 1:
        return [_run_one(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))
