"""Test-only builders and independent oracle densities."""

import itertools

import numpy as np
from scipy import integrate, special, stats

from dmmmen.model import Hyperparameters, MixtureState, inverse_stick_breaking
from dmmmen.relabel import RelabeledChain
from dmmmen.sampler import PosteriorChain


def fake_chain(pi, beta, sigma2, n_draws=3, intercept=False, z=None):
    """A chain whose every draw carries the same (pi, beta, sigma2)."""
    pi = np.asarray(pi, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    J, p = beta.shape
    z = np.zeros(4, dtype=np.int64) if z is None else np.asarray(z)
    st = dict(u=inverse_stick_breaking(pi), pi=pi, alpha=1.0, beta=beta, sigma2=sigma2, z=z,
              w=np.ones(1), c=np.zeros(J, dtype=np.int64), lambda1=np.ones(1),
              lambda2=np.ones(1), tau=np.full((J, p), 0.5))
    samples = {k: np.repeat(np.asarray(v)[None], n_draws, axis=0) for k, v in st.items()}
    hp = Hyperparameters(J=J, K=1, intercept=intercept)
    chain = PosteriorChain(hp=hp, seed=0, samples=samples, loglik=np.zeros(n_draws),
                           accept_rates=np.zeros((1, 2)))
    return RelabeledChain(chain=chain, permutations=np.tile(np.arange(J), (n_draws, 1)),
                          reference_z=z, iterations_run=1)


def permute_state(st: MixtureState, perm) -> MixtureState:
    """Relabel components: old label j becomes perm[j]."""
    inv = np.argsort(perm)
    pi = st.pi[inv]
    return MixtureState(u=inverse_stick_breaking(pi), pi=pi, alpha=st.alpha, beta=st.beta[inv],
                        sigma2=st.sigma2[inv], z=np.asarray(perm)[st.z], w=st.w, c=st.c[inv],
                        lambda1=st.lambda1, lambda2=st.lambda2, tau=st.tau[inv])


# ---------------------------------------------------------------------------
# oracle densities written from the generative model with scipy.stats
# ---------------------------------------------------------------------------

def tau_prior_logpdf(tau, rate):
    """InvGamma(1/2, rate) truncated to (0, 1)."""
    # P(tau < 1) = Q(1/2, rate) = erfc(sqrt(rate)); erfcx keeps large rates finite
    rate = np.asarray(rate, dtype=np.float64)
    log_mass = np.log(special.erfcx(np.sqrt(rate))) - rate
    return stats.invgamma.logpdf(tau, 0.5, scale=rate) - log_mass


def orthant_oracle(beta, l1, l2, s2):
    """The elastic-net density as a mixture over tau, by quadrature."""
    rate = l1 ** 2 / (8 * l2 * s2)

    def integrand(t):
        return (stats.norm.pdf(beta, 0, np.sqrt(s2 * (1 - t) / l2))
                * np.exp(tau_prior_logpdf(t, rate)))
    # split near 0 where the inverse-gamma mass piles up, and near 1 where the
    # normal factor spikes over a width of about l2 * beta^2 / s2
    u = l2 * beta ** 2 / s2
    knots = [1 - k * u for k in (1e2, 1.0, 1e-2) if 0.5 < 1 - k * u < 1]
    edges = [0.0, 1e-3, 0.5, *knots, 1.0]
    return sum(integrate.quad(integrand, lo, hi, limit=400, epsabs=1e-13)[0]
               for lo, hi in zip(edges[:-1], edges[1:]))


def grid_cdf(logdens, grid):
    """Normalized CDF of an unnormalized log density tabulated on ``grid``."""
    ld = logdens(grid)
    d = np.exp(ld - ld.max())
    cdf = integrate.cumulative_trapezoid(d, grid, initial=0.0)
    return cdf / cdf[-1]


def ks_against_grid(draws, grid, cdf):
    """Kolmogorov-Smirnov distance between draws and a tabulated CDF."""
    x = np.sort(np.asarray(draws))
    F = np.interp(x, grid, cdf)
    n = x.size
    hi = np.arange(1, n + 1) / n - F
    lo = F - np.arange(0, n) / n
    return float(max(hi.max(), lo.max()))


# ---------------------------------------------------------------------------
# one-dimensional full conditionals against quadrature
# ---------------------------------------------------------------------------

COND = dict(l1=1.3, l2=0.7, s2=0.5, beta=0.4, tau=0.3, a=2.0, b=1.0)


def _cond_data():
    rng = np.random.default_rng(11)
    X = rng.standard_normal((8, 1))
    y = 0.6 * X[:, 0] + 0.7 * rng.standard_normal(8)
    return X, y


def _replicated_state(N):
    c = COND
    return MixtureState(u=np.full(N - 1, 0.5), pi=np.full(N, 1.0 / N), alpha=1.0,
                        beta=np.full((N, 1), c["beta"]), sigma2=np.full(N, c["s2"]),
                        z=np.zeros(1, dtype=np.int64), w=np.ones(1),
                        c=np.zeros(N, dtype=np.int64), lambda1=np.array([c["l1"]]),
                        lambda2=np.array([c["l2"]]), tau=np.full((N, 1), c["tau"]))


def _replicated_stats(N, X, y):
    from dmmmen.sampler import ComponentStats
    n = X.shape[0]
    return ComponentStats(counts=np.full(N, n), XtX=np.broadcast_to(X.T @ X, (N, 1, 1)),
                          Xty=np.broadcast_to(X.T @ y, (N, 1)), yty=np.full(N, y @ y))


def ks_beta_conditional(N, seed=0):
    from dmmmen.sampler import sample_beta
    c = COND
    X, y = _cond_data()
    hp = Hyperparameters(J=N, K=1, a=c["a"], b=c["b"])
    draws = sample_beta(_replicated_state(N), _replicated_stats(N, X, y), hp,
                        np.random.default_rng(seed))[:, 0]

    def logdens(b):
        mu = X[:, 0][None, :] * b[:, None]
        return (stats.norm.logpdf(y[None, :], mu, np.sqrt(c["s2"])).sum(axis=1)
                + stats.norm.logpdf(b, 0, np.sqrt(c["s2"] * (1 - c["tau"]) / c["l2"])))
    grid = np.linspace(-4, 4, 40001)
    return ks_against_grid(draws, grid, grid_cdf(logdens, grid))


def ks_tau_conditional(N, seed=0):
    from dmmmen.sampler import sample_tau
    c = COND
    draws = sample_tau(_replicated_state(N), np.random.default_rng(seed))[:, 0]
    rate = c["l1"] ** 2 / (8 * c["l2"] * c["s2"])

    def logdens(t):
        return (stats.norm.logpdf(c["beta"], 0, np.sqrt(c["s2"] * (1 - t) / c["l2"]))
                + tau_prior_logpdf(t, rate))
    grid = np.concatenate([np.geomspace(1e-9, 1e-3, 4000, endpoint=False),
                           np.linspace(1e-3, 1 - 1e-9, 40000)])
    return ks_against_grid(draws, grid, grid_cdf(logdens, grid))


def ks_sigma2_conditional(N, seed=0, steps=30):
    """Parallel independence-MH chains, each run ``steps`` updates from a fixed start."""
    from dmmmen.sampler import sample_sigma2
    c = COND
    X, y = _cond_data()
    hp = Hyperparameters(J=N, K=1, a=c["a"], b=c["b"])
    st = _replicated_state(N)
    stats_ = _replicated_stats(N, X, y)
    rng = np.random.default_rng(seed)
    st.sigma2 = np.full(N, 3.0)
    for _ in range(steps):
        st.sigma2, _ = sample_sigma2(st, stats_, hp, rng)
    l1, l2, b, t = c["l1"], c["l2"], c["beta"], c["tau"]

    def logdens(s):
        s = np.asarray(s)
        resid = y - X[:, 0] * b
        return (stats.norm.logpdf(resid[None, :], 0, np.sqrt(s)[:, None]).sum(axis=1)
                + stats.norm.logpdf(b, 0, np.sqrt(s * (1 - t) / l2))
                + tau_prior_logpdf(t, l1 ** 2 / (8 * l2 * s))
                + stats.invgamma.logpdf(s, c["a"], scale=c["b"]))
    grid = np.concatenate([np.geomspace(1e-4, 0.05, 2000, endpoint=False),
                           np.linspace(0.05, 30, 60000)])
    return ks_against_grid(st.sigma2, grid, grid_cdf(logdens, grid))


def brute_force_permutation(M):
    """Lexicographically smallest permutation with maximal agreement."""
    J = M.shape[0]
    best, best_val = None, None
    for perm in itertools.permutations(range(J)):  # lexicographic order
        val = sum(M[j, perm[j]] for j in range(J))
        if best_val is None or val > best_val:
            best, best_val = perm, val
    return np.array(best)


def brute_force_relabel(z, loglik, J, max_iter=100):
    """Reference implementation of the iterative relabeling with exhaustive search."""
    S, n = z.shape
    ref = z[int(np.argmax(loglik))]
    prev = [tuple(range(J))] * S
    for _ in range(max_iter):
        perms = []
        for s in range(S):
            M = np.zeros((J, J), dtype=int)
            for i in range(n):
                M[z[s, i], ref[i]] += 1
            perms.append(tuple(brute_force_permutation(M)))
        if perms == prev:
            break
        prev = perms
        mapped = np.array([[perms[s][z[s, i]] for i in range(n)] for s in range(S)])
        ref = np.array([np.bincount(mapped[:, i], minlength=J).argmax() for i in range(n)])
    return np.array(prev)
