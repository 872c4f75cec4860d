"""Label-switching correction for stored mixture draws.

Iterative allocation matching: start from the allocation of the
highest-likelihood draw, find for every draw the component permutation that
agrees best with that reference, replace the reference by the draw-wise
majority allocation, and repeat until the permutations stop changing.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import inverse_stick_breaking
from .sampler import PosteriorChain

_PERMUTED = ("pi", "beta", "sigma2", "c", "tau")


@dataclass
class RelabeledChain:
    chain: PosteriorChain
    permutations: np.ndarray  # (S, J); permutations[s][old] = new
    reference_z: np.ndarray
    iterations_run: int


def agreement_matrix(z, ref, J: int) -> np.ndarray:
    """``M[j, m]`` = number of observations with ``z == j`` and ``ref == m``."""
    M = np.zeros((J, J), dtype=np.int64)
    np.add.at(M, (np.asarray(z), np.asarray(ref)), 1)
    return M


def _assignment_value(M, rows, cols) -> int:
    if len(rows) == 0:
        return 0
    sub = M[np.ix_(rows, cols)]
    r, c = linear_sum_assignment(sub, maximize=True)
    return int(sub[r, c].sum())


def best_permutation(M) -> np.ndarray:
    """Permutation maximizing total agreement; lexicographically smallest on ties."""
    M = np.asarray(M, dtype=np.int64)
    J = M.shape[0]
    r, c = linear_sum_assignment(M, maximize=True)
    perm = np.empty(J, dtype=np.int64)
    perm[r] = c
    target = int(M[r, c].sum())
    fixed_value = 0
    free_cols = list(range(J))
    for j in range(J):
        rest_rows = list(range(j + 1, J))
        for m in free_cols:
            if m >= perm[j]:
                break
            cols = [x for x in free_cols if x != m]
            if fixed_value + M[j, m] + _assignment_value(M, rest_rows, cols) == target:
                # the smaller column is also optimal: re-solve the tail around it
                perm[j] = m
                if rest_rows:
                    sub = M[np.ix_(rest_rows, cols)]
                    rr, cc = linear_sum_assignment(sub, maximize=True)
                    perm[np.array(rest_rows)[rr]] = np.array(cols)[cc]
                break
        fixed_value += int(M[j, perm[j]])
        free_cols.remove(int(perm[j]))
    return perm


def majority_allocation(z_draws, J: int) -> np.ndarray:
    S, n = z_draws.shape
    counts = np.zeros((n, J), dtype=np.int64)
    rows = np.arange(n)
    for s in range(S):
        np.add.at(counts, (rows, z_draws[s]), 1)
    return counts.argmax(axis=1)


def apply_permutations(samples: dict, perms) -> dict:
    """Relabel every component-indexed array of stacked draws."""
    out = {k: np.array(v, copy=True) for k, v in samples.items()}
    for s, perm in enumerate(perms):
        inv = np.argsort(perm)
        for k in _PERMUTED:
            out[k][s] = samples[k][s][inv]
        out["z"][s] = perm[samples["z"][s]]
        out["u"][s] = inverse_stick_breaking(out["pi"][s])
    return out


def relabel(chain: PosteriorChain, max_iter: int = 100) -> RelabeledChain:
    if len(chain) == 0:
        raise ValueError("cannot relabel an empty chain")
    z = chain.samples["z"]
    S = z.shape[0]
    J = chain.samples["pi"].shape[1]
    ref = z[int(np.argmax(chain.loglik))].copy()
    prev = np.tile(np.arange(J), (S, 1))
    it = 0
    for it in range(1, max_iter + 1):
        perms = np.array([best_permutation(agreement_matrix(z[s], ref, J)) for s in range(S)])
        if np.array_equal(perms, prev):
            break
        prev = perms
        ref = majority_allocation(np.take_along_axis(perms, z, axis=1), J)
    samples = apply_permutations(chain.samples, prev)
    new_chain = replace(chain, samples=samples, resume={})
    return RelabeledChain(chain=new_chain, permutations=prev,
                          reference_z=majority_allocation(samples["z"], J),
                          iterations_run=it)


def pool_chains(chains: list) -> PosteriorChain:
    """Concatenate draws of several chains fitted to the same data."""
    if len(chains) == 1:
        return chains[0]
    first = chains[0]
    samples = {k: np.concatenate([c.samples[k] for c in chains]) for k in first.samples}
    return replace(first, samples=samples,
                   loglik=np.concatenate([c.loglik for c in chains]),
                   accept_rates=np.mean([c.accept_rates for c in chains], axis=0),
                   resume={})
