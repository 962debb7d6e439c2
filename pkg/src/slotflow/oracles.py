"""Independent verification oracles (numpy, extended precision, no torch).

These deliberately re-derive results along a different route than the
production code: plain-domain iterative proportional fitting with explicit
scaling vectors, exhaustive permutation search, and literal two-division
renormalization. Used by tests and the sinkhorn-bench command.
"""

import itertools

import numpy as np


def entropic_ot_oracle(logits: np.ndarray, n_iters: int) -> np.ndarray:
    """Plain-domain IPF on a single (S, L) logit matrix, uniform marginals.

    Mirrors the u-then-v update order of the production path; runs in
    np.longdouble.
    """
    K = np.exp(np.asarray(logits, dtype=np.longdouble))
    S, L = K.shape
    a = np.full(S, 1.0 / S, dtype=np.longdouble)
    b = np.full(L, 1.0 / L, dtype=np.longdouble)
    u = np.ones(S, dtype=np.longdouble)
    v = np.ones(L, dtype=np.longdouble)
    for _ in range(n_iters):
        u = a / (K @ v)
        v = b / (K.T @ u)
    return u[:, None] * K * v[None, :]


def assignment_oracle(cost: np.ndarray):
    """Exhaustive minimum-cost assignment; returns (permutation, total cost).

    permutation[i] is the column assigned to row i. Only for S <= 6.
    """
    cost = np.asarray(cost)
    S = cost.shape[0]
    if cost.shape != (S, S) or S > 6:
        raise ValueError("assignment_oracle needs a square cost matrix with S <= 6")
    best, best_total = None, np.inf
    for perm in itertools.permutations(range(S)):
        total = sum(cost[i, perm[i]] for i in range(S))
        if total < best_total:
            best, best_total = perm, total
    return np.array(best), float(best_total)


def assignment_margin(cost: np.ndarray) -> float:
    """Gap between the best and second-best total assignment cost."""
    S = cost.shape[0]
    totals = sorted(sum(cost[i, perm[i]] for i in range(S))
                    for perm in itertools.permutations(range(S)))
    return float(totals[1] - totals[0])


def min_entry_margin(cost: np.ndarray) -> float:
    """Smallest per-entry excess cost of any alternative assignment.

    For each non-optimal permutation, divide its excess total cost by the
    number of positions where it differs from the optimum. The minimum of
    that ratio controls how much mass entropic OT leaks onto off-optimal
    entries: a k-cycle of excess D leaks roughly exp(-D / (k * tau)).
    """
    cost = np.asarray(cost)
    S = cost.shape[0]
    best_perm, best_total = assignment_oracle(cost)
    margin = np.inf
    for perm in itertools.permutations(range(S)):
        differ = sum(perm[i] != best_perm[i] for i in range(S))
        if differ == 0:
            continue
        excess = sum(cost[i, perm[i]] for i in range(S)) - best_total
        margin = min(margin, excess / differ)
    return float(margin)


def assignment_limit_gap(score: np.ndarray, tau: float, n_iters: int = 5000) -> float:
    """How far the entropic optimum at temperature tau sits from the assignment.

    Runs the extended-precision IPF oracle on score/tau and returns
    max |S * P - target| where target is the hard permutation matrix.
    Used to select instances whose low-temperature limit is genuinely sharp.
    """
    score = np.asarray(score)
    S = score.shape[0]
    perm, _ = assignment_oracle(-score)
    target = np.zeros((S, S))
    target[np.arange(S), perm] = 1.0
    P = entropic_ot_oracle(score / tau, n_iters).astype(float)
    return float(np.abs(S * P - target).max())


def renormalize_oracle(P: np.ndarray, eps: float) -> np.ndarray:
    """Row-then-column division in extended precision."""
    P = np.asarray(P, dtype=np.longdouble)
    P = P / (P.sum(axis=-1, keepdims=True) + np.longdouble(eps))
    P = P / (P.sum(axis=-2, keepdims=True) + np.longdouble(eps))
    return P
