"""Brute-force references for the exactly-k distribution.

Enumeration is exponential in ``m``; intended for ``m <= 12``.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.stats import chisquare

from . import exactk
from .rng import stream


def support(m: int, k: int) -> list[tuple[int, ...]]:
    return list(itertools.combinations(range(m), k))


def enumerate_log_partition(logits, k: int) -> float:
    th = np.clip(np.asarray(logits, dtype=np.float64), -exactk.LOGIT_CLAMP, exactk.LOGIT_CLAMP)
    scores = np.array([th[list(s)].sum() for s in support(len(th), k)])
    top = scores.max()
    return float(top + math.log(np.exp(scores - top).sum()))


def enumerate_marginals(logits, k: int) -> np.ndarray:
    mu = np.zeros(len(logits))
    for s, prob in subset_probabilities(logits, k).items():
        mu[list(s)] += prob
    return mu


def subset_probabilities(logits, k: int) -> dict[tuple[int, ...], float]:
    th = np.clip(np.asarray(logits, dtype=np.float64), -exactk.LOGIT_CLAMP, exactk.LOGIT_CLAMP)
    subsets = support(len(th), k)
    scores = np.array([th[list(s)].sum() for s in subsets])
    p = np.exp(scores - scores.max())
    p /= p.sum()
    return dict(zip(subsets, p))


def marginal_covariance_jacobian(logits, k: int) -> np.ndarray:
    """d mu_i / d theta_j = Cov(z_i, z_j) under the exactly-k distribution."""
    probs = subset_probabilities(logits, k)
    m = len(logits)
    second = np.zeros((m, m))
    mu = np.zeros(m)
    for s, p in probs.items():
        z = np.zeros(m)
        z[list(s)] = 1.0
        second += p * np.outer(z, z)
        mu += p * z
    return second - np.outer(mu, mu)


def finite_difference_vjp(logits, k: int, upstream, eps: float = 1e-6, marginals_fn=None) -> np.ndarray:
    """Central differences of ``upstream @ marginals``; enumeration by default.

    Enumeration returns exactly 1.0 when k == m, so the reference Jacobian is
    exactly zero there instead of rounding noise.
    """
    fn = marginals_fn or enumerate_marginals
    th = np.asarray(logits, dtype=np.float64)
    out = np.zeros_like(th)
    for j in range(len(th)):
        e = np.zeros_like(th)
        e[j] = eps
        out[j] = upstream @ (fn(th + e, k) - fn(th - e, k)) / (2 * eps)
    return out


def relative_error(value, reference, floor: float = 1e-8) -> float:
    """Max-norm error scaled by the reference's max norm (floored for all-zero references)."""
    value, reference = np.asarray(value), np.asarray(reference)
    return float(np.abs(value - reference).max() / max(float(np.abs(reference).max()), floor))


def chi_square_sampling(logits, k: int, draws: int, seed: int) -> tuple[float, float]:
    """(statistic, p-value) of sampled subset counts against exact probabilities."""
    probs = subset_probabilities(logits, k)
    subsets = list(probs)
    m = len(logits)
    rows = exactk.sample_rows(np.broadcast_to(logits, (draws, m)), k, stream(seed, 7))
    codes = rows.astype(np.int64) @ (1 << np.arange(m))
    code_of = np.array([sum(1 << i for i in s) for s in subsets])
    order = np.argsort(code_of)
    pos = np.searchsorted(code_of[order], codes)
    if np.any(pos >= len(subsets)) or np.any(code_of[order][np.minimum(pos, len(subsets) - 1)] != codes):
        raise AssertionError("sampler produced a subset outside the support")
    counts = np.zeros(len(subsets))
    np.add.at(counts, order[pos], 1.0)
    if len(subsets) == 1:
        return 0.0, 1.0
    expected = np.array([probs[s] for s in subsets]) * draws
    stat, p = chisquare(counts, expected)
    return float(stat), float(p)


def check_sampler(m: int, k: int, trials: int, seed: int = 0, vectors: int = 10,
                  tol: float = 1e-10, grad_tol: float = 1e-6, p_min: float = 1e-3) -> dict:
    """Run all oracles for one (m, k); ``passed`` is the conjunction."""
    rng = stream(seed, 5, m, k)
    err_mu = err_z = err_grad = 0.0
    for _ in range(vectors):
        th = rng.normal(0.0, 2.0, m)
        err_mu = max(err_mu, float(np.abs(exactk.marginals(th, k) - enumerate_marginals(th, k)).max()))
        err_z = max(err_z, abs(float(exactk.log_partition(th, k)) - enumerate_log_partition(th, k)))
        up = rng.normal(size=m)
        ad = exactk.marginal_jacobian_vp(th, k, up)
        ref = marginal_covariance_jacobian(th, k).T @ up
        err_grad = max(err_grad, relative_error(ad, ref))
    th = rng.normal(0.0, 1.0, m)
    stat, p = chi_square_sampling(th, k, trials, seed)
    checks = {
        "marginals": {"max_abs_error": err_mu, "passed": err_mu <= tol},
        "log_partition": {"max_abs_error": err_z, "passed": err_z <= tol},
        "gradient": {"max_rel_error": err_grad, "passed": err_grad <= grad_tol},
        "sampling": {"chi2": stat, "p_value": p, "draws": trials, "passed": p > p_min},
    }
    return {"m": m, "k": k, "seed": seed, "checks": checks, "passed": all(c["passed"] for c in checks.values())}
