"""Exactly-k conditional Bernoulli rows.

A row of logits ``theta`` (length m) defines independent Bernoullis with
``P(H_j = 1) = sigmoid(theta_j)``. Conditioning on ``sum(H) = k`` leaves a
distribution over k-subsets ``S`` proportional to ``prod_{j in S} exp(theta_j)``,
whose normaliser is the k-th elementary symmetric polynomial ``e_k(exp(theta))``.

Everything below works in log space on the prefix table
``T[i, t] = log e_t(w_1..w_i)`` built with the recursion
``e_t(w_1..i) = e_t(w_1..i-1) + w_i * e_{t-1}(w_1..i-1)``.
The numpy routines broadcast over leading row dimensions; the tensor routines
run the same recursion through the autodiff engine so the marginals can be
differentiated.
"""

from __future__ import annotations

from itertools import combinations

import numpy as np

from . import tensor as T
from .graph import AssignmentMatrix
from .rng import stream
from .tensor import Tensor

LOGIT_CLAMP = 30.0


class ExactKError(ValueError):
    pass


def _check(m: int, k: int) -> None:
    if not 1 <= k <= m:
        raise ExactKError(f"need 1 <= k <= m, got k={k}, m={m}")


def _clamped(logits) -> np.ndarray:
    x = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    return np.clip(x, -LOGIT_CLAMP, LOGIT_CLAMP)


def log_esp_table(logits, k: int) -> np.ndarray:
    """Prefix table of log elementary symmetric polynomials, shape (..., m+1, k+1)."""
    th = _clamped(logits)
    m = th.shape[-1]
    _check(m, k)
    lead = th.shape[:-1]
    table = np.full(lead + (m + 1, k + 1), -np.inf)
    table[..., 0, 0] = 0.0
    for i in range(1, m + 1):
        prev = table[..., i - 1, :]
        take = np.full_like(prev, -np.inf)
        take[..., 1:] = prev[..., :-1] + th[..., i - 1 : i]
        table[..., i, :] = np.logaddexp(prev, take)
    return table


def _suffix_table(th: np.ndarray, k: int) -> np.ndarray:
    """S[..., i, t] = log e_t(w_{i+1}..w_m) (items after position i, 0-based)."""
    m = th.shape[-1]
    lead = th.shape[:-1]
    table = np.full(lead + (m + 1, k + 1), -np.inf)
    table[..., m, 0] = 0.0
    for i in range(m - 1, -1, -1):
        nxt = table[..., i + 1, :]
        take = np.full_like(nxt, -np.inf)
        take[..., 1:] = nxt[..., :-1] + th[..., i : i + 1]
        table[..., i, :] = np.logaddexp(nxt, take)
    return table


def log_partition(logits, k: int) -> np.ndarray | float:
    """log e_k(exp(logits)) per row."""
    table = log_esp_table(logits, k)
    out = table[..., -1, k]
    return float(out) if np.ndim(out) == 0 else out


def marginals(logits, k: int) -> np.ndarray:
    """Inclusion probabilities ``P(H_j = 1 | sum H = k)``; rows sum to k."""
    th = _clamped(logits)
    m = th.shape[-1]
    _check(m, k)
    if k == m:
        return np.ones(th.shape)
    pre = log_esp_table(th, k)
    suf = _suffix_table(th, k)
    log_z = pre[..., m, k]
    # mu_j = w_j * sum_t e_t(before j) * e_{k-1-t}(after j) / e_k
    t = np.arange(k)
    out = np.empty(th.shape)
    for j in range(m):
        terms = pre[..., j, t] + suf[..., j + 1, k - 1 - t]
        out[..., j] = th[..., j] + np.logaddexp.reduce(terms, axis=-1) - log_z
    return np.exp(out)


def marginals_tensor(logits: Tensor, k: int) -> Tensor:
    """Marginals of an (n, m) logit tensor, recorded on the active tape."""
    logits = T.as_tensor(logits)
    if logits.ndim == 1:
        return T.reshape(marginals_tensor(T.reshape(logits, (1, -1)), k), (logits.shape[0],))
    n, m = logits.shape
    _check(m, k)
    if k == m:
        # every entry is selected; the marginals are constant
        return Tensor(np.ones((n, m)))
    th = T.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    cols = [T.reshape(T.getitem(th, (slice(None), j)), (n, 1)) for j in range(m)]
    ninf = Tensor(np.full((n, 1), -np.inf))

    def step(row: Tensor, w: Tensor) -> Tensor:
        shifted = T.concat([ninf, T.getitem(row, (slice(None), slice(0, k)))], axis=1)
        return T.logaddexp(row, T.add(shifted, T.broadcast_to(w, (n, k + 1))))

    start = np.full((n, k + 1), -np.inf)
    start[:, 0] = 0.0
    pre = [Tensor(start)]
    for j in range(m):
        pre.append(step(pre[-1], cols[j]))
    suf = [Tensor(start)]
    for j in range(m - 1, -1, -1):
        suf.append(step(suf[-1], cols[j]))
    suf = suf[::-1]  # suf[i] covers items i..m-1

    log_z = T.getitem(pre[m], (slice(None), slice(k, k + 1)))
    out_cols = []
    rev = np.arange(k - 1, -1, -1)
    for j in range(m):
        before = T.getitem(pre[j], (slice(None), slice(0, k)))
        after = T.getitem(suf[j + 1], (slice(None), rev))
        inner = T.reshape(T.logsumexp(T.add(before, after), axis=1), (n, 1))
        out_cols.append(T.sub(T.add(cols[j], inner), log_z))
    return T.exp(T.concat(out_cols, axis=1))


def marginal_jacobian_vp(logits, k: int, upstream) -> np.ndarray:
    """``(d mu / d theta)^T upstream`` by reverse mode through the marginal recursion."""
    th = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    up = np.asarray(upstream.data if isinstance(upstream, Tensor) else upstream, dtype=np.float64)
    if up.shape != th.shape:
        raise ExactKError(f"upstream shape {up.shape} does not match logits {th.shape}")
    leaf = T.parameter(th.copy())
    with T.Tape() as tape:
        mu = marginals_tensor(leaf, k)
    tape.backward(mu, up)
    return leaf.grad if leaf.grad is not None else np.zeros_like(th)


def _sample_rows(th: np.ndarray, k: int, u: np.ndarray) -> np.ndarray:
    """Binary (n, m) sample given one uniform per (row, item)."""
    n, m = th.shape
    table = log_esp_table(th, k)
    out = np.zeros((n, m))
    left = np.full(n, k)
    rows = np.arange(n)
    for i in range(m, 0, -1):
        active = left > 0
        if not active.any():
            break
        t = left[active]
        r = rows[active]
        p = np.exp(th[r, i - 1] + table[r, i - 1, t - 1] - table[r, i, t])
        take = u[r, i - 1] < p
        out[r[take], i - 1] = 1.0
        left[r[take]] -= 1
    return out


def sample_rows(logits, k: int, rng) -> np.ndarray:
    """Exact samples for every row of ``logits`` (n, m); consumes m uniforms per row."""
    th = _clamped(logits)
    if th.ndim == 1:
        th = th.reshape(1, -1)
    _check(th.shape[1], k)
    rng = stream(rng) if not isinstance(rng, np.random.Generator) else rng
    return _sample_rows(th, k, rng.random(th.shape))


def sample_row(logits, k: int, rng) -> list[int]:
    """Sorted indices of one exact k-subset draw."""
    h = sample_rows(np.asarray(_clamped(logits)).reshape(1, -1), k, rng)
    return np.flatnonzero(h[0]).tolist()


def sample_assignment(priors, k: int, q: int, rng, graph_index: int = 0) -> list[AssignmentMatrix]:
    """``q`` independent assignment matrices.

    With an integer ``rng`` each sample ``s`` draws from its own stream
    ``(rng, graph_index, s)``; a ``Generator`` is consumed sequentially.
    """
    if q < 1:
        raise ExactKError("q must be at least 1")
    th = _clamped(priors)
    n, m = th.shape
    _check(m, k)
    out = []
    for s in range(q):
        gen = rng if isinstance(rng, np.random.Generator) else stream(rng, graph_index, s)
        out.append(AssignmentMatrix.from_dense(_sample_rows(th, k, gen.random((n, m))), k))
    return out


def straight_through(priors: Tensor, samples: np.ndarray, k: int) -> Tensor:
    """Stacked binary samples (q*n, m) whose backward uses the marginal Jacobian.

    ``samples`` has shape (q, n, m). The forward value is exactly the samples;
    the upstream gradient of every copy is pushed through ``d mu / d theta``.
    """
    q, n, m = samples.shape
    mu = marginals_tensor(priors, k)
    return T.custom_grad(
        samples.reshape(q * n, m),
        [mu],
        lambda g: [g.reshape(q, n, m).sum(axis=0)],
    )


def straight_through_assign(priors: Tensor, k: int, q: int, rng, graph_index: int = 0) -> list[Tensor]:
    """``q`` sampled assignment tensors, each differentiable w.r.t. ``priors``."""
    priors = T.as_tensor(priors)
    mats = sample_assignment(priors.data, k, q, rng, graph_index)
    mu = marginals_tensor(priors, k)
    return [T.custom_grad(h.to_dense(), [mu], lambda g: [g]) for h in mats]


class ExactKRowDistribution:
    """One row's exactly-k distribution."""

    def __init__(self, logits, k: int):
        self.logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64).reshape(-1)
        self.k = int(k)
        _check(self.logits.size, self.k)

    @property
    def m(self) -> int:
        return self.logits.size

    @property
    def log_esp(self) -> np.ndarray:
        return log_esp_table(self.logits, self.k)

    def log_partition(self) -> float:
        return log_partition(self.logits, self.k)

    def marginals(self) -> np.ndarray:
        return marginals(self.logits, self.k)

    def log_prob(self, subset) -> float:
        subset = sorted(set(int(j) for j in subset))
        if len(subset) != self.k:
            return -np.inf
        return float(_clamped(self.logits)[subset].sum() - self.log_partition())

    def sample(self, rng) -> list[int]:
        return sample_row(self.logits, self.k, rng)

    def support(self):
        return combinations(range(self.m), self.k)
