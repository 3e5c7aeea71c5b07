"""Continuous OT merging of consecutive topic-embedding clouds.

Each cloud of topic embeddings is summarized as a spiked Gaussian: a
few leading eigenpairs over an isotropic residual. All square roots,
the Monge map, and the 2-Wasserstein distance then have closed forms
that never require an L x L matrix: spectral work happens on the K x K
Gram matrix and on the small combined span of the two models.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

SIGMA2_FLOOR = 1e-8
_ORTH_TOL = 1e-10


@dataclass(frozen=True)
class LowRankGaussian:
    """Spiked covariance model m, U diag(lam - sigma2) U^T + sigma2 I."""

    m: np.ndarray
    U: np.ndarray
    lam: np.ndarray
    sigma2: float

    @property
    def d(self) -> int:
        return self.U.shape[1]

    @property
    def dim(self) -> int:
        return self.m.shape[0]

    def trace(self) -> float:
        return float(self.lam.sum() + self.sigma2 * (self.dim - self.d))

    def dense_cov(self) -> np.ndarray:
        eye = np.eye(self.dim)
        return (self.U * (self.lam - self.sigma2)) @ self.U.T + self.sigma2 * eye


@dataclass(frozen=True)
class TransportedSet:
    """Topic embeddings carried into the geometry of an earlier model."""

    embeddings: np.ndarray
    source_t: int
    target_t: int


def default_d_rule(eigs: np.ndarray, frac: float = 0.9) -> int:
    """Smallest d capturing ``frac`` of the trace, capped at K-2.

    ``eigs`` are all K descending Gram eigenvalues of the cloud,
    including the zeros, so the cap is len(eigs) - 2.
    """
    total = float(eigs.sum())
    if total <= 0.0:
        return 0
    cum = np.cumsum(eigs) / total
    d = int(np.searchsorted(cum, frac) + 1)
    return min(d, len(eigs) - 2)


def fit_low_rank_gaussian(points, d_rule=None) -> LowRankGaussian:
    """Fit the spiked model to a K x L cloud via its Gram matrix.

    The residual variance is the mean of the discarded eigenvalues,
    floored at ``SIGMA2_FLOOR``; the kept eigenvalues are reduced until
    every one of them exceeds the residual.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 2:
        raise ValueError("need at least two points to fit a Gaussian")
    n, L = points.shape
    m = points.mean(axis=0)
    X = points - m
    gram = X @ X.T / (n - 1)
    w, V = np.linalg.eigh(gram)
    w = w[::-1].copy()
    V = V[:, ::-1]
    w[w < 0.0] = 0.0
    positive = w > max(w[0], 0.0) * 1e-12 if w[0] > 0 else np.zeros_like(w, dtype=bool)
    eigs = w[: int(positive.sum())]
    trace_total = float(w.sum())

    rule = default_d_rule if d_rule is None else d_rule
    d = int(rule(w)) if eigs.size else 0
    d = max(0, min(d, eigs.size, L - 1))
    while d > 0:
        sigma2 = max((trace_total - float(eigs[:d].sum())) / (L - d), SIGMA2_FLOOR)
        if eigs[d - 1] > sigma2:
            break
        d -= 1
    if d == 0:
        sigma2 = max(trace_total / L, SIGMA2_FLOOR)

    lam = eigs[:d].copy()
    scale = np.sqrt((n - 1) * lam) if d else np.empty(0)
    U = X.T @ V[:, :d] / scale if d else np.zeros((L, 0))
    return LowRankGaussian(m=m, U=U, lam=lam, sigma2=float(sigma2))


def sqrt_apply(g: LowRankGaussian, x, power: float) -> np.ndarray:
    """Apply the covariance square root Sigma^{+1/2} or Sigma^{-1/2}.

    Accepts a single vector or a stack of row vectors.
    """
    if power not in (0.5, -0.5):
        raise ValueError("power must be +0.5 or -0.5")
    x = np.asarray(x, dtype=np.float64)
    s = g.sigma2**power
    if g.d == 0:
        return s * x
    coef = x @ g.U
    return (coef * (g.lam**power - s)) @ g.U.T + s * x


def _combined_basis(g_t: LowRankGaussian, g_prev: LowRankGaussian) -> np.ndarray:
    stacked = np.hstack([g_t.U, g_prev.U])
    if stacked.shape[1] == 0:
        return np.zeros((g_t.dim, 0))
    q, sv, _ = np.linalg.svd(stacked, full_matrices=False)
    keep = sv > _ORTH_TOL
    return q[:, keep]


def _restrict_cov(g: LowRankGaussian, W: np.ndarray) -> np.ndarray:
    r = W.shape[1]
    proj = g.U.T @ W
    return proj.T * (g.lam - g.sigma2) @ proj + g.sigma2 * np.eye(r)


def _sym_sqrt(A: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(A)
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


@dataclass(frozen=True)
class MiddleSqrt:
    """(Sigma_t^{1/2} Sigma_prev Sigma_t^{1/2})^{1/2} in applied form.

    Exact on the combined span W of both models; on the complement both
    covariances are scalar, so the operator is sigma_t * sigma_prev.
    """

    W: np.ndarray
    S: np.ndarray
    scalar: float

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.W.shape[1] == 0:
            return self.scalar * x
        coef = x @ self.W
        return (coef @ self.S) @ self.W.T + self.scalar * (x - coef @ self.W.T)

    def trace(self, dim: int) -> float:
        return float(np.trace(self.S) + self.scalar * (dim - self.W.shape[1]))


def middle_sqrt(g_t: LowRankGaussian, g_prev: LowRankGaussian) -> MiddleSqrt:
    """Build the central square root of the Monge map for a model pair."""
    if g_t.dim != g_prev.dim:
        raise ValueError("models live in different embedding spaces")
    W = _combined_basis(g_t, g_prev)
    scalar = float(np.sqrt(g_t.sigma2 * g_prev.sigma2))
    if W.shape[1] == 0:
        return MiddleSqrt(W=W, S=np.zeros((0, 0)), scalar=scalar)
    a_t = _restrict_cov(g_t, W)
    a_p = _restrict_cov(g_prev, W)
    half_t = _sym_sqrt(a_t)
    S = _sym_sqrt(half_t @ a_p @ half_t)
    return MiddleSqrt(W=W, S=S, scalar=scalar)


def monge_map(g_t: LowRankGaussian, g_prev: LowRankGaussian, x) -> np.ndarray:
    """Closed-form optimal map from model t onto the previous model.

    T(x) = m_prev + Sigma_t^{-1/2} M Sigma_t^{-1/2} (x - m_t), applied
    to a single vector or to rows of a matrix.
    """
    mid = middle_sqrt(g_t, g_prev)
    x = np.asarray(x, dtype=np.float64)
    centered = x - g_t.m
    out = sqrt_apply(g_t, centered, -0.5)
    out = mid.apply(out)
    out = sqrt_apply(g_t, out, -0.5)
    return out + g_prev.m


def w2_gaussian(g_t: LowRankGaussian, g_prev: LowRankGaussian) -> float:
    """Squared 2-Wasserstein distance between the two fitted Gaussians."""
    mid = middle_sqrt(g_t, g_prev)
    delta = g_t.m - g_prev.m
    val = float(delta @ delta) + g_t.trace() + g_prev.trace() - 2.0 * mid.trace(g_t.dim)
    return max(val, 0.0)


def cot_merge(
    alpha_t,
    alpha_prev,
    source_t: int = 0,
    target_t: int = 0,
    d_rule=None,
) -> TransportedSet:
    """Transport every topic embedding of model t onto the previous model.

    Fits both clouds and pushes the rows of ``alpha_t`` through the
    Monge map; the merged model uses exactly these transported rows.
    """
    alpha_t = np.asarray(alpha_t, dtype=np.float64)
    alpha_prev = np.asarray(alpha_prev, dtype=np.float64)
    g_t = fit_low_rank_gaussian(alpha_t, d_rule=d_rule)
    g_prev = fit_low_rank_gaussian(alpha_prev, d_rule=d_rule)
    moved = monge_map(g_t, g_prev, alpha_t)
    return TransportedSet(embeddings=moved, source_t=source_t, target_t=target_t)


def export_csv(ts: TransportedSet, path) -> None:
    """Write a transported set as rows of (topic id, L coordinates)."""
    L = ts.embeddings.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["topic"] + [f"e{i}" for i in range(L)])
        for k, row in enumerate(ts.embeddings):
            writer.writerow([k] + [repr(float(v)) for v in row])
