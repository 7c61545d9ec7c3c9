"""Multivariate Gaussian mixtures: density, EM fitting, sampling,
marginalization and conditioning."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ArgumentError, ModelError

logger = logging.getLogger(__name__)

COV_FLOOR = 1e-8
_LOG2PI = np.log(2.0 * np.pi)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _chol(cov: np.ndarray, k: int) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ModelError(f"component {k}: covariance is not positive definite", component=k) from None


@dataclass(frozen=True)
class Gmm:
    weights: np.ndarray   # (K,)
    means: np.ndarray     # (K, d)
    covs: np.ndarray      # (K, d, d)

    def __post_init__(self):
        # private copies: the instance freezes its arrays, never the caller's
        w = np.atleast_1d(np.array(self.weights, dtype=float))
        mu = np.atleast_2d(np.array(self.means, dtype=float))
        cov = np.array(self.covs, dtype=float)
        if cov.ndim == 2:
            cov = cov[None]
        if not (len(w) == len(mu) == len(cov)) or cov.shape[1:] != (mu.shape[1], mu.shape[1]):
            raise ModelError(f"inconsistent shapes: weights {w.shape}, means {mu.shape}, covs {cov.shape}")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ModelError("weights must be positive and sum to one", weights=w.tolist())
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), rtol=1e-10, atol=1e-14):
            raise ModelError("covariances must be symmetric")
        chol = np.stack([_chol(c, k) for k, c in enumerate(cov)])
        w.setflags(write=False)
        mu.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "weights", w / w.sum())
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", cov)
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    # -- densities -----------------------------------------------------
    def component_log_density(self, x: np.ndarray) -> np.ndarray:
        """log N(x; mu_k, Sigma_k) for every row of ``x`` and component, shape (n, K)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dim:
            raise ArgumentError(f"points have dimension {x.shape[1]}, mixture {self.dim}")
        out = np.empty((len(x), self.n_components))
        for k in range(self.n_components):
            lk = self._chol[k]
            z = np.linalg.solve(lk, (x - self.means[k]).T)
            half_logdet = np.log(np.diag(lk)).sum()
            out[:, k] = -0.5 * (z * z).sum(axis=0) - half_logdet - 0.5 * self.dim * _LOG2PI
        return out

    def log_density(self, x: np.ndarray) -> np.ndarray | float:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        lp = logsumexp(self.component_log_density(x) + np.log(self.weights), axis=1)
        return float(lp[0]) if single else lp

    def density(self, x: np.ndarray) -> np.ndarray | float:
        lp = self.log_density(x)
        return float(np.exp(lp)) if np.ndim(lp) == 0 else np.exp(lp)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        m = self.mean()
        d = self.means - m
        return np.einsum("k,kij->ij", self.weights, self.covs) + np.einsum("k,ki,kj->ij", self.weights, d, d)

    # -- sampling ------------------------------------------------------
    def sample(self, n: int, seed=None) -> np.ndarray:
        """Ancestral sampling: component by weight, then ``mu + L z``."""
        if n < 0:
            raise ArgumentError("n must be non-negative")
        rng = _rng(seed)
        if n == 0:
            return np.zeros((0, self.dim))
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", self._chol[comp], z)

    # -- closed-form operations -----------------------------------------
    def marginal(self, keep: Sequence[int]) -> "Gmm":
        keep = _index_set(keep, self.dim, "keep-dims")
        return Gmm(self.weights, self.means[:, keep], self.covs[:, keep][:, :, keep])

    def condition(self, observed: Sequence[int], values: np.ndarray) -> "Gmm":
        """Mixture over the free dimensions given ``x[observed] = values``.

        Free dimensions keep their original relative order.  Component weights
        are reweighted by each component's marginal density of the observation.
        """
        obs = _index_set(observed, self.dim, "observed-dims")
        if len(obs) == self.dim:
            raise ArgumentError("observed dims must be a proper subset")
        vals = np.asarray(values, dtype=float).ravel()
        if len(vals) != len(obs) or not np.all(np.isfinite(vals)):
            raise ArgumentError("observed values must be finite and match observed dims")
        free = [j for j in range(self.dim) if j not in set(obs)]
        means, covs, logw = conditional_params(self, free, obs, vals[None])
        return Gmm(np.exp(logw[0]), means[0], covs)

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "components": [
                {"weight": float(w), "mean": m.tolist(), "cov": c.tolist()}
                for w, m, c in zip(self.weights, self.means, self.covs)
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Gmm":
        try:
            comps = data["components"]
            g = cls(np.array([c["weight"] for c in comps]),
                    np.array([c["mean"] for c in comps]),
                    np.array([c["cov"] for c in comps]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelError(f"malformed GMM JSON: {exc}") from None
        if "dim" in data and int(data["dim"]) != g.dim:
            raise ModelError(f"declared dim {data['dim']} != component dim {g.dim}")
        return g

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path: str | Path) -> "Gmm":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _index_set(idx: Sequence[int], d: int, what: str) -> list[int]:
    idx = [int(i) for i in np.atleast_1d(idx)]
    if not idx:
        raise ArgumentError(f"{what}: empty index set")
    if len(set(idx)) != len(idx) or min(idx) < 0 or max(idx) >= d:
        raise ArgumentError(f"{what}: indices must be distinct and within 0..{d - 1}", indices=idx)
    return idx


def conditional_params(gmm: Gmm, free: Sequence[int], obs: Sequence[int], values: np.ndarray):
    """Vectorized conditioning for many observations.

    Returns ``(means (n, K, |free|), covs (K, |free|, |free|), log_weights (n, K))``.
    """
    values = np.atleast_2d(values)
    free, obs = list(free), list(obs)
    n, K = len(values), gmm.n_components
    means = np.empty((n, K, len(free)))
    covs = np.empty((K, len(free), len(free)))
    logp = np.empty((n, K))
    for k in range(K):
        s_oo = gmm.covs[k][np.ix_(obs, obs)]
        s_fo = gmm.covs[k][np.ix_(free, obs)]
        s_ff = gmm.covs[k][np.ix_(free, free)]
        try:
            l_oo = np.linalg.cholesky(s_oo)
        except np.linalg.LinAlgError:
            raise ModelError(f"component {k}: observed-block covariance is singular", component=k) from None
        diff = values - gmm.means[k, obs]
        # gain = s_fo s_oo^{-1}
        gain = np.linalg.solve(l_oo.T, np.linalg.solve(l_oo, s_fo.T)).T
        means[:, k] = gmm.means[k, free] + diff @ gain.T
        c = s_ff - gain @ s_fo.T
        covs[k] = 0.5 * (c + c.T)
        z = np.linalg.solve(l_oo, diff.T)
        logp[:, k] = (np.log(gmm.weights[k]) - 0.5 * (z * z).sum(axis=0)
                      - np.log(np.diag(l_oo)).sum() - 0.5 * len(obs) * _LOG2PI)
    logw = logp - logsumexp(logp, axis=1, keepdims=True)
    return means, covs, logw


# -- EM ------------------------------------------------------------------

def _em_once(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int, tol: float):
    n, d = x.shape
    # k-means++ style seeding
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min([((x - c) ** 2).sum(axis=1) for c in centers], axis=0)
        total = d2.sum()
        probs = d2 / total if total > 0 else np.full(n, 1.0 / n)
        centers.append(x[rng.choice(n, p=probs)])
    mu = np.array(centers)
    base = np.cov(x.T).reshape(d, d) + COV_FLOOR * np.eye(d)
    cov = np.repeat(base[None], k, axis=0)
    w = np.full(k, 1.0 / k)
    prev = -np.inf
    ll = -np.inf
    for _ in range(max_iter):
        g = Gmm(w, mu, cov)
        lp = g.component_log_density(x) + np.log(w)
        norm = logsumexp(lp, axis=1)
        ll = float(norm.sum())
        resp = np.exp(lp - norm[:, None])
        nk = resp.sum(axis=0)
        if np.any(nk / n < 1e-6):
            return None, ll
        w = nk / n
        mu = (resp.T @ x) / nk[:, None]
        for j in range(k):
            dx = x - mu[j]
            c = (resp[:, j, None] * dx).T @ dx / nk[j]
            cov[j] = 0.5 * (c + c.T) + COV_FLOOR * np.eye(d)
        if ll - prev < tol * max(1.0, abs(ll)):
            break
        prev = ll
    g = Gmm(w, mu, cov)
    return g, float(g.log_density(x).sum())


def fit_em(samples, k: int, restarts: int = 3, seed: int = 0, max_iter: int = 300,
           tol: float = 1e-10, k_max: int = 8) -> Gmm:
    """Best-of-``restarts`` EM fit; ``k = 0`` selects K in 1..k_max by BIC.

    A restart that collapses a component below weight 1e-6 is refit with one
    component fewer.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if x.ndim != 2:
        raise ArgumentError("samples must be a 2-D array")
    n, d = x.shape
    if k == 0:
        best, best_bic = None, np.inf
        for kk in range(1, k_max + 1):
            if n < 10 * kk * d:
                break
            g = fit_em(x, kk, restarts, seed, max_iter, tol)
            b = bic(g, x)
            if b < best_bic - 1e-9:
                best, best_bic = g, b
        if best is None:
            raise ArgumentError(f"need at least {10 * d} samples for BIC selection")
        return best
    if k < 1:
        raise ArgumentError("k must be >= 1 (or 0 for BIC selection)")
    if n < 10 * k * d:
        raise ArgumentError(f"need at least 10*K*d = {10 * k * d} samples, got {n}")
    rng = np.random.default_rng(seed)
    best, best_ll = None, -np.inf
    degenerate = False
    for _ in range(max(1, restarts)):
        g, ll = _em_once(x, k, rng, max_iter, tol)
        if g is None:
            degenerate = True
            continue
        if ll > best_ll:
            best, best_ll = g, ll
    if best is None:
        if k == 1:
            raise ModelError("EM failed for a single component")
        warnings.warn(f"degenerate component with K={k}; refitting with K={k - 1}", RuntimeWarning)
        return fit_em(x, k - 1, restarts, seed, max_iter, tol)
    if degenerate:
        logger.info("fit_em: some restarts with K=%d collapsed a component", k)
    return best


def n_free_params(g: Gmm) -> int:
    d, k = g.dim, g.n_components
    return (k - 1) + k * d + k * d * (d + 1) // 2


def bic(g: Gmm, x: np.ndarray) -> float:
    return -2.0 * float(g.log_density(x).sum()) + n_free_params(g) * np.log(len(x))


def standard_normal(d: int) -> Gmm:
    return Gmm(np.ones(1), np.zeros((1, d)), np.eye(d)[None])
