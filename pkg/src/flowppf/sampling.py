"""Scenario generation: plain Monte Carlo and Latin supercube sampling (LSS).

LSS splits the scenario dimensions into groups, draws an independent
low-discrepancy point set per group, and shuffles each group's rows with one
shared permutation before concatenating.  Uniform points are mapped to the
target mixture with a sequential-conditional (Rosenblatt) transform so the
dependence between injections survives.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import qmc

from .errors import ArgumentError, CapabilityError, NumericError
from .gmm import Gmm, conditional_params

SOBOL_MAX_DIM = 21201
HALTON_MAX_DIM = 64
_ZERO_OFFSET = 2.0 ** -31   # midpoint of the first 2**-30 cell
BISECT_TOL = 1e-10


def qmc_points(d: int, T: int, kind: str = "sobol", seed: int | None = 0) -> np.ndarray:
    """First ``T`` points of a low-discrepancy sequence in the open unit cube.

    ``seed=None`` gives the unscrambled sequence without its origin point;
    otherwise Sobol gets LMS + digital-shift scrambling and Halton a
    per-dimension permutation scramble.
    """
    if d < 1 or T < 1:
        raise ArgumentError("qmc_points needs d >= 1 and T >= 1")
    if kind == "sobol":
        if d > SOBOL_MAX_DIM:
            raise CapabilityError(f"Sobol direction numbers support d <= {SOBOL_MAX_DIM}")
        eng = qmc.Sobol(d, scramble=seed is not None, seed=seed)
    elif kind == "halton":
        if d > HALTON_MAX_DIM:
            raise CapabilityError(f"Halton is supported for d <= {HALTON_MAX_DIM}")
        eng = qmc.Halton(d, scramble=seed is not None, seed=seed)
    else:
        raise ArgumentError(f"unknown qmc kind {kind!r}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        if seed is None:
            eng.fast_forward(1)
        u = eng.random(T)
    return np.where(u <= 0.0, _ZERO_OFFSET, u)


@dataclass
class LssConfig:
    groups: list[list[int]]
    T: int
    kind: str = "sobol"
    seed: int | None = 0
    perm_seed: int | None = None

    def __post_init__(self):
        self.groups = [[int(j) for j in g] for g in self.groups]
        if self.T < 1:
            raise ArgumentError("T must be >= 1")
        flat = [j for g in self.groups for j in g]
        if any(len(g) == 0 for g in self.groups):
            raise ArgumentError("LSS groups must be non-empty")
        if len(set(flat)) != len(flat):
            raise ArgumentError("LSS groups overlap")
        if sorted(flat) != list(range(len(flat))):
            raise ArgumentError("LSS groups must cover dimensions 0..d-1 exactly")

    @property
    def d(self) -> int:
        return sum(len(g) for g in self.groups)

    @classmethod
    def paired(cls, n_buses: int, T: int, **kw) -> "LssConfig":
        """Default grouping for scenario vectors ``[p..., q...]``: one (p, q) pair per bus."""
        return cls([[j, n_buses + j] for j in range(n_buses)], T, **kw)


def _group_seed(seed, k: int):
    return None if seed is None else np.random.SeedSequence([seed, k])


def lss_group_sets(config: LssConfig) -> list[np.ndarray]:
    """The unpermuted QMC set of each group."""
    out = []
    for k, g in enumerate(config.groups):
        ss = _group_seed(config.seed, k)
        seed = None if ss is None else int(ss.generate_state(1)[0])
        out.append(qmc_points(len(g), config.T, config.kind, seed))
    return out


def lss_uniform(config: LssConfig) -> np.ndarray:
    """(T, d) LSS points; group columns land at their own dimension indices."""
    perm_seed = config.perm_seed
    if perm_seed is None:
        perm_seed = 0 if config.seed is None else config.seed
    u = np.empty((config.T, config.d))
    for k, (g, pts) in enumerate(zip(config.groups, lss_group_sets(config))):
        perm = np.random.default_rng([perm_seed, k, 0x5EED]).permutation(config.T)
        u[:, g] = pts[perm]
    return u


# -- mapping to the target mixture ------------------------------------------

def _mixture_quantile(u: np.ndarray, logw: np.ndarray, means: np.ndarray, sd: np.ndarray) -> np.ndarray:
    """Per-row inverse CDF of 1-D mixtures by bisection.

    ``u``: (T,), ``logw``/``means``: (T, K), ``sd``: (K,).
    """
    w = np.exp(logw)
    lo = (means - 12.0 * sd).min(axis=1)
    hi = (means + 12.0 * sd).max(axis=1)

    def cdf(x):
        return (w * ndtr((x[:, None] - means) / sd)).sum(axis=1)

    if np.any(cdf(lo) > u) or np.any(cdf(hi) < u):
        raise NumericError("inverse CDF bisection does not bracket the target")
    while True:
        width = hi - lo
        if np.all(width <= BISECT_TOL):
            break
        mid = 0.5 * (lo + hi)
        below = cdf(mid) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(width == hi - lo):
            break
    return 0.5 * (lo + hi)


def rosenblatt(u: np.ndarray, target: Gmm) -> np.ndarray:
    """Sequential conditional-quantile map from (0,1)^d to the mixture."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    T, d = u.shape
    if d != target.dim:
        raise ArgumentError(f"uniform points have dimension {d}, target {target.dim}")
    if np.any(u <= 0) or np.any(u >= 1):
        raise ArgumentError("uniform points must lie in the open unit cube")
    s = np.empty((T, d))
    logw0 = np.broadcast_to(np.log(target.weights), (T, target.n_components))
    means0 = np.broadcast_to(target.means[:, 0], (T, target.n_components))
    s[:, 0] = _mixture_quantile(u[:, 0], logw0, means0, np.sqrt(target.covs[:, 0, 0]))
    for j in range(1, d):
        means, covs, logw = conditional_params(target, [j], list(range(j)), s[:, :j])
        s[:, j] = _mixture_quantile(u[:, j], logw, means[:, :, 0], np.sqrt(covs[:, 0, 0]))
    return s


@dataclass
class ScenarioSet:
    scenarios: np.ndarray
    method: str
    log_density: np.ndarray = field(default=None)
    columns: list[str] | None = None

    def __post_init__(self):
        self.scenarios = np.atleast_2d(self.scenarios)
        if self.log_density is None:
            raise ArgumentError("scenario set needs its density cache")
        if not np.all(np.isfinite(self.log_density)):
            raise NumericError("non-finite scenario density")

    def __len__(self) -> int:
        return len(self.scenarios)

    @property
    def dim(self) -> int:
        return self.scenarios.shape[1]

    def to_csv(self, path: str | Path) -> None:
        cols = self.columns or [f"s_{j}" for j in range(self.dim)]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(cols + ["log_density"])
            for s, lp in zip(self.scenarios, self.log_density):
                wr.writerow([repr(float(v)) for v in s] + [repr(float(lp))])

    @classmethod
    def from_csv(cls, path: str | Path, method: str = "file") -> "ScenarioSet":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head = rows[0]
        if head[-1] != "log_density":
            raise ArgumentError(f"{path}: last column must be log_density")
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
        return cls(data[:, :-1], method, data[:, -1], head[:-1])


def to_scenarios(u: np.ndarray, target: Gmm, columns: Sequence[str] | None = None,
                 method: str = "lss") -> ScenarioSet:
    s = rosenblatt(u, target)
    return ScenarioSet(s, method, np.atleast_1d(target.log_density(s)),
                       list(columns) if columns is not None else None)


def mc_scenarios(target: Gmm, T: int, seed=0, columns: Sequence[str] | None = None) -> ScenarioSet:
    if T < 1:
        raise ArgumentError("T must be >= 1")
    s = target.sample(T, seed)
    return ScenarioSet(s, "mc", np.atleast_1d(target.log_density(s)),
                       list(columns) if columns is not None else None)


def lss_scenarios(target: Gmm, T: int, seed: int = 0, kind: str = "sobol",
                  columns: Sequence[str] | None = None) -> ScenarioSet:
    """LSS scenarios with the default (p, q)-pair grouping."""
    if target.dim % 2:
        raise ArgumentError("paired grouping needs an even scenario dimension")
    cfg = LssConfig.paired(target.dim // 2, T, kind=kind, seed=seed)
    return to_scenarios(lss_uniform(cfg), target, columns, "lss")
