"""Per-bus voltage densities: the flow-based estimator, the Monte-Carlo
reference, linear and piecewise-linear pushforward baselines, and the
JSD / TVD / MAE metrics."""

from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor_ad as ad
from .errors import ArgumentError, DataError, NumericError
from .flow import INVERSE, ImnfModel
from .gmm import Gmm, conditional_params, fit_em
from .grid import Dataset, Network, generate_dataset
from .kernels import mix2_logpdf
from .sampling import ScenarioSet

logger = logging.getLogger(__name__)

KL_FLOOR = 1e-12
GRID_SIGMAS = 4.0
MASS_WARN = (0.9, 1.1)
MASS_ERROR = (0.5, 2.0)


# -- grids -------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    vm_lo: float
    vm_hi: float
    va_lo: float
    va_hi: float
    n_vm: int = 200
    n_va: int = 200

    def __post_init__(self):
        if not (self.vm_hi > self.vm_lo and self.va_hi > self.va_lo):
            raise ArgumentError("grid bounds must be increasing")
        if self.n_vm < 2 or self.n_va < 2:
            raise ArgumentError("grid needs at least 2 points per axis")

    @property
    def vm(self) -> np.ndarray:
        return np.linspace(self.vm_lo, self.vm_hi, self.n_vm)

    @property
    def va(self) -> np.ndarray:
        return np.linspace(self.va_lo, self.va_hi, self.n_va)

    def points(self) -> np.ndarray:
        """(n_vm * n_va, 2) grid points, vm-major."""
        vm, va = np.meshgrid(self.vm, self.va, indexing="ij")
        return np.stack([vm.ravel(), va.ravel()], axis=1)

    @classmethod
    def around(cls, gmm: Gmm, n: int = 200, sigmas: float = GRID_SIGMAS) -> "GridSpec":
        """Box ``[min mean - s*sigma, max mean + s*sigma]`` per axis of a 2-D mixture."""
        if gmm.dim != 2:
            raise ArgumentError("grid reference must be a 2-D mixture")
        sd = np.sqrt(np.stack([gmm.covs[:, 0, 0], gmm.covs[:, 1, 1]], axis=1))
        lo = (gmm.means - sigmas * sd).min(axis=0)
        hi = (gmm.means + sigmas * sd).max(axis=0)
        return cls(float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]), n, n)


@dataclass
class DensityGrid:
    vm: np.ndarray
    va: np.ndarray
    values: np.ndarray   # (len(vm), len(va))

    def __post_init__(self):
        self.vm = np.asarray(self.vm, dtype=float)
        self.va = np.asarray(self.va, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        for name, ax in (("vm", self.vm), ("va", self.va)):
            if ax.ndim != 1 or len(ax) < 2:
                raise ArgumentError(f"{name} axis needs at least 2 points")
            step = np.diff(ax)
            if np.any(step <= 0):
                raise ArgumentError(f"{name} axis must be strictly increasing")
            if np.max(np.abs(step - step.mean())) > 1e-6 * abs(step.mean()) + 1e-12:
                raise ArgumentError(f"{name} axis must be uniform")
        if self.values.shape != (len(self.vm), len(self.va)):
            raise ArgumentError(f"values shape {self.values.shape} does not match axes")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise NumericError("density values must be finite and non-negative")

    @property
    def cell_area(self) -> float:
        return float((self.vm[1] - self.vm[0]) * (self.va[1] - self.va[0]))

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.cell_area)

    def check_mass(self) -> float:
        m = self.mass
        if not MASS_ERROR[0] <= m <= MASS_ERROR[1]:
            raise NumericError(f"grid mass {m:.4f} outside {list(MASS_ERROR)}", mass=m)
        if not MASS_WARN[0] <= m <= MASS_WARN[1]:
            warnings.warn(f"grid mass {m:.4f} outside {list(MASS_WARN)}", RuntimeWarning, stacklevel=2)
        return m

    @classmethod
    def from_spec(cls, spec: GridSpec, values: np.ndarray) -> "DensityGrid":
        return cls(spec.vm, spec.va, np.asarray(values).reshape(spec.n_vm, spec.n_va))

    @classmethod
    def of_gmm(cls, gmm: Gmm, spec: GridSpec) -> "DensityGrid":
        return cls.from_spec(spec, gmm.density(spec.points()))

    def same_axes(self, other: "DensityGrid") -> bool:
        return (self.vm.shape == other.vm.shape and self.va.shape == other.va.shape
                and np.allclose(self.vm, other.vm, rtol=0, atol=1e-12)
                and np.allclose(self.va, other.va, rtol=0, atol=1e-12))

    def to_csv(self, path: str | Path) -> None:
        vm, va = np.meshgrid(self.vm, self.va, indexing="ij")
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["vm", "va", "density"])
            for a, b, c in zip(vm.ravel(), va.ravel(), self.values.ravel()):
                wr.writerow([repr(float(a)), repr(float(b)), repr(float(c))])

    @classmethod
    def from_csv(cls, path: str | Path) -> "DensityGrid":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["vm", "va", "density"]:
            raise ArgumentError(f"{path}: expected header vm,va,density")
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
        vm = np.unique(data[:, 0])
        va = np.unique(data[:, 1])
        if len(vm) * len(va) != len(data):
            raise ArgumentError(f"{path}: rows do not form a full grid")
        order = np.lexsort((data[:, 1], data[:, 0]))
        return cls(vm, va, data[order, 2].reshape(len(vm), len(va)))


# -- bus bookkeeping -----------------------------------------------------------

def bus_dims(n_pq: int, bus: int) -> tuple[list[int], list[int]]:
    """(own dims, scenario dims) of PQ bus ``bus`` in the ``[p..., q...]`` layout."""
    if not 0 <= bus < n_pq:
        raise ArgumentError(f"bus index {bus} out of range 0..{n_pq - 1}")
    own = [bus, n_pq + bus]
    rest = [j for j in range(2 * n_pq) if j not in own]
    return own, rest


def scenario_target(joint: Gmm, bus: int) -> Gmm:
    """Mixture of all injections except those of ``bus``."""
    _, rest = bus_dims(joint.dim // 2, bus)
    return joint.marginal(rest)


# -- flow estimator --------------------------------------------------------------

def estimate_bus_density(model: ImnfModel, joint: Gmm, bus: int, scenarios: ScenarioSet,
                         spec: GridSpec) -> DensityGrid:
    """``p(v) ~ (1/T) sum_t p(v | s_t)`` with each term from the change of variables.

    ``p(v | s_t) = base_t(f^-1(v | s_t)) |det d f^-1 / d v|`` where ``base_t``
    is the bus's injection mixture conditioned on scenario ``s_t``.
    """
    n = model.n_pq
    if joint.dim != 2 * n:
        raise ArgumentError(f"joint mixture has dimension {joint.dim}, model expects {2 * n}")
    if len(scenarios) == 0:
        raise ArgumentError("empty scenario set")
    own, rest = bus_dims(n, bus)
    if scenarios.dim != len(rest):
        raise ArgumentError(f"scenario dimension {scenarios.dim} != {len(rest)}")
    s = scenarios.scenarios
    means, covs, logw = conditional_params(joint, own, rest, s)
    pts = spec.points()
    G = len(pts)
    bus_col = np.full(G, bus)
    acc = np.full(G, -np.inf)
    for t in range(len(s)):
        cond = model.embed(s[t:t + 1], [bus])
        with ad.no_grad():
            x, lad = model.apply(pts, None, bus_col, INVERSE, cond=cond)
        lp = mix2_logpdf(np.ascontiguousarray(x.value),
                         np.ascontiguousarray(np.broadcast_to(logw[t], (G, logw.shape[1]))),
                         np.ascontiguousarray(np.broadcast_to(means[t], (G,) + means.shape[1:])),
                         covs) + lad.value
        acc = np.logaddexp(acc, lp)
    return DensityGrid.from_spec(spec, np.exp(acc - np.log(len(s))))


# -- Monte-Carlo reference ---------------------------------------------------

def fit_reference(samples: np.ndarray, k: int = 0, seed: int = 0, k_max: int = 5) -> Gmm:
    """Mixture fit of bus voltage samples ``(n, 2)``; ``k = 0`` selects K by BIC."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if x.shape[1] != 2:
        raise ArgumentError("reference samples are (n, 2) pairs of |v|, theta")
    return fit_em(x, k, seed=seed, k_max=k_max)


def reference_samples(network: Network, joint: Gmm, bus: int, n: int, seed: int,
                      threads: int = 1) -> tuple[np.ndarray, Dataset]:
    """Solve ``n`` sampled injections exactly; returns bus voltages and the dataset."""
    data = generate_dataset(network, joint, n, seed, threads=threads)
    npq = len(data.pq_ids)
    return data.states[:, [bus, npq + bus]], data


# -- baselines -------------------------------------------------------------------

@dataclass
class LinearPpfModel:
    """``state = A @ injection + b`` fitted by least squares."""

    A: np.ndarray
    b: np.ndarray
    residual_mae: float
    residual_std: np.ndarray

    def predict(self, injections: np.ndarray) -> np.ndarray:
        return np.atleast_2d(injections) @ self.A.T + self.b

    def pushforward(self, gmm: Gmm) -> Gmm:
        means = gmm.means @ self.A.T + self.b
        covs = np.einsum("ij,kjl,ml->kim", self.A, gmm.covs, self.A)
        covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
        return Gmm(gmm.weights, means, covs)


def _fit_affine(w: np.ndarray, x: np.ndarray) -> LinearPpfModel:
    design = np.concatenate([w, np.ones((len(w), 1))], axis=1)
    if len(w) < design.shape[1] or np.linalg.matrix_rank(design) < design.shape[1]:
        raise DataError("rank-deficient regression for the affine baseline",
                        rows=int(len(w)), columns=int(design.shape[1]))
    coef, *_ = np.linalg.lstsq(design, x, rcond=None)
    A, b = coef[:-1].T, coef[-1]
    res = x - design @ coef
    return LinearPpfModel(A, b, float(np.abs(res).mean()), res.std(axis=0))


def fit_linear_baseline(dataset: Dataset) -> LinearPpfModel:
    if len(dataset) == 0:
        raise DataError("empty dataset")
    return _fit_affine(dataset.injections, dataset.states)


def _state_bus_marginal(g: Gmm, bus: int) -> Gmm:
    n = g.dim // 2
    return g.marginal([bus, n + bus])


def linear_density(model: LinearPpfModel, joint: Gmm, bus: int, spec: GridSpec) -> DensityGrid:
    return DensityGrid.of_gmm(linear_bus_mixture(model, joint, bus), spec)


def linear_bus_mixture(model: LinearPpfModel, joint: Gmm, bus: int) -> Gmm:
    bus_dims(joint.dim // 2, bus)
    return _state_bus_marginal(model.pushforward(joint), bus)


@dataclass
class PiecewiseLinearPpf:
    """One affine map per injection-mixture component (regime)."""

    maps: list[LinearPpfModel]       # one per regime
    regime_of: np.ndarray            # component -> regime index
    joint: Gmm

    def bus_mixture(self, bus: int) -> Gmm:
        bus_dims(self.joint.dim // 2, bus)
        w, mu, cov = [], [], []
        for k in range(self.joint.n_components):
            m = self.maps[self.regime_of[k]]
            comp = Gmm(np.ones(1), self.joint.means[k:k + 1], self.joint.covs[k:k + 1])
            pushed = _state_bus_marginal(m.pushforward(comp), bus)
            w.append(self.joint.weights[k])
            mu.append(pushed.means[0])
            cov.append(pushed.covs[0])
        return Gmm(np.array(w), np.array(mu), np.array(cov))

    def density(self, bus: int, spec: GridSpec) -> DensityGrid:
        return DensityGrid.of_gmm(self.bus_mixture(bus), spec)


def fit_piecewise_linear_baseline(dataset: Dataset, joint: Gmm) -> PiecewiseLinearPpf:
    """Assign rows to their most responsible component, fit an affine map per
    component; components with fewer than ``10 * d`` rows are merged into the
    component with the nearest mean that has enough rows."""
    if len(dataset) == 0:
        raise DataError("empty dataset")
    w, x = dataset.injections, dataset.states
    if joint.dim != w.shape[1]:
        raise ArgumentError(f"joint mixture dimension {joint.dim} != injection width {w.shape[1]}")
    K, d = joint.n_components, joint.dim
    label = np.argmax(joint.component_log_density(w) + np.log(joint.weights), axis=1)
    counts = np.bincount(label, minlength=K)
    need = 10 * d
    big = np.flatnonzero(counts >= need)
    if len(big) == 0:
        warnings.warn("no component has enough rows; falling back to a single affine map",
                      RuntimeWarning, stacklevel=2)
        m = fit_linear_baseline(dataset)
        return PiecewiseLinearPpf([m], np.zeros(K, dtype=int), joint)
    regime_of = np.empty(K, dtype=int)
    for k in range(K):
        if counts[k] >= need:
            regime_of[k] = k
        else:
            dist = ((joint.means[big] - joint.means[k]) ** 2).sum(axis=1)
            regime_of[k] = big[np.argmin(dist)]
            warnings.warn(f"component {k} has {counts[k]} rows (< {need}); merged into "
                          f"component {regime_of[k]}", RuntimeWarning, stacklevel=2)
    maps: list[LinearPpfModel | None] = [None] * K
    for r in np.unique(regime_of):
        rows = np.isin(label, np.flatnonzero(regime_of == r))
        maps[r] = _fit_affine(w[rows], x[rows])
    return PiecewiseLinearPpf(maps, regime_of, joint)


# -- metrics -------------------------------------------------------------------------

def _pair(p: DensityGrid, q: DensityGrid) -> tuple[np.ndarray, np.ndarray, float]:
    if not p.same_axes(q):
        raise ArgumentError("density grids have different axes")
    area = p.cell_area
    pm, qm = p.mass, q.mass
    if pm <= 0 or qm <= 0:
        raise NumericError("density grid has zero mass", mass_p=pm, mass_q=qm)
    return p.values / pm, q.values / qm, area


def _kl(a: np.ndarray, b: np.ndarray, area: float) -> float:
    mask = a > 0
    return float((a[mask] * (np.log(np.maximum(a[mask], KL_FLOOR))
                             - np.log(np.maximum(b[mask], KL_FLOOR)))).sum() * area)


def jsd(p: DensityGrid, q: DensityGrid) -> float:
    """Jensen-Shannon divergence in nats between mass-normalized grids."""
    a, b, area = _pair(p, q)
    m = 0.5 * (a + b)
    val = 0.5 * _kl(a, m, area) + 0.5 * _kl(b, m, area)
    return float(min(max(val, 0.0), np.log(2.0)))


def tvd(p: DensityGrid, q: DensityGrid) -> float:
    """Total variation distance between mass-normalized grids."""
    a, b, area = _pair(p, q)
    return float(min(0.5 * np.abs(a - b).sum() * area, 1.0))


def zscore(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize both arrays by the column statistics of ``truth``."""
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    mu = truth.mean(axis=0)
    sd = truth.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (np.asarray(pred, dtype=float) - mu) / sd, (truth - mu) / sd


def mae(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ArgumentError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return np.abs(pred - truth).mean(axis=0)


def report(bus: int, method: str, T: int | None, est: DensityGrid, ref: DensityGrid,
           runtime_s: float) -> dict:
    return {"bus": int(bus), "method": method, "T": None if T is None else int(T),
            "jsd": jsd(est, ref), "tvd": tvd(est, ref), "mass": est.mass,
            "runtime_s": float(runtime_s)}


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        return False


__all__ = [
    "GridSpec", "DensityGrid", "bus_dims", "scenario_target", "estimate_bus_density",
    "fit_reference", "reference_samples", "LinearPpfModel", "fit_linear_baseline",
    "linear_density", "linear_bus_mixture", "PiecewiseLinearPpf",
    "fit_piecewise_linear_baseline", "jsd", "tvd", "zscore", "mae", "report",
]
