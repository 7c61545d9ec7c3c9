"""Network model, admittance assembly and Newton-Raphson AC power flow.

Only slack and PQ buses are modelled.  Injections are net generation in p.u.
(loads negative) and the random vector always covers PQ buses only, in
ascending bus-id order: ``[p_1..p_n, q_1..q_n]``.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ArgumentError, DataError, DivergenceError, NonConvergenceError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 30
SHARD_SIZE = 512


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    gs: float = 0.0
    bs: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    tap: float = 1.0


@dataclass
class Network:
    base_mva: float
    buses: list[Bus]
    branches: list[Branch]
    name: str = ""

    def __post_init__(self):
        self.buses = sorted(self.buses, key=lambda b: b.id)
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate bus ids", network=self.name)
        for b in self.buses:
            if b.kind not in ("slack", "pq"):
                raise DataError(f"bus {b.id}: kind must be slack or pq, got {b.kind!r}")
        n_slack = sum(b.kind == "slack" for b in self.buses)
        if n_slack != 1:
            raise DataError(f"exactly one slack bus required, found {n_slack}")
        known = set(ids)
        for br in self.branches:
            if br.from_bus not in known or br.to_bus not in known:
                raise DataError(f"branch {br.from_bus}-{br.to_bus} references unknown bus")
            if br.r < 0:
                raise DataError(f"branch {br.from_bus}-{br.to_bus}: negative resistance")
            if br.tap <= 0:
                raise DataError(f"branch {br.from_bus}-{br.to_bus}: tap must be positive")
        if not self._connected():
            raise DataError("network graph is not connected", network=self.name)

    def _connected(self) -> bool:
        adj = {b.id: set() for b in self.buses}
        for br in self.branches:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
        start = self.buses[0].id
        seen, stack = {start}, [start]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == len(self.buses)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @property
    def slack_index(self) -> int:
        return next(k for k, b in enumerate(self.buses) if b.kind == "slack")

    @property
    def pq_index(self) -> np.ndarray:
        return np.array([k for k, b in enumerate(self.buses) if b.kind == "pq"], dtype=int)

    @property
    def pq_ids(self) -> list[int]:
        return [b.id for b in self.buses if b.kind == "pq"]

    @property
    def n_pq(self) -> int:
        return len(self.pq_index)

    def adjacency(self, self_loops: bool = True) -> np.ndarray:
        """Boolean bus adjacency in internal (ascending id) order."""
        idx = self.index
        a = np.zeros((self.n_bus, self.n_bus), dtype=bool)
        for br in self.branches:
            i, j = idx[br.from_bus], idx[br.to_bus]
            a[i, j] = a[j, i] = True
        if self_loops:
            np.fill_diagonal(a, True)
        return a

    # -- JSON ----------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "base_mva": self.base_mva,
            "buses": [{"id": b.id, "kind": b.kind, "gs": b.gs, "bs": b.bs} for b in self.buses],
            "branches": [
                {"from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x, "b": br.b, "tap": br.tap}
                for br in self.branches
            ],
        }

    @classmethod
    def from_json(cls, data: dict, name: str = "") -> "Network":
        try:
            buses = [Bus(int(b["id"]), str(b["kind"]), float(b.get("gs", 0.0)), float(b.get("bs", 0.0)))
                     for b in data["buses"]]
            branches = [
                Branch(int(br["from"]), int(br["to"]), float(br["r"]), float(br["x"]),
                       float(br.get("b", 0.0)), float(br.get("tap", 1.0)))
                for br in data["branches"]
            ]
            return cls(float(data["base_mva"]), buses, branches, name=name)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed network JSON: {exc}") from None


def load_network(path: str | Path) -> Network:
    path = Path(path)
    with open(path) as fh:
        return Network.from_json(json.load(fh), name=path.stem)


def bundled_case(name: str) -> Network:
    """One of the cases shipped in ``flowppf/data`` (``case2``, ``case6_radial``, ``case6_mesh``)."""
    return load_network(Path(__file__).parent / "data" / f"{name}.json")


@dataclass
class Injection:
    p: np.ndarray
    q: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.q])

    @classmethod
    def from_vector(cls, w: np.ndarray) -> "Injection":
        n = len(w) // 2
        return cls(np.asarray(w[:n], float), np.asarray(w[n:], float))


@dataclass
class PfState:
    vm: np.ndarray
    va: np.ndarray
    iterations: int = 0
    mismatch: float = 0.0

    @property
    def voltage(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)


def build_admittance(network: Network) -> np.ndarray:
    """Dense complex bus admittance matrix, buses in ascending id order."""
    idx = network.index
    n = network.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in network.branches:
        if br.r == 0 and br.x == 0:
            raise DataError(f"zero-impedance branch {br.from_bus}-{br.to_bus}")
        ys = 1.0 / complex(br.r, br.x)
        i, j = idx[br.from_bus], idx[br.to_bus]
        ych = 0.5j * br.b
        y[i, i] += (ys + ych) / br.tap ** 2
        y[j, j] += ys + ych
        y[i, j] -= ys / br.tap
        y[j, i] -= ys / br.tap
    for k, b in enumerate(network.buses):
        y[k, k] += complex(b.gs, b.bs)
    return y


def _power(y: np.ndarray, v: np.ndarray) -> np.ndarray:
    # v: (..., N) complex -> complex injections S = V conj(Y V)
    return v * np.conj(v @ y.T)


def pf_residual(network: Network, state: PfState, inj: Injection,
                y: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Specified minus computed (P, Q) at PQ buses."""
    pq = network.pq_index
    if len(inj.p) != len(pq) or len(inj.q) != len(pq):
        raise ShapeError(f"injection length {len(inj.p)} != {len(pq)} PQ buses")
    if len(state.vm) != network.n_bus:
        raise ShapeError(f"state has {len(state.vm)} buses, network {network.n_bus}")
    y = build_admittance(network) if y is None else y
    s = _power(y, state.voltage)[pq]
    return inj.p - s.real, inj.q - s.imag


def _jacobian(y: np.ndarray, v: np.ndarray, pq: np.ndarray) -> np.ndarray:
    # batched polar Jacobian d[P;Q]/d[va_pq; vm_pq], v: (S, N)
    ibus = v @ y.T
    vn = v / np.abs(v)
    dva = 1j * v[:, :, None] * np.conj(np.eye(len(y))[None] * ibus[:, None, :] - y[None] * v[:, None, :])
    dvm = v[:, :, None] * np.conj(y[None] * vn[:, None, :]) + np.conj(ibus)[:, :, None] * (
        np.eye(len(y))[None] * vn[:, None, :])
    dva = dva[:, pq][:, :, pq]
    dvm = dvm[:, pq][:, :, pq]
    top = np.concatenate([dva.real, dvm.real], axis=2)
    bot = np.concatenate([dva.imag, dvm.imag], axis=2)
    return np.concatenate([top, bot], axis=1)


@dataclass
class BatchResult:
    vm: np.ndarray
    va: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    mismatch: np.ndarray
    singular: np.ndarray


def solve_pf_batch(network: Network, injections: np.ndarray, tol: float = DEFAULT_TOL,
                   max_iter: int = DEFAULT_MAX_ITER, y: np.ndarray | None = None) -> BatchResult:
    """Newton-Raphson on many injection vectors at once.

    Each row follows the trajectory it would follow alone, up to rounding in
    the batched linear solve: rows are frozen as soon as they converge.  ``iterations`` counts mismatch
    evaluations, so a flat start that already satisfies ``tol`` reports 1.
    """
    if tol <= 0:
        raise ArgumentError("tol must be positive")
    w = np.atleast_2d(np.asarray(injections, dtype=float))
    n_pq = network.n_pq
    if w.shape[1] != 2 * n_pq:
        raise ShapeError(f"injection width {w.shape[1]} != 2 x {n_pq} PQ buses")
    y = build_admittance(network) if y is None else y
    pq = network.pq_index
    n_s = w.shape[0]
    vm = np.ones((n_s, network.n_bus))
    va = np.zeros((n_s, network.n_bus))
    converged = np.zeros(n_s, dtype=bool)
    singular = np.zeros(n_s, dtype=bool)
    iterations = np.zeros(n_s, dtype=int)
    mismatch = np.full(n_s, np.inf)
    active = np.arange(n_s)
    for it in range(1, max_iter + 1):
        if active.size == 0:
            break
        v = vm[active] * np.exp(1j * va[active])
        s = _power(y, v)[:, pq]
        f = np.concatenate([w[active, :n_pq] - s.real, w[active, n_pq:] - s.imag], axis=1)
        norm = np.abs(f).max(axis=1)
        iterations[active] = it
        mismatch[active] = norm
        done = norm < tol
        converged[active[done]] = True
        keep = ~done & np.isfinite(norm)
        active, v, f = active[keep], v[keep], f[keep]
        if active.size == 0 or it == max_iter:
            break
        jac = _jacobian(y, v, pq)
        ok = np.abs(np.linalg.det(jac)) > 1e-300
        ok &= np.all(np.isfinite(jac), axis=(1, 2))
        singular[active[~ok]] = True
        active, jac, f = active[ok], jac[ok], f[ok]
        if active.size == 0:
            break
        dx = np.linalg.solve(jac, f[:, :, None])[:, :, 0]
        va[active[:, None], pq[None, :]] += dx[:, :n_pq]
        vm[active[:, None], pq[None, :]] += dx[:, n_pq:]
    return BatchResult(vm, va, converged, iterations, mismatch, singular)


def solve_pf(network: Network, inj: Injection, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER) -> PfState:
    res = solve_pf_batch(network, inj.vector()[None], tol, max_iter)
    if res.singular[0]:
        raise DivergenceError("power-flow Jacobian is singular", iterations=int(res.iterations[0]))
    if not res.converged[0]:
        raise NonConvergenceError(
            f"no convergence in {max_iter} iterations (mismatch {res.mismatch[0]:.3e})",
            mismatch=float(res.mismatch[0]), iterations=int(res.iterations[0]))
    return PfState(res.vm[0], res.va[0], int(res.iterations[0]), float(res.mismatch[0]))


def branch_flows(network: Network, state: PfState) -> tuple[np.ndarray, np.ndarray]:
    """Complex power entering each branch at its from and to ends."""
    idx = network.index
    v = state.voltage
    s_from, s_to = [], []
    for br in network.branches:
        ys = 1.0 / complex(br.r, br.x)
        ych = 0.5j * br.b
        i, j = idx[br.from_bus], idx[br.to_bus]
        i_f = (ys + ych) / br.tap ** 2 * v[i] - ys / br.tap * v[j]
        i_t = (ys + ych) * v[j] - ys / br.tap * v[i]
        s_from.append(v[i] * np.conj(i_f))
        s_to.append(v[j] * np.conj(i_t))
    return np.array(s_from), np.array(s_to)


def slack_injection(network: Network, state: PfState) -> complex:
    s = _power(build_admittance(network), state.voltage)
    return complex(s[network.slack_index])


# -- datasets ----------------------------------------------------------

@dataclass
class Dataset:
    """Paired injections ``[p, q]`` and PQ-bus states ``[vm, va]``."""

    pq_ids: list[int]
    injections: np.ndarray
    states: np.ndarray
    rejected: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.injections)

    def __iter__(self) -> Iterator[tuple[Injection, PfState]]:
        n = len(self.pq_ids)
        for w, x in zip(self.injections, self.states):
            yield Injection(w[:n].copy(), w[n:].copy()), PfState(x[:n].copy(), x[n:].copy())

    @property
    def n_pq(self) -> int:
        return len(self.pq_ids)

    def header(self) -> list[str]:
        return ([f"p_{i}" for i in self.pq_ids] + [f"q_{i}" for i in self.pq_ids]
                + [f"vm_{i}" for i in self.pq_ids] + [f"va_{i}" for i in self.pq_ids])

    def subset(self, rows) -> "Dataset":
        return Dataset(self.pq_ids, self.injections[rows], self.states[rows], 0, dict(self.meta))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.header())
            for w, x in zip(self.injections, self.states):
                wr.writerow([repr(float(v)) for v in np.concatenate([w, x])])

    @classmethod
    def from_csv(cls, path: str | Path) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise DataError(f"{path}: empty dataset file")
        head = rows[0]
        n = len(head) // 4
        if len(head) != 4 * n or n == 0:
            raise DataError(f"{path}: header must hold p_, q_, vm_, va_ blocks of equal length")
        ids = []
        for k, prefix in enumerate(("p_", "q_", "vm_", "va_")):
            block = head[k * n:(k + 1) * n]
            if not all(h.startswith(prefix) for h in block):
                raise DataError(f"{path}: expected {prefix}* columns, got {block}")
            these = [int(h[len(prefix):]) for h in block]
            if ids and these != ids:
                raise DataError(f"{path}: bus id order differs between column blocks")
            ids = these
        try:
            data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, 4 * n)
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from None
        return cls(ids, data[:, :2 * n], data[:, 2 * n:])


def _shard(network: Network, gmm, n: int, seed: int, shard: int, tol: float, max_iter: int,
           y: np.ndarray) -> tuple[np.ndarray, np.ndarray, int, int]:
    rng = np.random.default_rng([seed, shard])
    got_w, got_x = [], []
    have = rejected = attempts = 0
    while have < n:
        need = n - have
        w = gmm.sample(need, rng)
        res = solve_pf_batch(network, w, tol, max_iter, y)
        attempts += need
        ok = res.converged & np.all(res.vm > 0, axis=1)
        rejected += int((~ok).sum())
        pq = network.pq_index
        got_w.append(w[ok])
        got_x.append(np.concatenate([res.vm[ok][:, pq], res.va[ok][:, pq]], axis=1))
        have += int(ok.sum())
        if attempts >= 50 and rejected > 0.2 * attempts:
            break
    return np.concatenate(got_w)[:n], np.concatenate(got_x)[:n], rejected, attempts


def generate_dataset(network: Network, gmm, n: int, seed: int, tol: float = DEFAULT_TOL,
                     max_iter: int = DEFAULT_MAX_ITER, threads: int = 1) -> Dataset:
    """Sample injections from ``gmm`` and solve each with Newton-Raphson.

    Work is split into fixed-size shards whose RNG streams derive from
    ``(seed, shard)``, so the result does not depend on ``threads``.
    Non-convergent draws are rejected and redrawn.
    """
    if gmm.dim != 2 * network.n_pq:
        raise DataError(f"gmm dimension {gmm.dim} != 2 x {network.n_pq} PQ buses")
    if n <= 0:
        return Dataset(network.pq_ids, np.zeros((0, gmm.dim)), np.zeros((0, gmm.dim)))
    y = build_admittance(network)
    sizes = [min(SHARD_SIZE, n - s) for s in range(0, n, SHARD_SIZE)]
    args = [(network, gmm, m, seed, k, tol, max_iter, y) for k, m in enumerate(sizes)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda a: _shard(*a), args))
    else:
        parts = [_shard(*a) for a in args]
    rejected = sum(p[2] for p in parts)
    attempts = sum(p[3] for p in parts)
    if rejected > 0.2 * attempts:
        raise DataError(
            f"{rejected}/{attempts} power-flow solves failed; injection distribution "
            "is incompatible with the network", rejected=rejected, attempts=attempts)
    if rejected:
        logger.info("generate_dataset: rejected %d of %d draws", rejected, attempts)
    w = np.concatenate([p[0] for p in parts])
    x = np.concatenate([p[1] for p in parts])
    return Dataset(network.pq_ids, w, x, rejected, {"seed": seed, "attempts": attempts})
