"""Bidirectional training of the flow, the learned power-flow surrogate,
optimizer wiring and learning-rate schedules."""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor_ad as ad
from .errors import ArgumentError, DataError, NumericError, QualityError
from .flow import FORWARD, INVERSE, ImnfModel, Normalization
from .grid import Dataset, Network, build_admittance, solve_pf_batch

logger = logging.getLogger(__name__)


# -- schedule ------------------------------------------------------------

@dataclass
class Schedule:
    kind: str = "constant"
    lr: float = 1e-3
    lr_max: float = 5e-4
    lr_min: float = 5e-6
    period: int = 1000

    def __post_init__(self):
        if self.kind not in ("constant", "circular"):
            raise ArgumentError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "circular" and (self.lr_min > self.lr_max or self.period < 1):
            raise ArgumentError("circular schedule needs lr_min <= lr_max and period >= 1")


def lr_at(schedule: Schedule, step: int) -> float:
    """Constant, or a triangular wave starting at ``lr_min`` and peaking at half period."""
    if step < 0:
        raise ArgumentError("step must be >= 0")
    if schedule.kind == "constant":
        return schedule.lr
    phase = (step % schedule.period) / schedule.period
    tri = 2.0 * phase if phase <= 0.5 else 2.0 * (1.0 - phase)
    return schedule.lr_min + (schedule.lr_max - schedule.lr_min) * tri


@dataclass
class TrainConfig:
    omega: float = 0.5
    batch: int = 64
    steps: int = 1000
    schedule: Schedule = field(default_factory=Schedule)
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    seed: int = 0
    source: str = "dataset"
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = Schedule(**self.schedule)
        if not 0.0 <= self.omega <= 1.0:
            raise ArgumentError("omega must lie in [0, 1]")
        if self.batch < 1:
            raise ArgumentError("batch must be >= 1")
        if self.source not in ("dataset", "surrogate", "pf"):
            raise ArgumentError(f"unknown data source {self.source!r}")

    @classmethod
    def pf_task(cls, **kw) -> "TrainConfig":
        return cls(**{"schedule": Schedule("constant", lr=1e-3), "batch": 64, "optimizer": "adam", **kw})

    @classmethod
    def ppf_task(cls, **kw) -> "TrainConfig":
        return cls(**{"schedule": Schedule("circular", lr_max=5e-4, lr_min=5e-6, period=1000),
                      "batch": 240, "optimizer": "adamw", **kw})


# -- batches and loss ------------------------------------------------------

@dataclass
class Batch:
    pq: np.ndarray        # (B, 2) own injection of the target bus
    scenario: np.ndarray  # (B, 2n-2) other buses' injections
    v: np.ndarray         # (B, 2) |v|, theta of the target bus
    bus: np.ndarray       # (B,) target bus (0-based among PQ buses)


def make_batch(injections: np.ndarray, states: np.ndarray, bus: np.ndarray) -> Batch:
    w = np.atleast_2d(injections)
    x = np.atleast_2d(states)
    n = w.shape[1] // 2
    bus = np.asarray(bus, dtype=int)
    rows = np.arange(len(w))
    pq = np.stack([w[rows, bus], w[rows, n + bus]], axis=1)
    v = np.stack([x[rows, bus], x[rows, n + bus]], axis=1)
    keep = np.ones_like(w, dtype=bool)
    keep[rows, bus] = False
    keep[rows, n + bus] = False
    return Batch(pq, w[keep].reshape(len(w), 2 * n - 2), v, bus)


def bidirectional_loss(model: ImnfModel, batch: Batch, omega: float):
    """``omega * MSE(f(p,q|s), v) + (1 - omega) * MSE(f^-1(v|s), (p,q))``.

    Both terms are taken in the model's normalized coordinates.  Returns the
    loss Tensor and a dict with the two components as floats.
    """
    if not 0.0 <= omega <= 1.0:
        raise ArgumentError("omega must lie in [0, 1]")
    cond = model.embed(batch.scenario, batch.bus)
    ctxs = model.contexts(cond)
    in_mean, in_scale, out_mean, out_scale = model._stats(batch.bus)
    x_n = (batch.pq - in_mean) / in_scale
    v_n = (batch.v - out_mean) / out_scale
    terms = {}
    loss = 0.0
    if omega > 0:
        y_hat, _ = model.apply_normalized(x_n, ctxs, FORWARD)
        err = y_hat - v_n
        terms["w2o"] = ad.mean(err * err)
        loss = omega * terms["w2o"]
    if omega < 1:
        x_hat, _ = model.apply_normalized(v_n, ctxs, INVERSE)
        err = x_hat - x_n
        terms["o2w"] = ad.mean(err * err)
        loss = loss + (1.0 - omega) * terms["o2w"]
    loss = ad.as_tensor(loss)
    if not np.isfinite(loss.value):
        with ad.no_grad():
            yf, _ = model.apply_normalized(x_n, ctxs, FORWARD)
            bad = np.flatnonzero(~np.all(np.isfinite(yf.value), axis=1)).tolist()
        raise NumericError("non-finite loss", rows=bad[:10])
    comps = {k: float(v.value) for k, v in terms.items()}
    comps.setdefault("w2o", float("nan"))
    comps.setdefault("o2w", float("nan"))
    return loss, comps


# -- sources -----------------------------------------------------------------

class DatasetSource:
    name = "dataset"

    def __init__(self, dataset: Dataset):
        if len(dataset) == 0:
            raise DataError("empty dataset")
        self.dataset = dataset

    def draw(self, n: int, rng: np.random.Generator):
        rows = rng.integers(0, len(self.dataset), size=n)
        return self.dataset.injections[rows], self.dataset.states[rows]


class PfSource:
    """Fresh injections from the mixture, solved exactly with Newton-Raphson."""

    name = "pf"

    def __init__(self, network: Network, gmm, tol: float = 1e-8, max_iter: int = 30):
        self.network, self.gmm, self.tol, self.max_iter = network, gmm, tol, max_iter
        self._y = build_admittance(network)

    def draw(self, n: int, rng: np.random.Generator):
        ws, xs, have = [], [], 0
        pq = self.network.pq_index
        tries = 0
        while have < n:
            w = self.gmm.sample(n - have, rng)
            res = solve_pf_batch(self.network, w, self.tol, self.max_iter, self._y)
            ok = res.converged
            ws.append(w[ok])
            xs.append(np.concatenate([res.vm[ok][:, pq], res.va[ok][:, pq]], axis=1))
            have += int(ok.sum())
            tries += 1
            if tries > 50:
                raise DataError("power-flow source keeps failing to converge")
        return np.concatenate(ws)[:n], np.concatenate(xs)[:n]


class SurrogateSource:
    name = "surrogate"

    def __init__(self, surrogate: "Surrogate", gmm):
        self.surrogate, self.gmm = surrogate, gmm

    def draw(self, n: int, rng: np.random.Generator):
        w = self.gmm.sample(n, rng)
        return w, self.surrogate.predict(w)


def fit_normalization(source, n: int = 2000, seed: int = 12345) -> Normalization:
    w, x = source.draw(n, np.random.default_rng(seed))
    return Normalization.from_data(w, x)


# -- surrogate -----------------------------------------------------------------

class Surrogate:
    """tanh MLP from the full injection vector to the full PQ-bus state."""

    def __init__(self, dim: int, hidden: int | None = None, layers: int = 3, seed: int = 0):
        self.dim = dim
        self.hidden = hidden or 2 * dim      # 4 x (#PQ buses)
        self.layers = layers
        self.params = ad.ParamStore()
        rng = np.random.default_rng(seed)
        sizes = [dim] + [self.hidden] * layers + [dim]
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params.add(f"w{k}", rng.standard_normal((a, b)) / np.sqrt(a))
            self.params.add(f"b{k}", np.zeros(b))
        self.in_mean = np.zeros(dim)
        self.in_scale = np.ones(dim)
        self.out_mean = np.zeros(dim)
        self.out_scale = np.ones(dim)
        self.meta: dict = {}

    def _net(self, z):
        h = ad.as_tensor(z)
        n_layers = self.layers + 1
        for k in range(n_layers):
            h = ad.matmul(h, self.params[f"w{k}"]) + self.params[f"b{k}"]
            if k < n_layers - 1:
                h = ad.tanh(h)
        return h

    def predict(self, injections: np.ndarray) -> np.ndarray:
        w = np.atleast_2d(injections)
        with ad.no_grad():
            out = self._net((w - self.in_mean) / self.in_scale).value
        return out * self.out_scale + self.out_mean

    def to_json(self) -> dict:
        return {"dim": self.dim, "hidden": self.hidden, "layers": self.layers,
                "in_mean": self.in_mean.tolist(), "in_scale": self.in_scale.tolist(),
                "out_mean": self.out_mean.tolist(), "out_scale": self.out_scale.tolist(),
                "meta": self.meta, "params": self.params.to_dict()}

    @classmethod
    def from_json(cls, data: dict) -> "Surrogate":
        s = cls(int(data["dim"]), int(data["hidden"]), int(data["layers"]))
        for k in ("in_mean", "in_scale", "out_mean", "out_scale"):
            setattr(s, k, np.asarray(data[k], dtype=float))
        s.meta = dict(data.get("meta", {}))
        s.params.load_dict(data["params"])
        return s

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path: str | Path) -> "Surrogate":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _scale(a: np.ndarray) -> np.ndarray:
    s = a.std(axis=0)
    return np.where(s > 1e-12, s, 1.0)


def train_surrogate(dataset: Dataset, steps: int = 3000, lr: float = 3e-3, batch: int = 128,
                    seed: int = 0, val_fraction: float = 0.2, max_val_mae: float | None = None,
                    hidden: int | None = None) -> Surrogate:
    """Fit the surrogate with Adam on a train/validation split.

    MAE values stored in ``meta`` are in state units (p.u. and radians),
    averaged over columns.
    """
    n = len(dataset)
    if n == 0:
        raise DataError("empty dataset")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_val = int(round(val_fraction * n)) if n >= 5 else 0
    val, tr = order[:n_val], order[n_val:]
    w, x = dataset.injections, dataset.states
    sur = Surrogate(w.shape[1], hidden=hidden, seed=seed)
    sur.in_mean, sur.in_scale = w[tr].mean(axis=0), _scale(w[tr])
    sur.out_mean, sur.out_scale = x[tr].mean(axis=0), _scale(x[tr])
    zin = (w - sur.in_mean) / sur.in_scale
    zout = (x - sur.out_mean) / sur.out_scale
    opt = ad.make_optimizer("adam", sur.params)
    # second half of one triangle: starts at lr, decays linearly to lr/100 at the last step
    sched = Schedule("circular", lr_max=lr, lr_min=lr * 0.01, period=max(2, 2 * steps))
    for step in range(steps):
        rows = tr[rng.integers(0, len(tr), size=min(batch, len(tr)))]
        sur.params.zero_grad()
        err = sur._net(zin[rows]) - zout[rows]
        loss = ad.mean(err * err)
        ad.backward(loss)
        opt.step(lr_at(sched, step + steps))
    sur.meta = {"n_train": int(len(tr)), "n_val": int(len(val)), "steps": steps, "seed": seed,
                "train_mae": float(np.abs(sur.predict(w[tr]) - x[tr]).mean())}
    if len(val):
        sur.meta["val_mae"] = float(np.abs(sur.predict(w[val]) - x[val]).mean())
        if max_val_mae is not None and sur.meta["val_mae"] > max_val_mae:
            raise QualityError(f"surrogate validation MAE {sur.meta['val_mae']:.3e} above "
                               f"threshold {max_val_mae:.3e}", **sur.meta)
    return sur


# -- IMNF training -------------------------------------------------------------

@dataclass
class TraceRow:
    step: int
    lr: float
    loss: float
    loss_w2o: float
    loss_o2w: float


class TrainingAborted(NumericError):
    """Loss became non-finite; ``checkpoint`` holds the last good parameters."""


@dataclass
class TrainResult:
    model: ImnfModel
    trace: list[TraceRow]
    checkpoints: list[dict] = field(default_factory=list)

    def trace_to_csv(self, path: str | Path) -> None:
        write_trace(self.trace, path)


def write_trace(trace: list[TraceRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "lr", "loss", "loss_w2o", "loss_o2w"])
        for r in trace:
            wr.writerow([r.step, repr(r.lr), repr(r.loss), repr(r.loss_w2o), repr(r.loss_o2w)])


def train_imnf(model: ImnfModel, source, config: TrainConfig,
               callback: Callable[[int, ImnfModel], None] | None = None) -> TrainResult:
    """Training loop: draw injections, pick one target bus per row, take a
    bidirectional-loss optimizer step.  Mutates and returns ``model``."""
    if getattr(source, "name", None) != config.source:
        raise ArgumentError(f"source {getattr(source, 'name', source)!r} does not match "
                            f"config.source {config.source!r}")
    rng = np.random.default_rng([config.seed, 0xF10])
    opt = ad.make_optimizer(config.optimizer, model.params, config.beta1, config.beta2,
                            config.eps, config.weight_decay)
    trace: list[TraceRow] = []
    checkpoints: list[dict] = []
    last_good = copy.deepcopy(model.params.to_dict())
    n = model.n_pq
    for step in range(config.steps):
        w, x = source.draw(config.batch, rng)
        bus = rng.integers(0, n, size=config.batch)
        batch = make_batch(w, x, bus)
        model.params.zero_grad()
        try:
            loss, comps = bidirectional_loss(model, batch, config.omega)
        except NumericError as exc:
            model.params.load_dict(last_good)
            raise TrainingAborted(f"step {step}: {exc.message}", checkpoint=last_good,
                                  trace=trace, step=step) from None
        ad.backward(loss)
        lr = lr_at(config.schedule, step)
        opt.step(lr)
        trace.append(TraceRow(step, lr, float(loss.value), comps["w2o"], comps["o2w"]))
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            last_good = copy.deepcopy(model.params.to_dict())
            checkpoints.append({"step": step + 1, "params": last_good})
        if callback is not None:
            callback(step, model)
    return TrainResult(model, trace, checkpoints)


def heldout_mae(model: ImnfModel, dataset: Dataset) -> dict[str, float]:
    """Normalized forward and inverse MAE over every (row, bus) pair."""
    n = model.n_pq
    w, x = dataset.injections, dataset.states
    rows = np.repeat(np.arange(len(w)), n)
    bus = np.tile(np.arange(n), len(w))
    b = make_batch(w[rows], x[rows], bus)
    in_mean, in_scale, out_mean, out_scale = model._stats(b.bus)
    y_hat, _ = model.forward(b.pq, b.scenario, b.bus)
    p_hat, _ = model.inverse(b.v, b.scenario, b.bus)
    fwd = np.abs((y_hat - b.v) / out_scale)
    inv = np.abs((p_hat - b.pq) / in_scale)
    return {"forward": float(fwd.mean()), "inverse": float(inv.mean()),
            "vm": float(fwd[:, 0].mean()), "va": float(fwd[:, 1].mean()),
            "p": float(inv[:, 0].mean()), "q": float(inv[:, 1].mean())}
