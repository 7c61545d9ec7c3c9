"""Conditional invertible flow for one bus: (p, q) <-> (|v|, theta) given the scenario.

Layers in data-flow order: ``n_sfcp`` coupling blocks (trainable 2x2 linear
map followed by two alternating affine couplings), then ``n_sf``
rational-quadratic spline blocks.  All layers act in normalized coordinates;
the model applies and undoes per-bus normalization and accounts for it in
the log-determinant.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from . import tensor_ad as ad
from .conditioner import Condition, FnnConditioner, GatConditioner
from .errors import ArgumentError, NumericError, StateError

FORWARD, INVERSE = "forward", "inverse"
S_CLAMP = 3.0
MIN_BIN = 1e-3
MIN_DERIV = 1e-3
# softplus(raw + _D_SHIFT) + MIN_DERIV == 1 at raw == 0
_D_SHIFT = float(np.log(np.expm1(1.0 - MIN_DERIV)))


def _check_direction(direction: str) -> None:
    if direction not in (FORWARD, INVERSE):
        raise ArgumentError(f"direction must be 'forward' or 'inverse', got {direction!r}")


# -- rational-quadratic spline ------------------------------------------

def spline_create(raw, bound: float, min_bin: float = MIN_BIN):
    """Turn ``3K-1`` raw values per row into widths, heights and knot derivatives.

    Widths and heights are softmax fractions with a floor of ``min_bin`` of
    the range, scaled to ``2*bound``.  Boundary derivatives are 1.
    """
    raw = ad.as_tensor(raw)
    if raw.ndim == 1:
        raw = ad.reshape(raw, (1, raw.shape[0]))
    m = raw.shape[1]
    if (m + 1) % 3:
        raise ArgumentError(f"raw spline parameters must have length 3K-1, got {m}")
    nb = (m + 1) // 3
    if nb < 2:
        raise ArgumentError("need at least 2 bins")
    scale = 2.0 * bound * (1.0 - min_bin * nb)
    widths = ad.softmax(raw[:, :nb]) * scale + 2.0 * bound * min_bin
    heights = ad.softmax(raw[:, nb:2 * nb]) * scale + 2.0 * bound * min_bin
    inner = ad.softplus(raw[:, 2 * nb:] + _D_SHIFT) + MIN_DERIV
    ones = np.ones((raw.shape[0], 1))
    derivs = ad.concat([ones, inner, ones], axis=1)
    return widths, heights, derivs


def _cumsum_matrix(nb: int) -> np.ndarray:
    # (K, K+1): knots = widths @ M gives [0, w0, w0+w1, ...]
    return np.triu(np.ones((nb, nb + 1)), k=1)


def _pick(t, onehot):
    return ad.sum_(t * onehot, axis=1)


def rqs(x, widths, heights, derivs, bound: float, inverse: bool = False):
    """Elementwise monotone rational-quadratic spline with identity tails.

    Returns ``(output, log|d output / d input|)`` as Tensors of shape (rows,).
    Uses the compiled kernel when no graph needs recording.
    """
    x = ad.as_tensor(x)
    if not ad.grad_enabled() or not any(t.requires_grad for t in (x, widths, heights, derivs)):
        fn = kernels.rqs_inverse if inverse else kernels.rqs_forward
        y, lad = fn(x.value, widths.value, heights.value, derivs.value, bound)
        return ad.Tensor(y), ad.Tensor(lad)
    nb = widths.shape[1]
    inside = (np.abs(x.value) <= bound).astype(float)
    xin = x * inside
    cum = _cumsum_matrix(nb)
    cx = ad.matmul(widths, cum) - bound
    cy = ad.matmul(heights, cum) - bound
    search = cy.value if inverse else cx.value
    b = np.clip((xin.value[:, None] >= search[:, 1:-1]).sum(axis=1), 0, nb - 1)
    oh = np.zeros(widths.shape)
    oh[np.arange(len(b)), b] = 1.0
    x0 = _pick(cx[:, :nb], oh)
    y0 = _pick(cy[:, :nb], oh)
    wk = _pick(widths, oh)
    hk = _pick(heights, oh)
    dk = _pick(derivs[:, :nb], oh)
    dk1 = _pick(derivs[:, 1:], oh)
    sk = hk / wk
    c2 = dk1 + dk - 2.0 * sk
    if inverse:
        dy = xin - y0
        a = hk * (sk - dk) + dy * c2
        bb = hk * dk - dy * c2
        c = -1.0 * sk * dy
        disc = bb * bb - 4.0 * a * c
        if np.any(disc.value < 0) or np.any(~np.isfinite(disc.value)):
            raise StateError("spline inverse: negative discriminant (non-monotone spline)")
        root = ad.exp(0.5 * ad.log(disc))
        xi = (2.0 * c) / (-1.0 * bb - root)
        out = x0 + xi * wk
    else:
        xi = (xin - x0) / wk
    t = xi * (1.0 - xi)
    den = sk + c2 * t
    num = sk * sk * (dk1 * xi * xi + 2.0 * sk * t + dk * (1.0 - xi) * (1.0 - xi))
    lad = ad.log(num) - 2.0 * ad.log(den)
    if inverse:
        lad = -1.0 * lad
    else:
        out = y0 + hk * (sk * xi * xi + dk * t) / den
    outside = 1.0 - inside
    return out * inside + x * outside, lad * inside


# -- layers --------------------------------------------------------------

def _col(t, k: int):
    return t[:, k:k + 1]


def _flat(t):
    return ad.reshape(t, (t.shape[0],))


def _swap(t):
    return ad.concat([_col(t, 1), _col(t, 0)], axis=1)


class SfcpLayer:
    """Trainable 2x2 linear map (LU form) followed by two affine couplings."""

    def __init__(self, name: str, store: ad.ParamStore, make_conditioner):
        self.name = name
        self.lu = store.add(f"{name}.lu", np.zeros(4))   # log u11, log u22, u12, l21
        self.net1 = make_conditioner(f"{name}.st1", 2)
        self.net2 = make_conditioner(f"{name}.st2", 2)

    @property
    def conditioners(self):
        return (self.net1, self.net2)

    def matrix(self) -> np.ndarray:
        a, b, u, l = self.lu.value
        return np.array([[1.0, 0.0], [l, 1.0]]) @ np.array([[np.exp(a), u], [0.0, np.exp(b)]])

    def _st(self, net, coord, ctx):
        out = net(coord, ctx)
        if not np.all(np.isfinite(out.value)):
            raise NumericError(f"{net.prefix}: non-finite conditioner output", layer=self.name)
        return _flat(S_CLAMP * ad.tanh(_col(out, 0))), _flat(_col(out, 1))

    def apply(self, z, ctxs, direction: str = FORWARD):
        _check_direction(direction)
        z = ad.as_tensor(z)
        la, lb, u, l = self.lu[0], self.lu[1], self.lu[2], self.lu[3]
        ea, eb = ad.exp(la), ad.exp(lb)
        if direction == FORWARD:
            p, q = z[:, 0], z[:, 1]
            # A = L U with L = [[1, 0], [l, 1]], U = [[e^a, u], [0, e^b]]
            p1 = ea * p + u * q
            q1 = l * p1 + eb * q
            s1, t1 = self._st(self.net1, ad.reshape(p1, (-1, 1)), ctxs[0])
            q2 = q1 * ad.exp(s1) + t1
            s2, t2 = self._st(self.net2, ad.reshape(q2, (-1, 1)), ctxs[1])
            p2 = p1 * ad.exp(s2) + t2
            out = ad.concat([ad.reshape(p2, (-1, 1)), ad.reshape(q2, (-1, 1))], axis=1)
            return out, la + lb + s1 + s2
        p2, q2 = z[:, 0], z[:, 1]
        s2, t2 = self._st(self.net2, ad.reshape(q2, (-1, 1)), ctxs[1])
        p1 = (p2 - t2) * ad.exp(-1.0 * s2)
        s1, t1 = self._st(self.net1, ad.reshape(p1, (-1, 1)), ctxs[0])
        q1 = (q2 - t1) * ad.exp(-1.0 * s1)
        q = (q1 - l * p1) / eb
        p = (p1 - u * q) / ea
        out = ad.concat([ad.reshape(p, (-1, 1)), ad.reshape(q, (-1, 1))], axis=1)
        return out, -1.0 * (la + lb + s1 + s2)


class SplineLayer:
    """Autoregressive pair of splines: q from u1(p), then p from u2(q_new)."""

    def __init__(self, name: str, make_conditioner, bins: int, bound: float):
        if bins < 2 or bound <= 0:
            raise ArgumentError("spline layer needs bins >= 2 and bound > 0")
        self.name, self.bins, self.bound = name, bins, bound
        self.net1 = make_conditioner(f"{name}.u1", 3 * bins - 1)
        self.net2 = make_conditioner(f"{name}.u2", 3 * bins - 1)

    @property
    def conditioners(self):
        return (self.net1, self.net2)

    def _params(self, net, coord, ctx):
        raw = net(ad.reshape(coord, (-1, 1)), ctx)
        if not np.all(np.isfinite(raw.value)):
            raise NumericError(f"{net.prefix}: non-finite conditioner output", layer=self.name)
        return spline_create(raw, self.bound)

    def apply(self, z, ctxs, direction: str = FORWARD):
        _check_direction(direction)
        z = ad.as_tensor(z)
        p, q = z[:, 0], z[:, 1]
        if direction == FORWARD:
            q1, l1 = rqs(q, *self._params(self.net1, p, ctxs[0]), self.bound)
            p1, l2 = rqs(p, *self._params(self.net2, q1, ctxs[1]), self.bound)
        else:
            p1, l2 = rqs(p, *self._params(self.net2, q, ctxs[1]), self.bound, inverse=True)
            q1, l1 = rqs(q, *self._params(self.net1, p1, ctxs[0]), self.bound, inverse=True)
        out = ad.concat([ad.reshape(p1, (-1, 1)), ad.reshape(q1, (-1, 1))], axis=1)
        return out, l1 + l2


# -- composed model ------------------------------------------------------

@dataclass
class FlowConfig:
    n_pq: int
    n_sfcp: int = 4
    n_sf: int = 4
    bins: int = 8
    bound: float = 4.0
    conditioner: str = "fnn"
    hidden: list = field(default_factory=lambda: [32, 32])
    gat_width: int = 16
    gat_layers: int = 2
    gat_readout: int = 32
    seed: int = 0
    # Exchange the two input coordinates before the first layer.  Every layer
    # has a positive Jacobian determinant, while (p, q) -> (|v|, theta) has a
    # negative one (theta follows p, |v| follows q); the fixed swap (|det| = 1)
    # makes the target reachable.
    swap: bool = True


@dataclass
class Normalization:
    inj_mean: np.ndarray     # (2n,) over [p..., q...]
    inj_scale: np.ndarray
    out_mean: np.ndarray     # (n, 2) per bus (vm, va)
    out_scale: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "Normalization":
        return cls(np.zeros(2 * n), np.ones(2 * n), np.zeros((n, 2)), np.ones((n, 2)))

    @classmethod
    def from_data(cls, injections: np.ndarray, states: np.ndarray) -> "Normalization":
        n = injections.shape[1] // 2

        def scale(a):
            s = a.std(axis=0)
            return np.where(s > 1e-12, s, 1.0)

        vm, va = states[:, :n], states[:, n:]
        return cls(injections.mean(axis=0), scale(injections),
                   np.stack([vm.mean(axis=0), va.mean(axis=0)], axis=1),
                   np.stack([scale(vm), scale(va)], axis=1))

    def to_json(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, data: dict) -> "Normalization":
        norm = cls(*(np.asarray(data[k], dtype=float)
                     for k in ("inj_mean", "inj_scale", "out_mean", "out_scale")))
        if np.any(norm.inj_scale <= 0) or np.any(norm.out_scale <= 0):
            raise ArgumentError("normalization scales must be positive")
        return norm


class ImnfModel:
    """Scenario-conditioned bijection between a bus's (p, q) and (|v|, theta)."""

    def __init__(self, config: FlowConfig, adjacency: np.ndarray | None = None,
                 pq_index: np.ndarray | None = None, slack_index: int = 0,
                 normalization: Normalization | None = None, pq_ids=None):
        self.config = config
        n = config.n_pq
        self.n_pq = n
        self.pq_index = np.arange(1, n + 1) if pq_index is None else np.asarray(pq_index, dtype=int)
        self.slack_index = slack_index
        self.pq_ids = [int(i) + 1 for i in self.pq_index] if pq_ids is None else [int(i) for i in pq_ids]
        if len(self.pq_ids) != n or len(self.pq_index) != n:
            raise ArgumentError(f"model has {n} PQ buses but {len(self.pq_index)} indices / "
                                f"{len(self.pq_ids)} ids")
        n_bus = n + 1
        if adjacency is None:
            adjacency = np.ones((n_bus, n_bus), dtype=bool)
        self.adjacency = np.asarray(adjacency, dtype=bool)
        self.norm = Normalization.identity(n) if normalization is None else normalization
        self.params = ad.ParamStore()
        rng = np.random.default_rng(config.seed)

        def make(prefix, out_dim):
            if config.conditioner == "fnn":
                return FnnConditioner(self.params, prefix, 3 * n, out_dim, tuple(config.hidden), rng=rng)
            if config.conditioner == "gat":
                return GatConditioner(self.params, prefix, self.adjacency, out_dim,
                                      config.gat_width, config.gat_layers, config.gat_readout, rng=rng)
            raise ArgumentError(f"unknown conditioner kind {config.conditioner!r}")

        self.layers: list = [SfcpLayer(f"sfcp{k}", self.params, make) for k in range(config.n_sfcp)]
        self.layers += [SplineLayer(f"sf{k}", make, config.bins, config.bound) for k in range(config.n_sf)]

    @classmethod
    def for_network(cls, network, config: FlowConfig, normalization: Normalization | None = None):
        return cls(config, network.adjacency(), network.pq_index, network.slack_index, normalization,
                   network.pq_ids)

    def bus_position(self, bus_id: int) -> int:
        """Position of PQ bus ``bus_id`` among the model's PQ buses."""
        if bus_id not in self.pq_ids:
            raise ArgumentError(f"bus {bus_id} is not a PQ bus of this model (PQ ids {self.pq_ids})")
        return self.pq_ids.index(bus_id)

    # -- scenario embedding ---------------------------------------------
    def embed(self, scenario, bus) -> Condition:
        """Scatter raw scenarios (rows, 2n-2) for target buses ``bus`` into model inputs."""
        n = self.n_pq
        s = np.atleast_2d(np.asarray(scenario, dtype=float))
        bus = np.atleast_1d(np.asarray(bus, dtype=int))
        if s.shape[1] != 2 * (n - 1):
            raise ArgumentError(f"scenario length {s.shape[1]} != 2*(n_pq-1) = {2 * (n - 1)}")
        if len(bus) == 1 and len(s) > 1:
            bus = np.repeat(bus, len(s))
        if len(bus) != len(s):
            raise ArgumentError("one target bus per scenario row required")
        if np.any(bus < 0) or np.any(bus >= n):
            raise ArgumentError(f"bus index out of range 0..{n - 1}")
        rows = len(s)
        others = np.arange(n)[None, :] != bus[:, None]
        full = np.zeros((rows, 2 * n))
        fp, fq = np.zeros((rows, n)), np.zeros((rows, n))
        fp[others] = s[:, :n - 1].ravel()
        fq[others] = s[:, n - 1:].ravel()
        full[:, :n], full[:, n:] = fp, fq
        full = (full - self.norm.inj_mean) / self.norm.inj_scale
        full[:, :n][~others] = 0.0
        full[:, n:][~others] = 0.0
        onehot = (~others).astype(float)
        n_bus = len(self.adjacency)
        tokens = np.zeros((rows, n_bus, 4))
        tokens[:, self.pq_index, 0] = full[:, :n]
        tokens[:, self.pq_index, 1] = full[:, n:]
        tokens[:, self.pq_index, 2] = onehot
        tokens[:, self.slack_index, 3] = 1.0
        target = np.zeros((rows, n_bus, 1))
        target[:, self.pq_index, 0] = onehot
        return Condition(full, onehot, tokens, target)

    def contexts(self, cond: Condition):
        return [[net.context(cond) for net in layer.conditioners] for layer in self.layers]

    # -- transforms -----------------------------------------------------
    def apply_normalized(self, z, ctxs, direction: str = FORWARD):
        _check_direction(direction)
        z = ad.as_tensor(z)
        if self.config.swap and direction == FORWARD:
            z = _swap(z)
        total = 0.0
        order = range(len(self.layers)) if direction == FORWARD else reversed(range(len(self.layers)))
        for k in order:
            try:
                z, lad = self.layers[k].apply(z, ctxs[k], direction)
            except NumericError as exc:
                raise NumericError(f"layer {k}: {exc.message}", **{**exc.context, "layer": k}) from None
            total = lad if isinstance(total, float) else total + lad
        if self.config.swap and direction == INVERSE:
            z = _swap(z)
        if isinstance(total, float):
            total = ad.Tensor(np.zeros(z.shape[0]))
        return z, total

    def _stats(self, bus: np.ndarray):
        n = self.n_pq
        in_mean = np.stack([self.norm.inj_mean[bus], self.norm.inj_mean[n + bus]], axis=1)
        in_scale = np.stack([self.norm.inj_scale[bus], self.norm.inj_scale[n + bus]], axis=1)
        return in_mean, in_scale, self.norm.out_mean[bus], self.norm.out_scale[bus]

    def apply(self, x, scenario, bus, direction: str = FORWARD, cond: Condition | None = None,
              ctxs=None):
        """Map raw (rows, 2) points; returns ``(points, log|det J|)`` Tensors."""
        _check_direction(direction)
        x = ad.as_tensor(x)
        if x.ndim == 1:
            x = ad.reshape(x, (1, 2))
        if x.shape[1] != 2:
            raise ArgumentError("flow inputs are (rows, 2)")
        rows = x.shape[0]
        bus = np.atleast_1d(np.asarray(bus, dtype=int))
        bus = np.repeat(bus, rows) if len(bus) == 1 else bus
        if cond is None:
            cond = self.embed(scenario, bus if len(np.atleast_2d(scenario)) == rows else bus[:1])
        if ctxs is None:
            ctxs = self.contexts(cond)
        in_mean, in_scale, out_mean, out_scale = self._stats(bus)
        if direction == FORWARD:
            z = (x - in_mean) / in_scale
            z, lad = self.apply_normalized(z, ctxs, FORWARD)
            y = z * out_scale + out_mean
            lad = lad + (np.log(out_scale).sum(axis=1) - np.log(in_scale).sum(axis=1))
        else:
            z = (x - out_mean) / out_scale
            z, lad = self.apply_normalized(z, ctxs, INVERSE)
            y = z * in_scale + in_mean
            lad = lad + (np.log(in_scale).sum(axis=1) - np.log(out_scale).sum(axis=1))
        return y, lad

    def forward(self, x, scenario, bus):
        with ad.no_grad():
            y, lad = self.apply(x, scenario, bus, FORWARD)
        return y.value, lad.value

    def inverse(self, v, scenario, bus):
        with ad.no_grad():
            x, lad = self.apply(v, scenario, bus, INVERSE)
        return x.value, lad.value

    # -- persistence ----------------------------------------------------
    def to_json(self) -> dict:
        return {
            "version": 1,
            "config": asdict(self.config),
            "network": {"adjacency": self.adjacency.astype(int).tolist(),
                        "pq_index": self.pq_index.tolist(), "slack_index": int(self.slack_index),
                        "pq_ids": list(self.pq_ids)},
            "normalization": self.norm.to_json(),
            "params": self.params.to_dict(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "ImnfModel":
        if data.get("version") != 1:
            raise ArgumentError(f"unsupported checkpoint version {data.get('version')!r}")
        net = data.get("network", {})
        model = cls(FlowConfig(**data["config"]),
                    np.asarray(net["adjacency"], dtype=bool) if "adjacency" in net else None,
                    np.asarray(net["pq_index"]) if "pq_index" in net else None,
                    int(net.get("slack_index", 0)),
                    Normalization.from_json(data["normalization"]),
                    net.get("pq_ids"))
        model.params.load_dict(data["params"])
        return model

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path: str | Path) -> "ImnfModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


# -- functional surface --------------------------------------------------

def sfcp_apply(layer: SfcpLayer, z, cond: Condition, direction: str = FORWARD):
    ctxs = [net.context(cond) for net in layer.conditioners]
    with ad.no_grad():
        out, lad = layer.apply(np.atleast_2d(z), ctxs, direction)
    return out.value, lad.value


def spline_apply(layer: SplineLayer, z, cond: Condition, direction: str = FORWARD):
    ctxs = [net.context(cond) for net in layer.conditioners]
    with ad.no_grad():
        out, lad = layer.apply(np.atleast_2d(z), ctxs, direction)
    return out.value, lad.value


def imnf_apply(model: ImnfModel, x, scenario, bus, direction: str = FORWARD):
    with ad.no_grad():
        y, lad = model.apply(np.atleast_2d(x), scenario, bus, direction)
    return y.value, lad.value


def conditional_log_density(model: ImnfModel, v, scenario, bus, base) -> np.ndarray:
    """log p(v | scenario) = log base(f^-1(v)) + log|det d f^-1 / d v|.

    ``base`` is the 2-D mixture of the bus's (p, q) given the scenario.
    """
    v = np.atleast_2d(np.asarray(v, dtype=float))
    scenario = np.atleast_2d(scenario)
    if len(scenario) == 1 and len(v) > 1:
        cond = model.embed(scenario, np.atleast_1d(bus)[:1])
        with ad.no_grad():
            x, lad = model.apply(v, None, bus, INVERSE, cond=cond)
        x, lad = x.value, lad.value
    else:
        x, lad = model.inverse(v, scenario, bus)
    return np.asarray(base.log_density(x)) + lad
