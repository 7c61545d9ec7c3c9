"""Conditioner networks producing coupling and spline parameters.

A conditioner sees one transformed coordinate plus the scenario (every other
PQ bus's injections and the target-bus identity).  The scenario part is
turned into a *context* once per batch so repeated evaluations against many
coordinates, as in density estimation, reuse it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_ad as ad
from .errors import ArgumentError, ShapeError

LEAKY_SLOPE = 0.2
_MASKED = -1e30


@dataclass
class Condition:
    """Scenario embedded for a batch of rows.

    ``full`` holds the normalized injection vector with the target bus's own
    entries zeroed, ``onehot`` the target bus among PQ buses.  ``tokens`` and
    ``target`` are the per-bus view used by the attention conditioner.
    Leading dimension is the batch size or 1 (broadcast over rows).
    """

    full: np.ndarray      # (B, 2n)
    onehot: np.ndarray    # (B, n)
    tokens: np.ndarray    # (B, N_bus, 4): p, q, target flag, slack flag
    target: np.ndarray    # (B, N_bus, 1)

    @property
    def fnn_input(self) -> np.ndarray:
        return np.concatenate([self.full, self.onehot], axis=1)

    @property
    def rows(self) -> int:
        return self.full.shape[0]


def _init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.standard_normal(shape) / np.sqrt(fan_in)


class FnnConditioner:
    """tanh MLP on ``[coord, scenario, one-hot]`` with a zero-initialized head."""

    kind = "fnn"

    def __init__(self, store: ad.ParamStore, prefix: str, cond_dim: int, out_dim: int,
                 hidden=(32, 32), coord_dim: int = 1, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.prefix, self.out_dim, self.cond_dim = prefix, out_dim, cond_dim
        h0 = hidden[0]
        fan = coord_dim + cond_dim
        self.w0c = store.add(f"{prefix}.w0c", _init(rng, fan, (coord_dim, h0)))
        self.w0s = store.add(f"{prefix}.w0s", _init(rng, fan, (cond_dim, h0)))
        self.b0 = store.add(f"{prefix}.b0", np.zeros(h0))
        self.hidden = []
        for k, (a, b) in enumerate(zip(hidden[:-1], hidden[1:]), start=1):
            self.hidden.append((store.add(f"{prefix}.w{k}", _init(rng, a, (a, b))),
                                store.add(f"{prefix}.b{k}", np.zeros(b))))
        self.wout = store.add(f"{prefix}.wout", np.zeros((hidden[-1], out_dim)))
        self.bout = store.add(f"{prefix}.bout", np.zeros(out_dim))

    def context(self, cond: Condition) -> ad.Tensor:
        x = cond.fnn_input
        if x.shape[1] != self.cond_dim:
            raise ArgumentError(f"{self.prefix}: scenario width {x.shape[1]} != {self.cond_dim}")
        return ad.matmul(x, self.w0s) + self.b0

    def __call__(self, coord, ctx: ad.Tensor) -> ad.Tensor:
        coord = ad.as_tensor(coord)
        if coord.ndim != 2 or coord.shape[1] != self.w0c.shape[0]:
            raise ArgumentError(f"{self.prefix}: coordinate must be (rows, {self.w0c.shape[0]})")
        h = ad.tanh(ad.matmul(coord, self.w0c) + ctx)
        for w, b in self.hidden:
            h = ad.tanh(ad.matmul(h, w) + b)
        return ad.matmul(h, self.wout) + self.bout


def attention_bias(adjacency: np.ndarray) -> np.ndarray:
    adj = np.asarray(adjacency, dtype=bool)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ShapeError("adjacency must be square")
    empty = ~adj.any(axis=1)
    if empty.any():
        raise ShapeError(f"isolated tokens without self-loop: {np.flatnonzero(empty).tolist()}")
    return np.where(adj, 0.0, _MASKED)


def gat_layer(h, adjacency: np.ndarray, w, a_src, a_dst, return_attention: bool = False):
    """One masked graph-attention layer.

    ``e_ij = LeakyReLU(a_src . W h_i + a_dst . W h_j)`` for neighbours j of i,
    ``alpha = softmax_j(e)`` over the neighbourhood, output ``sum_j alpha_ij W h_j``.
    ``h``: (B, N, F); ``adjacency``: (N, N) boolean including self-loops.
    """
    h = ad.as_tensor(h)
    bias = attention_bias(adjacency)
    if h.shape[-2] != bias.shape[0]:
        raise ShapeError(f"{h.shape[-2]} tokens for a {bias.shape[0]}-bus adjacency")
    wh = ad.matmul(h, w)
    f_src = ad.matmul(wh, a_src)                       # (B, N, 1)
    f_dst = ad.matmul(wh, a_dst)                       # (B, N, 1)
    f_dst = ad.reshape(f_dst, f_dst.shape[:-2] + (1, f_dst.shape[-2]))
    e = ad.leaky_relu(f_src + f_dst, LEAKY_SLOPE) + bias
    alpha = ad.softmax(e)
    out = ad.matmul(alpha, wh)
    return (out, alpha) if return_attention else out


class GatConditioner:
    """Per-bus tokens, masked attention over the network graph, target-token readout."""

    kind = "gat"

    def __init__(self, store: ad.ParamStore, prefix: str, adjacency: np.ndarray, out_dim: int,
                 width: int = 16, layers: int = 2, readout: int = 32,
                 rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.prefix, self.out_dim = prefix, out_dim
        self.adjacency = np.asarray(adjacency, dtype=bool)
        attention_bias(self.adjacency)
        n_bus = len(self.adjacency)
        self.we = store.add(f"{prefix}.embed_w", _init(rng, 4, (4, width)))
        self.be = store.add(f"{prefix}.embed_b", np.zeros(width))
        self.pos = store.add(f"{prefix}.pos", 0.1 * rng.standard_normal((n_bus, width)))
        self.wc = store.add(f"{prefix}.coord_w", _init(rng, 1, (1, width)))
        self.layers = []
        for k in range(layers):
            self.layers.append((
                store.add(f"{prefix}.gat{k}.w", _init(rng, width, (width, width))),
                store.add(f"{prefix}.gat{k}.a_src", _init(rng, width, (width, 1))),
                store.add(f"{prefix}.gat{k}.a_dst", _init(rng, width, (width, 1))),
            ))
        fan = 2 * width + 1
        self.r_t = store.add(f"{prefix}.read_t", _init(rng, fan, (width, readout)))
        self.r_p = store.add(f"{prefix}.read_p", _init(rng, fan, (width, readout)))
        self.r_c = store.add(f"{prefix}.read_c", _init(rng, fan, (1, readout)))
        self.r_b = store.add(f"{prefix}.read_b", np.zeros(readout))
        self.wout = store.add(f"{prefix}.wout", np.zeros((readout, out_dim)))
        self.bout = store.add(f"{prefix}.bout", np.zeros(out_dim))

    def context(self, cond: Condition) -> ad.Tensor:
        if cond.tokens.shape[1] != len(self.adjacency):
            raise ArgumentError(f"{self.prefix}: {cond.tokens.shape[1]} tokens for "
                                f"{len(self.adjacency)} buses")
        base = ad.matmul(cond.tokens, self.we) + self.be + self.pos
        return base, cond.target

    def __call__(self, coord, ctx) -> ad.Tensor:
        base, target = ctx
        coord = ad.as_tensor(coord)
        if coord.ndim != 2 or coord.shape[1] != 1:
            raise ArgumentError(f"{self.prefix}: coordinate must be (rows, 1)")
        rows = coord.shape[0]
        c3 = ad.reshape(coord, (rows, 1, 1))
        h = ad.tanh(base + ad.matmul(c3 * target, self.wc))
        for w, a_s, a_d in self.layers:
            h = h + ad.tanh(gat_layer(h, self.adjacency, w, a_s, a_d))
        h_t = ad.sum_(h * target, axis=1)
        h_p = ad.mean(h, axis=1)
        r = ad.tanh(ad.matmul(h_t, self.r_t) + ad.matmul(h_p, self.r_p)
                    + ad.matmul(coord, self.r_c) + self.r_b)
        return ad.matmul(r, self.wout) + self.bout


def conditioner_forward(conditioner, coord, cond: Condition) -> np.ndarray:
    """Evaluate a conditioner without recording a graph."""
    with ad.no_grad():
        return conditioner(np.atleast_2d(coord), conditioner.context(cond)).value
