"""Shared builders for the test suite."""

import numpy as np

from flowppf.flow import FlowConfig, ImnfModel, Normalization

SMALL = dict(n_sfcp=2, n_sf=2, bins=6, hidden=[16, 16], gat_width=8, gat_readout=16)


def randomize(model: ImnfModel, scale: float = 0.1, seed: int = 0) -> ImnfModel:
    """Give every parameter (including zero-initialized heads) a random value."""
    rng = np.random.default_rng(seed)
    for _, p in model.params.items():
        p.assign(p.value + scale * rng.standard_normal(p.shape))
    return model


def make_model(network, conditioner="fnn", seed=0, randomized=True, swap=True, normalization=None, **kw):
    cfg = FlowConfig(n_pq=network.n_pq, conditioner=conditioner, seed=seed, swap=swap, **{**SMALL, **kw})
    model = ImnfModel.for_network(network, cfg, normalization)
    return randomize(model, seed=seed + 100) if randomized else model


def scenarios(model: ImnfModel, rows: int, rng) -> np.ndarray:
    return rng.standard_normal((rows, 2 * (model.n_pq - 1)))


def unit_norm(n):
    return Normalization.identity(n)
