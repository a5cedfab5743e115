import numpy as np
import pytest

from scoreshift import (
    MeasurementDataset,
    OperatorSampler,
    estimate_projection_stats,
    identity_basis,
    make_log_grid,
    sample,
)
from scoreshift.priors import gaussian_pair, triangle_pair
from scoreshift.rng import stream


@pytest.fixture(scope="session")
def toy_pair():
    return triangle_pair()


@pytest.fixture(scope="session")
def gauss_pair():
    return gaussian_pair()


@pytest.fixture(scope="session")
def toy_grid():
    return make_log_grid(0.01, 1.0, 48)


@pytest.fixture(scope="session")
def wide_grid():
    return make_log_grid(1e-2, 1e3, 256)


def mask_sampler(dim=10, keep_prob=0.8, base_seed=5, basis=None):
    return OperatorSampler(
        kind="coordinate-mask",
        dim=dim,
        basis=basis if basis is not None else identity_basis(dim),
        base_seed=base_seed,
        keep_prob=keep_prob,
    )


@pytest.fixture(scope="session")
def toy_masked_data(toy_pair):
    """Shared 0.8-keep masked dataset of 400 toy draws, with its stats."""
    p, _ = toy_pair
    sampler = mask_sampler(dim=p.dim, keep_prob=0.8, base_seed=5)
    stats = estimate_projection_stats(sampler, 2048)
    draws = sample(p, 400, stream(17, "data-x"))
    data = MeasurementDataset.from_samples(sampler, draws, seed=17)
    return sampler, stats, draws, data
