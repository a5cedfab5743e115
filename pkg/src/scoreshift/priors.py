"""Ready-made analytic prior pairs for benchmarks and self-tests.

Both pairs differ only in component locations, so the divergence between
them is a pure location shift with no shape confound, and closed-form or
brute-force references are cheap to compute.
"""

from __future__ import annotations

import numpy as np

from .gmm import GaussianMixture


def gaussian_pair(dim: int = 10, distance_sq: float = 25.0):
    """Two unit-variance Gaussians whose means are ||dmu||^2 apart.

    The exact divergence is distance_sq / 2. The mean offset lives in the
    first two coordinates (a 3-4-5 split by default).
    """
    if dim < 2:
        raise ValueError("gaussian_pair needs dim >= 2")
    p = GaussianMixture(
        weights=np.array([1.0]),
        means=np.zeros((1, dim)),
        variances=np.array([1.0]),
    )
    shift = np.zeros(dim)
    root = np.sqrt(distance_sq)
    shift[0] = 0.6 * root
    shift[1] = 0.8 * root
    q = GaussianMixture(
        weights=np.array([1.0]),
        means=shift[None, :],
        variances=np.array([1.0]),
    )
    return p, q


def triangle_pair(dim: int = 10):
    """Equal-weight three-component mixtures in dim >= 2 dimensions.

    The base prior places unit-variance components on a triangle in the
    first two coordinates: (0, 0), (5, 5), (10, 0). The shifted prior moves
    every component by +10 along the first axis and -5 along the second,
    leaving all other coordinates and all variances untouched.
    """
    if dim < 2:
        raise ValueError("triangle_pair needs dim >= 2")
    base = np.zeros((3, dim))
    base[0, :2] = (0.0, 0.0)
    base[1, :2] = (5.0, 5.0)
    base[2, :2] = (10.0, 0.0)
    shifted = base.copy()
    shifted[:, 0] += 10.0
    shifted[:, 1] += -5.0
    weights = np.full(3, 1.0 / 3.0)
    ones = np.ones(3)
    p = GaussianMixture(weights=weights, means=base, variances=ones)
    q = GaussianMixture(weights=weights, means=shifted, variances=ones)
    return p, q
