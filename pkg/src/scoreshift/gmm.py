"""Isotropic Gaussian mixtures with closed-form noisy marginals and scores.

A mixture here plays the role of a prior whose score functions are known
exactly at every noise level: convolving each component with N(0, sigma^2 I)
stays inside the family, so densities, scores and posterior-mean denoisers
are all available in closed form. All component computations run in log
space with log-sum-exp stabilization; responsibilities would otherwise
underflow once the noise level is small compared to component separation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .rng import as_rng

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of K isotropic Gaussians on R^n.

    Attributes:
        weights: (K,) mixing probabilities, nonnegative, summing to 1.
        means: (K, n) component means.
        variances: (K,) strictly positive isotropic variances.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.atleast_2d(np.asarray(self.means, dtype=float))
        v = np.asarray(self.variances, dtype=float)
        if w.ndim != 1:
            raise ValueError("weights must be a 1-D probability vector")
        if m.shape[0] != w.size or v.shape != w.shape:
            raise ValueError(
                f"component count mismatch: {w.size} weights, "
                f"{m.shape[0]} means, {v.size} variances"
            )
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1 within 1e-12")
        if np.any(v <= 0):
            raise ValueError("all component variances must be strictly positive")
        for arr in (w, m, v):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    def mean(self) -> np.ndarray:
        """Overall mixture mean, sum_k w_k mu_k."""
        return self.weights @ self.means

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GaussianMixture":
        gmm = cls(
            weights=np.asarray(doc["weights"], dtype=float),
            means=np.asarray(doc["means"], dtype=float),
            variances=np.asarray(doc["variances"], dtype=float),
        )
        if "dim" in doc and int(doc["dim"]) != gmm.dim:
            raise ValueError(
                f"declared dim {doc['dim']} does not match means of length {gmm.dim}"
            )
        return gmm

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "GaussianMixture":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class SampleBatch:
    """Batch of draws from a mixture, tagged with its seed for provenance."""

    points: np.ndarray  # (N, n)
    source_seed: str = ""

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def convolve(gmm: GaussianMixture, sigma: float) -> GaussianMixture:
    """Mixture of the sum x + n with n ~ N(0, sigma^2 I).

    Weights and means are unchanged; each component variance gains sigma^2.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return gmm
    return GaussianMixture(
        weights=gmm.weights,
        means=gmm.means,
        variances=gmm.variances + float(sigma) ** 2,
    )


def _as_points(gmm: GaussianMixture, x) -> tuple[np.ndarray, bool]:
    """Broadcast x to (N, n), remembering whether the input was a single point."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.shape[-1] != gmm.dim:
        raise ValueError(f"points have dim {pts.shape[-1]}, mixture has dim {gmm.dim}")
    return pts, single


def _component_log_densities(gmm: GaussianMixture, pts: np.ndarray, sigma: float):
    """Per-component log w_k + log N(x; mu_k, (var_k + sigma^2) I).

    Returns (comp (N, K), var (K,), diff (N, K, n)) with diff = mu_k - x.
    """
    var = gmm.variances + float(sigma) ** 2  # (K,)
    diff = gmm.means[None, :, :] - pts[:, None, :]  # (N, K, n)
    sq = np.einsum("nki,nki->nk", diff, diff)  # (N, K)
    log_norm = -0.5 * gmm.dim * (_LOG_2PI + np.log(var))  # (K,)
    with np.errstate(divide="ignore"):
        log_w = np.log(gmm.weights)
    comp = log_w[None, :] + log_norm[None, :] - 0.5 * sq / var[None, :]
    return comp, var, diff


def log_density(gmm: GaussianMixture, x, sigma: float = 0.0):
    """log of the noise-convolved mixture density at x.

    Args:
        x: point (n,) or batch (N, n).
        sigma: noise standard deviation; 0 evaluates the mixture itself.

    Returns:
        scalar for a single point, (N,) array for a batch.
    """
    pts, single = _as_points(gmm, x)
    comp, _, _ = _component_log_densities(gmm, pts, sigma)
    out = logsumexp(comp, axis=1)
    return float(out[0]) if single else out


def responsibilities(gmm: GaussianMixture, x, sigma: float = 0.0):
    """Posterior component probabilities at noise level sigma, shape (N, K)."""
    pts, single = _as_points(gmm, x)
    comp, _, _ = _component_log_densities(gmm, pts, sigma)
    r = np.exp(comp - logsumexp(comp, axis=1, keepdims=True))
    return r[0] if single else r


def score(gmm: GaussianMixture, x, sigma: float = 0.0):
    """Gradient of log_density at x: sum_k r_k(x) (mu_k - x) / (var_k + sigma^2).

    Computed in that literal form so the single-component case reduces to
    (mu - x) / (var + sigma^2) with no rounding beyond the division.
    Returns an array of the same shape as x.
    """
    pts, single = _as_points(gmm, x)
    comp, var, diff = _component_log_densities(gmm, pts, sigma)
    r = np.exp(comp - logsumexp(comp, axis=1, keepdims=True))  # (N, K)
    out = np.einsum("nk,nki->ni", r, diff / var[None, :, None])
    return out[0] if single else out


def denoise(gmm: GaussianMixture, x, sigma: float, allow_zero_sigma: bool = False):
    """Posterior mean E[x0 | x] for x = x0 + sigma * eps, x0 ~ gmm.

    Computed as x + sigma^2 * score(gmm, x, sigma), which equals the
    responsibility-weighted per-component posterior means. sigma = 0 is
    rejected unless allow_zero_sigma is set, in which case the identity map
    is returned (a noiseless observation is its own posterior mean).
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        if not allow_zero_sigma:
            raise ValueError(
                "denoise at sigma=0 is the identity; pass allow_zero_sigma=True "
                "to opt in"
            )
        return np.asarray(x, dtype=float).copy()
    return np.asarray(x, dtype=float) + float(sigma) ** 2 * score(gmm, x, sigma)


def sample(gmm: GaussianMixture, count: int, rng, label: str = "") -> SampleBatch:
    """Draw count points: component index from weights, then a Gaussian draw.

    Args:
        rng: numpy Generator or int seed. Passing the same seed twice
            reproduces the batch exactly.
        label: optional provenance note stored on the batch.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    seed_note = label or (f"seed={rng}" if not isinstance(rng, np.random.Generator) else "generator")
    gen = as_rng(rng)
    idx = gen.choice(gmm.n_components, size=count, p=gmm.weights)
    eps = gen.standard_normal((count, gmm.dim))
    pts = gmm.means[idx] + np.sqrt(gmm.variances[idx])[:, None] * eps
    return SampleBatch(points=pts, source_seed=seed_note)


def exact_kl_oracle(
    p: GaussianMixture, q: GaussianMixture, count: int, rng
) -> tuple[float, float]:
    """Plain Monte Carlo estimate of KL(p || q) with its standard error.

    Independent of the score-based estimators: draws x ~ p and averages
    log p(x) - log q(x) directly. Serves as the brute-force reference the
    integral estimators are checked against.
    """
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: p has dim {p.dim}, q has dim {q.dim}")
    batch = sample(p, count, rng)
    vals = log_density(p, batch.points) - log_density(q, batch.points)
    value = float(vals.mean())
    stderr = float(vals.std(ddof=1) / np.sqrt(count)) if count > 1 else 0.0
    return value, stderr


def rotate(gmm: GaussianMixture, matrix: np.ndarray) -> GaussianMixture:
    """Pushforward of the mixture through an orthogonal map x -> M x.

    Isotropic components stay isotropic, so only the means move.
    """
    matrix = np.asarray(matrix, dtype=float)
    return GaussianMixture(
        weights=gmm.weights,
        means=gmm.means @ matrix.T,
        variances=gmm.variances,
    )
