"""SVD-form linear measurement operators and projected-coordinate transforms.

An operator is held as a shared orthogonal right basis V plus a vector of
singular values s; the left factor is never materialized because samplers
produce the normalized measurement ybar = pinv(Sigma) U^T y directly. The
projection P marks observed directions (diag P_i = 1 iff s_i > 0).

All operators drawn from one sampler share the same basis object, so
datasets built from a single sampler satisfy the shared-right-basis
requirement by construction. Coverage of the signal space is checked
empirically: if some coordinate is never observed across probe draws,
estimation stops with SpanViolation rather than silently extrapolating.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .rng import as_rng, stream


class SpanViolation(Exception):
    """Raised when the operator family never observes some coordinate."""


class BasisMismatch(ValueError):
    """Raised when measurements from different right bases are combined."""


def fwht(x: np.ndarray) -> np.ndarray:
    """Orthonormal fast Walsh-Hadamard transform along the last axis.

    Length must be a power of two. The transform is symmetric and
    orthogonal, so it is its own inverse.
    """
    x = np.array(x, dtype=float, copy=True)
    n = x.shape[-1]
    if n & (n - 1) or n == 0:
        raise ValueError(f"Walsh-Hadamard length must be a power of two, got {n}")
    h = 1
    while h < n:
        shape = x.shape[:-1] + (n // (2 * h), 2, h)
        blocks = x.reshape(shape)
        a = blocks[..., 0, :].copy()
        b = blocks[..., 1, :].copy()
        blocks[..., 0, :] = a + b
        blocks[..., 1, :] = a - b
        h *= 2
    return x.reshape(x.shape) / math.sqrt(n)


@dataclass(frozen=True)
class RightBasis:
    """Orthogonal transform handle on R^n shared by an operator family.

    kind is one of "identity", "dense" (explicit orthogonal matrix) or
    "hadamard" (fast Walsh-Hadamard, power-of-two n). forward applies V,
    inverse applies V^T; both accept (n,) vectors or (N, n) batches.
    """

    kind: str
    dim: int
    matrix: np.ndarray | None = None
    basis_id: str = ""

    def __post_init__(self):
        if self.kind not in ("identity", "dense", "hadamard"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.kind == "hadamard" and (self.dim & (self.dim - 1)):
            raise ValueError("hadamard basis requires power-of-two dim")
        if self.kind == "dense":
            m = np.asarray(self.matrix, dtype=float)
            if m.shape != (self.dim, self.dim):
                raise ValueError("dense basis matrix must be (dim, dim)")
            if not np.allclose(m @ m.T, np.eye(self.dim), atol=1e-10):
                raise ValueError("dense basis matrix is not orthogonal to 1e-10")
            m.setflags(write=False)
            object.__setattr__(self, "matrix", m)
        if not self.basis_id:
            object.__setattr__(self, "basis_id", f"{self.kind}:{self.dim}")

    def forward(self, u: np.ndarray) -> np.ndarray:
        """Apply V (lift from projected coordinates to signal coordinates)."""
        u = np.asarray(u, dtype=float)
        if self.kind == "identity":
            return u.copy()
        if self.kind == "hadamard":
            return fwht(u)
        return u @ self.matrix.T

    def inverse(self, x: np.ndarray) -> np.ndarray:
        """Apply V^T (drop into the shared projected coordinates)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return x.copy()
        if self.kind == "hadamard":
            return fwht(x)
        return x @ self.matrix


def identity_basis(dim: int) -> RightBasis:
    return RightBasis(kind="identity", dim=dim)


def hadamard_basis(dim: int) -> RightBasis:
    return RightBasis(kind="hadamard", dim=dim)


def dense_orthogonal_basis(dim: int, seed: int) -> RightBasis:
    """Haar-ish orthogonal matrix from a seeded QR factorization.

    The sign of each diagonal entry of R is pushed into Q so the result is
    a deterministic function of (dim, seed).
    """
    gen = stream(seed, "dense-basis")
    a = gen.standard_normal((dim, dim))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))[None, :]
    return RightBasis(kind="dense", dim=dim, matrix=q, basis_id=f"dense:{dim}:{seed}")


@dataclass(frozen=True)
class MeasurementOperator:
    """One linear operator in SVD form: basis V plus singular values s >= 0.

    Zeros in s mark unobserved directions; the projection diagonal is the
    indicator s > 0.
    """

    basis: RightBasis
    singular_values: np.ndarray
    operator_id: str

    def __post_init__(self):
        s = np.asarray(self.singular_values, dtype=float)
        if s.ndim != 1 or s.size != self.basis.dim:
            raise ValueError("singular_values must be a length-dim vector")
        if np.any(s < 0):
            raise ValueError("singular values must be nonnegative")
        s.setflags(write=False)
        object.__setattr__(self, "singular_values", s)

    @property
    def dim(self) -> int:
        return self.basis.dim

    @property
    def support(self) -> np.ndarray:
        """Boolean mask of observed coordinates (diag of P as bools)."""
        return self.singular_values > 0

    @property
    def projection_diag(self) -> np.ndarray:
        """Diagonal of P = pinv(Sigma) Sigma, entries in {0, 1}."""
        return (self.singular_values > 0).astype(float)

    @property
    def is_full_rank(self) -> bool:
        return bool(np.all(self.singular_values > 0))


@dataclass(frozen=True)
class ProjectedMeasurement:
    """One observation ybar = P xbar + zbar in the shared projected basis.

    ybar is exactly zero on unobserved coordinates; sigma_z records the
    measurement-noise level (image units) used when the observation was
    acquired, 0 for noiseless data.
    """

    ybar: np.ndarray
    operator_id: str
    op_index: int
    sigma_z: float = 0.0

    def __post_init__(self):
        y = np.asarray(self.ybar, dtype=float)
        y.setflags(write=False)
        object.__setattr__(self, "ybar", y)
        if self.sigma_z < 0:
            raise ValueError("sigma_z must be >= 0")


@dataclass(frozen=True)
class OperatorSampler:
    """Distribution over measurement operators with one shared right basis.

    kinds:
        "coordinate-mask": keep each coordinate independently; keep_prob is
            a scalar or a per-coordinate vector.
        "patch-inpainting": image coordinates in row-major order over a
            square image; each non-overlapping patch_edge x patch_edge
            patch is kept independently with probability keep_prob.
        "band-subsample": always keep the lowest low_count coordinates and
            a uniform random rand_count-subset of the rest.
    """

    kind: str
    dim: int
    basis: RightBasis
    base_seed: int = 0
    keep_prob: float | np.ndarray | None = None
    patch_edge: int | None = None
    low_count: int | None = None
    rand_count: int | None = None
    singular_value: float = 1.0

    def __post_init__(self):
        if self.kind not in ("coordinate-mask", "patch-inpainting", "band-subsample"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.basis.dim != self.dim:
            raise ValueError("basis dim does not match sampler dim")
        if self.singular_value <= 0:
            raise ValueError("singular_value must be positive")
        if self.kind in ("coordinate-mask", "patch-inpainting"):
            p = np.asarray(self.keep_prob, dtype=float)
            if np.any(p < 0) or np.any(p > 1):
                raise ValueError("keep_prob entries must lie in [0, 1]")
            if self.kind == "patch-inpainting":
                if p.ndim != 0:
                    raise ValueError("patch-inpainting takes a scalar keep_prob")
                edge = math.isqrt(self.dim)
                if edge * edge != self.dim:
                    raise ValueError("patch-inpainting needs a square image (dim = edge^2)")
                if not self.patch_edge or edge % self.patch_edge != 0:
                    raise ValueError(
                        f"patch edge {self.patch_edge} must divide image edge {edge}"
                    )
            elif p.ndim == 1 and p.size != self.dim:
                raise ValueError("per-coordinate keep_prob must have length dim")
        else:
            low = int(self.low_count or 0)
            rand = int(self.rand_count or 0)
            if low < 0 or rand < 0 or low + rand > self.dim or low + rand == 0:
                raise ValueError("band-subsample needs 0 <= low_count + rand_count <= dim, > 0")

    def fingerprint(self) -> str:
        """Short stable hash of the sampler configuration."""
        doc = {
            "kind": self.kind,
            "dim": self.dim,
            "basis": self.basis.basis_id,
            "base_seed": self.base_seed,
            "keep_prob": np.asarray(self.keep_prob).tolist()
            if self.keep_prob is not None
            else None,
            "patch_edge": self.patch_edge,
            "low_count": self.low_count,
            "rand_count": self.rand_count,
            "singular_value": self.singular_value,
        }
        blob = json.dumps(doc, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]

    def to_dict(self) -> dict:
        doc = {"kind": self.kind, "dim": self.dim, "base_seed": self.base_seed}
        basis = {"kind": self.basis.kind}
        if self.basis.kind == "dense":
            # dense bases regenerate from their seed recorded in basis_id
            parts = self.basis.basis_id.split(":")
            basis["seed"] = int(parts[2]) if len(parts) == 3 else 0
        doc["basis"] = basis
        if self.keep_prob is not None:
            p = np.asarray(self.keep_prob)
            doc["keep_prob"] = p.tolist() if p.ndim else float(p)
        if self.patch_edge is not None:
            doc["patch_edge"] = self.patch_edge
        if self.low_count is not None:
            doc["low_count"] = self.low_count
        if self.rand_count is not None:
            doc["rand_count"] = self.rand_count
        if self.singular_value != 1.0:
            doc["singular_value"] = self.singular_value
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "OperatorSampler":
        dim = int(doc["dim"])
        basis_doc = doc.get("basis", {"kind": "identity"})
        bkind = basis_doc.get("kind", "identity")
        if bkind == "identity":
            basis = identity_basis(dim)
        elif bkind == "hadamard":
            basis = hadamard_basis(dim)
        elif bkind in ("dense", "dense-orthogonal"):
            basis = dense_orthogonal_basis(dim, int(basis_doc.get("seed", 0)))
        else:
            raise ValueError(f"unknown basis kind {bkind!r}")
        keep_prob = doc.get("keep_prob")
        if isinstance(keep_prob, list):
            keep_prob = np.asarray(keep_prob, dtype=float)
        return cls(
            kind=doc["kind"],
            dim=dim,
            basis=basis,
            base_seed=int(doc.get("base_seed", 0)),
            keep_prob=keep_prob,
            patch_edge=doc.get("patch_edge"),
            low_count=doc.get("low_count"),
            rand_count=doc.get("rand_count"),
            singular_value=float(doc.get("singular_value", 1.0)),
        )


@dataclass(frozen=True)
class ProjectionStats:
    """Empirical E[P] diagonal and the compensation weights built from it.

    w_diag is ep_diag^(-3/2), the diagonal scaling that makes unevenly
    observed coordinates contribute proportionally to the measurement-domain
    divergence.
    """

    ep_diag: np.ndarray
    w_diag: np.ndarray
    draws_used: int
    sampler_id: str = ""

    def __post_init__(self):
        ep = np.asarray(self.ep_diag, dtype=float)
        w = np.asarray(self.w_diag, dtype=float)
        if ep.shape != w.shape or ep.ndim != 1:
            raise ValueError("ep_diag and w_diag must be 1-D of equal length")
        if np.any(ep <= 0) or np.any(ep > 1):
            raise ValueError("ep_diag entries must lie in (0, 1]")
        if not np.all(np.isfinite(w)):
            raise ValueError("w_diag entries must be finite")
        ep.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "ep_diag", ep)
        object.__setattr__(self, "w_diag", w)

    def to_dict(self) -> dict:
        return {
            "ep_diag": self.ep_diag.tolist(),
            "w_diag": self.w_diag.tolist(),
            "draws_used": self.draws_used,
            "sampler_id": self.sampler_id,
        }


def _draw_mask(sampler: OperatorSampler, index: int) -> np.ndarray:
    gen = stream(sampler.base_seed, "operator", index)
    if sampler.kind == "coordinate-mask":
        p = np.broadcast_to(np.asarray(sampler.keep_prob, dtype=float), (sampler.dim,))
        return gen.random(sampler.dim) < p
    if sampler.kind == "patch-inpainting":
        edge = math.isqrt(sampler.dim)
        pe = sampler.patch_edge
        grid = edge // pe
        keep_patch = gen.random((grid, grid)) < float(sampler.keep_prob)
        pixels = np.repeat(np.repeat(keep_patch, pe, axis=0), pe, axis=1)
        return pixels.reshape(sampler.dim)
    low = int(sampler.low_count or 0)
    rand = int(sampler.rand_count or 0)
    mask = np.zeros(sampler.dim, dtype=bool)
    mask[:low] = True
    if rand:
        rest = np.arange(low, sampler.dim)
        picked = gen.choice(rest, size=rand, replace=False)
        mask[picked] = True
    return mask


def sample_operator(sampler: OperatorSampler, index: int) -> MeasurementOperator:
    """Deterministic operator draw: a pure function of (base_seed, index)."""
    if index < 0:
        raise ValueError(f"index must be >= 0, got {index}")
    mask = _draw_mask(sampler, index)
    s = np.where(mask, sampler.singular_value, 0.0)
    return MeasurementOperator(
        basis=sampler.basis,
        singular_values=s,
        operator_id=f"{sampler.fingerprint()}:{index}",
    )


def to_projected(
    op: MeasurementOperator, x: np.ndarray, sigma_z: float = 0.0, rng=None
) -> ProjectedMeasurement:
    """Acquire ybar = P V^T x + zbar from a clean signal x.

    Measurement noise z ~ N(0, sigma_z^2 I) in the raw measurement domain
    lands on the observed coordinates with per-coordinate std sigma_z / s_i.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (op.dim,):
        raise ValueError(f"x must have shape ({op.dim},), got {x.shape}")
    if sigma_z < 0:
        raise ValueError("sigma_z must be >= 0")
    xbar = op.basis.inverse(x)
    mask = op.support
    ybar = np.where(mask, xbar, 0.0)
    if sigma_z > 0:
        gen = as_rng(rng)
        noise = np.zeros(op.dim)
        noise[mask] = gen.standard_normal(int(mask.sum())) * (
            sigma_z / op.singular_values[mask]
        )
        ybar = ybar + noise
    try:
        idx = int(op.operator_id.rsplit(":", 1)[1])
    except (IndexError, ValueError):
        idx = -1
    return ProjectedMeasurement(
        ybar=ybar, operator_id=op.operator_id, op_index=idx, sigma_z=float(sigma_z)
    )


def add_diffusion_noise(
    op: MeasurementOperator, meas: ProjectedMeasurement, sigma: float, rng
) -> np.ndarray:
    """ybar + nbar with nbar ~ N(0, sigma^2 P): noise only where observed."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    gen = as_rng(rng)
    eps = gen.standard_normal(op.dim)
    return meas.ybar + sigma * (eps * op.projection_diag)


def lift(op: MeasurementOperator, ybar_sigma: np.ndarray) -> np.ndarray:
    """Map a projected vector back to signal coordinates: V ybar_sigma."""
    return op.basis.forward(np.asarray(ybar_sigma, dtype=float))


def estimate_projection_stats(sampler: OperatorSampler, draws: int = 4096) -> ProjectionStats:
    """Empirical diagonal of E[P] over `draws` operator draws, plus weights.

    Raises:
        SpanViolation: if some coordinate is never observed; the operator
            family then fails to cover the signal space and the
            measurement-domain divergence is undefined for it.
    """
    if draws < 1:
        raise ValueError(f"draws must be >= 1, got {draws}")
    acc = np.zeros(sampler.dim)
    for i in range(draws):
        acc += _draw_mask(sampler, i)
    ep = acc / draws
    dead = np.flatnonzero(ep == 0)
    if dead.size:
        raise SpanViolation(
            f"coordinates never observed across {draws} operator draws: "
            f"{dead[:8].tolist()}{'...' if dead.size > 8 else ''}"
        )
    return ProjectionStats(
        ep_diag=ep,
        w_diag=ep ** -1.5,
        draws_used=draws,
        sampler_id=sampler.fingerprint(),
    )
