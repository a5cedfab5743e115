"""Measurement-only adaptation of the out-of-distribution prior.

The mismatched prior is adjusted by minimizing the weighted projected
denoising error: its posterior-mean denoiser, evaluated at re-noised lifted
measurements V ybar_sigma, should reproduce the clean lifted measurement
V ybar. Only corrupted observations of the in-distribution data enter the
loss; clean signals are never an input (the adapt entry point has no
signal-typed parameter). Because the denoiser here is the mixture's exact
posterior mean, the adapted object is the mixture parameterization itself:
component means, optionally also the mixing weights through a softmax
reparameterization. Component variances stay frozen.

Gradients are central finite differences of the loss; each step draws its
own minibatch, sigma draws and noise once, so the loss seen by the
differencing is a fixed deterministic function during that step. Progress
is tracked on a separate frozen evaluation pack, which makes the plateau
rule and the divergence guard deterministic as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .estimators import KlEstimate, MeasurementDataset, kl_image, kl_measurement
from .gmm import GaussianMixture, score
from .measurements import BasisMismatch, ProjectionStats
from .quadrature import SigmaGrid
from .rng import as_rng, stream

TRAINABLE = ("means-only", "means-and-weights")
OPTIMIZERS = ("gradient-descent", "adaptive-moments")


class DivergenceError(RuntimeError):
    """Raised when the adaptation loss rises for too many consecutive steps."""


@dataclass(frozen=True)
class AdaptationConfig:
    """Knobs of the first-order adaptation loop.

    sigma draws per step are log-uniform over sigma_range (defaulting to
    the diagnostic grid's range inside adapt). shared_mask_batches groups
    each minibatch by a single operator, for datasets where operators are
    reused across measurements.
    """

    trainable: str = "means-only"
    optimizer: str = "adaptive-moments"
    step_size: float = 0.05
    iterations: int = 200
    batch: int = 32
    sigma_draws: int = 8
    fd_step: float = 1e-3
    seed: int = 0
    sigma_range: tuple[float, float] | None = None
    plateau_rel: float = 0.005
    plateau_window: int = 10
    divergence_patience: int = 20
    shared_mask_batches: bool = False

    def __post_init__(self):
        if self.trainable not in TRAINABLE:
            raise ValueError(f"trainable must be one of {TRAINABLE}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if not (1e-6 <= self.fd_step <= 1e-2):
            raise ValueError("fd_step must lie in [1e-6, 1e-2]")
        if self.iterations < 1:
            raise ValueError("iteration cap must be >= 1")
        if self.batch < 1 or self.sigma_draws < 1:
            raise ValueError("batch and sigma_draws must be >= 1")


@dataclass
class AdaptationReport:
    """Trajectory and before/after divergences of one adaptation run.

    The divergences are recomputed with the estimators on the same dataset,
    never read back from the optimizer.
    """

    loss_trajectory: list[float]
    stop_reason: str
    param_delta: dict[str, float]
    kl_measurement_before: KlEstimate | None = None
    kl_measurement_after: KlEstimate | None = None
    kl_image_before: KlEstimate | None = None
    kl_image_after: KlEstimate | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def est(e):
            return e.to_dict() if e is not None else None

        return {
            "loss_trajectory": self.loss_trajectory,
            "stop_reason": self.stop_reason,
            "param_delta": self.param_delta,
            "kl_measurement_before": est(self.kl_measurement_before),
            "kl_measurement_after": est(self.kl_measurement_after),
            "kl_image_before": est(self.kl_image_before),
            "kl_image_after": est(self.kl_image_after),
        }


def _pack_loss(
    q: GaussianMixture,
    ybar: np.ndarray,
    masks: np.ndarray,
    basis,
    w: np.ndarray,
    sigmas: np.ndarray,
    eps: np.ndarray,
) -> float:
    """Weighted projected denoising error on a fixed (data, sigma, noise) pack.

    ybar, masks: (B, n); sigmas: (S,); eps: (S, B, n). Returns the mean over
    the S x B pairs of || w * (ybar - V^T D_q(V ybar_sigma)) ||^2.
    """
    total = 0.0
    for s, sigma in enumerate(sigmas):
        ybar_sigma = ybar + sigma * (eps[s] * masks)
        lifted = basis.forward(ybar_sigma)
        denoised = lifted + sigma**2 * score(q, lifted, sigma)
        resid = (ybar - basis.inverse(denoised)) * w[None, :]
        total += float(np.einsum("bi,bi->b", resid, resid).sum())
    return total / (sigmas.size * ybar.shape[0])


def denoising_loss(
    q: GaussianMixture,
    batch: MeasurementDataset,
    stats: ProjectionStats,
    sigmas,
    rng,
) -> float:
    """Mean weighted denoising error of q over (measurement x sigma) pairs.

    For each measurement and each sigma, noise is added on the observed
    coordinates, the point is lifted, q's posterior-mean denoiser is
    applied, and the result is compared against the clean lifted
    measurement under the per-coordinate weights w_diag.
    """
    sigmas = np.asarray(sigmas, dtype=float)
    if sigmas.ndim != 1 or sigmas.size == 0 or np.any(sigmas <= 0):
        raise ValueError("sigmas must be a nonempty list of positive values")
    if q.dim != batch.sampler.dim:
        raise ValueError("mixture dim does not match measurement dim")
    if stats.sampler_id and stats.sampler_id != batch.sampler.fingerprint():
        raise BasisMismatch("projection stats come from a different sampler")
    gen = as_rng(rng)
    ybar = np.stack([m.ybar for m in batch.measurements])
    masks = np.stack([op.projection_diag for op in batch.operators()])
    eps = gen.standard_normal((sigmas.size,) + ybar.shape)
    return _pack_loss(q, ybar, masks, batch.sampler.basis, stats.w_diag, sigmas, eps)


def _split_params(
    params: np.ndarray, template: GaussianMixture, train_weights: bool
) -> GaussianMixture:
    k, n = template.means.shape
    means = params[: k * n].reshape(k, n)
    if train_weights:
        logits = params[k * n :]
        shifted = logits - logits.max()
        w = np.exp(shifted)
        w = w / w.sum()
    else:
        w = template.weights
    return GaussianMixture(weights=w, means=means, variances=template.variances)


def _initial_params(q0: GaussianMixture, train_weights: bool) -> np.ndarray:
    parts = [q0.means.ravel()]
    if train_weights:
        parts.append(np.log(q0.weights))
    return np.concatenate(parts)


def fd_gradient(loss_fn, params: np.ndarray, h: float) -> np.ndarray:
    """Central finite-difference gradient of loss_fn at params."""
    grad = np.empty_like(params)
    for i in range(params.size):
        up = params.copy()
        dn = params.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (loss_fn(up) - loss_fn(dn)) / (2 * h)
    return grad


def adapt(
    q0: GaussianMixture,
    data: MeasurementDataset,
    stats: ProjectionStats,
    cfg: AdaptationConfig,
    grid: SigmaGrid,
    ind_model: GaussianMixture | None = None,
    n_image_samples: int = 2048,
) -> tuple[GaussianMixture, AdaptationReport]:
    """Minimize the weighted projected denoising loss over q0's parameters.

    Args:
        q0: starting out-of-distribution mixture.
        data: corrupted in-distribution measurements; the only
            data-dependent input to the optimization.
        grid: sigma grid; supplies the sigma sampling range and the
            quadrature for the recomputed divergences.
        ind_model: optional in-distribution prior. When given, the report
            carries measurement-domain and image-domain divergences before
            and after adaptation (purely diagnostic; the optimizer never
            sees it).

    Returns:
        (adapted mixture, report). The returned mixture is the best
        iterate under the frozen evaluation loss, so its loss never exceeds
        the starting point's.

    Raises:
        DivergenceError: if the evaluation loss rises for
            cfg.divergence_patience consecutive steps.
    """
    if q0.dim != data.sampler.dim:
        raise ValueError("mixture dim does not match measurement dim")
    train_weights = cfg.trainable == "means-and-weights"
    basis = data.sampler.basis
    w = stats.w_diag
    lo, hi = cfg.sigma_range if cfg.sigma_range else (grid.sigma_min, grid.sigma_max)

    ybar_all = np.stack([m.ybar for m in data.measurements])
    ops = data.operators()
    masks_all = np.stack([op.projection_diag for op in ops])
    op_ids = np.array([m.op_index for m in data.measurements])
    n_data = len(data)

    # Frozen evaluation pack: the plateau rule and divergence guard track a
    # deterministic function of the parameters.
    eval_gen = stream(cfg.seed, "adapt-eval")
    eval_sigmas = np.exp(eval_gen.uniform(np.log(lo), np.log(hi), size=cfg.sigma_draws))
    eval_eps = eval_gen.standard_normal((cfg.sigma_draws, n_data, q0.dim))

    def eval_loss(params: np.ndarray) -> float:
        q = _split_params(params, q0, train_weights)
        return _pack_loss(q, ybar_all, masks_all, basis, w, eval_sigmas, eval_eps)

    params = _initial_params(q0, train_weights)
    best_params = params.copy()
    losses = [eval_loss(params)]
    best_loss = losses[0]

    adam_m = np.zeros_like(params)
    adam_v = np.zeros_like(params)
    stop_reason = "cap"
    rising = 0

    for t in range(1, cfg.iterations + 1):
        pick_gen = stream(cfg.seed, "adapt-batch", t)
        if cfg.shared_mask_batches:
            shared = pick_gen.choice(np.unique(op_ids))
            pool = np.flatnonzero(op_ids == shared)
            idx = pool[pick_gen.integers(0, pool.size, size=min(cfg.batch, pool.size))]
        else:
            idx = pick_gen.integers(0, n_data, size=min(cfg.batch, n_data))
        ybar = ybar_all[idx]
        masks = masks_all[idx]
        sig_gen = stream(cfg.seed, "adapt-sigma", t)
        sigmas = np.exp(sig_gen.uniform(np.log(lo), np.log(hi), size=cfg.sigma_draws))
        eps = stream(cfg.seed, "adapt-noise", t).standard_normal(
            (cfg.sigma_draws, idx.size, q0.dim)
        )

        def step_loss(p: np.ndarray) -> float:
            q = _split_params(p, q0, train_weights)
            return _pack_loss(q, ybar, masks, basis, w, sigmas, eps)

        grad = fd_gradient(step_loss, params, cfg.fd_step)
        if cfg.optimizer == "gradient-descent":
            params = params - cfg.step_size * grad
        else:
            adam_m = 0.9 * adam_m + 0.1 * grad
            adam_v = 0.999 * adam_v + 0.001 * grad**2
            mhat = adam_m / (1 - 0.9**t)
            vhat = adam_v / (1 - 0.999**t)
            params = params - cfg.step_size * mhat / (np.sqrt(vhat) + 1e-8)

        current = eval_loss(params)
        losses.append(current)
        if current < best_loss:
            best_loss = current
            best_params = params.copy()
        # non-finite losses count as rising so runaway steps still abort
        rising = rising + 1 if (not np.isfinite(current) or current > losses[-2]) else 0
        if rising >= cfg.divergence_patience:
            raise DivergenceError(
                f"evaluation loss rose for {rising} consecutive steps "
                f"(last {losses[-1]:.6g}, best {best_loss:.6g}); "
                "reduce step_size or check the measurement weights"
            )
        # a rising streak is never a plateau: let the divergence guard see it
        if rising == 0 and t >= cfg.plateau_window:
            prior_best = min(losses[: -cfg.plateau_window])
            recent_best = min(losses[-cfg.plateau_window :])
            if recent_best > (1 - cfg.plateau_rel) * prior_best:
                stop_reason = "plateau"
                break

    adapted = _split_params(best_params, q0, train_weights)
    delta = {
        "means": float(np.linalg.norm(adapted.means - q0.means)),
        "weights": float(np.linalg.norm(adapted.weights - q0.weights)),
    }
    report = AdaptationReport(
        loss_trajectory=[float(x) for x in losses],
        stop_reason=stop_reason,
        param_delta=delta,
    )
    if ind_model is not None:
        report.kl_measurement_before = kl_measurement(
            ind_model, q0, data, stats, grid, seed=cfg.seed
        )
        report.kl_measurement_after = kl_measurement(
            ind_model, adapted, data, stats, grid, seed=cfg.seed
        )
        report.kl_image_before = kl_image(
            ind_model, q0, grid, n_samples=n_image_samples, seed=cfg.seed
        )
        report.kl_image_after = kl_image(
            ind_model, adapted, grid, n_samples=n_image_samples, seed=cfg.seed
        )
    return adapted, report
