"""Forward/reverse diffusion processes and the noise-prediction loss.

Timesteps are 1-based: t runs over [1, T] and schedule arrays index at
t - 1. The reverse step uses the fixed variance sigma_t^2 = beta_t; the
final step (t = 1) is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError
from .masking import MaskPlan
from .tensor import Tensor, mse

Array = np.ndarray


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with precomputed derived coefficients."""

    timesteps: int
    beta: Array
    alpha: Array
    alpha_bar: Array
    sqrt_alpha_bar: Array
    sqrt_one_minus_alpha_bar: Array
    recip_sqrt_alpha: Array
    eps_coef: Array           # beta_t / sqrt(1 - alpha_bar_t)
    sigma: Array              # sqrt(beta_t), the fixed reverse-step stddev
    posterior_variance: Array  # beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)


def make_schedule(
    timesteps: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    if timesteps < 1:
        raise ConfigurationError(f"timesteps must be >= 1, got {timesteps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    beta = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    return NoiseSchedule(
        timesteps=timesteps,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sqrt_alpha_bar=np.sqrt(alpha_bar),
        sqrt_one_minus_alpha_bar=np.sqrt(1.0 - alpha_bar),
        recip_sqrt_alpha=1.0 / np.sqrt(alpha),
        eps_coef=beta / np.sqrt(1.0 - alpha_bar),
        sigma=np.sqrt(beta),
        posterior_variance=beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar),
    )


def respace(sched: NoiseSchedule, num_steps: int) -> tuple[NoiseSchedule, Array]:
    """Subsample a schedule into a shorter ancestral chain.

    Position k of the returned schedule reuses the native timestep
    ``indices[k-1]``: its alpha_bar entry is the native value there (so
    marginals agree exactly) and its beta entry absorbs all the noise of
    the skipped segment. Asking for the full length returns the schedule
    unchanged; rounding may merge neighbouring positions, so the chain
    can come out slightly shorter than requested.
    """
    if not 1 <= num_steps <= sched.timesteps:
        raise ConfigurationError(
            f"sampling budget must lie in [1, {sched.timesteps}], got {num_steps}"
        )
    if num_steps == sched.timesteps:
        return sched, np.arange(1, sched.timesteps + 1, dtype=np.int64)
    if num_steps == 1:
        indices = np.array([sched.timesteps], dtype=np.int64)
    else:
        indices = np.unique(
            np.round(np.linspace(1, sched.timesteps, num_steps)).astype(np.int64)
        )
    alpha_bar = sched.alpha_bar[indices - 1]
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    alpha = alpha_bar / alpha_bar_prev
    beta = 1.0 - alpha
    respaced = NoiseSchedule(
        timesteps=len(indices),
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sqrt_alpha_bar=np.sqrt(alpha_bar),
        sqrt_one_minus_alpha_bar=np.sqrt(1.0 - alpha_bar),
        recip_sqrt_alpha=1.0 / np.sqrt(alpha),
        eps_coef=beta / np.sqrt(1.0 - alpha_bar),
        sigma=np.sqrt(beta),
        posterior_variance=beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar),
    )
    return respaced, indices


@dataclass
class DiffusionStepInput:
    """One denoising step's tokens and conditioning bundle.

    Arrays are plain numpy; gradients flow only through model parameters.
    ``visible`` is None outside training, ``coarse`` is None at the
    coarsest level. Positions are flat indices into the level's token
    grid; ``grid`` is that level's (rows, cols).
    """

    x_masked: Array                 # (B, N_m, p*p*C) noisy tokens being denoised
    t: Array                        # (B,) ints in [1, T]
    masked_positions: Array         # (N_m,) grid indices
    source: Array                   # (B, N, p*p*C)
    grid: tuple[int, int]
    level: int
    num_levels: int
    visible: Array | None = None    # (B, N_v, p*p*C)
    visible_positions: Array | None = None
    coarse: Array | None = None     # (B, N, p*p*C)
    source_positions: Array = field(default=None)  # defaults to full grid

    def __post_init__(self):
        self.t = np.atleast_1d(np.asarray(self.t, dtype=np.int64))
        if self.source_positions is None:
            self.source_positions = np.arange(
                self.grid[0] * self.grid[1], dtype=np.int64
            )


def _t_indices(t, timesteps: int) -> Array:
    idx = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if idx.min() < 1 or idx.max() > timesteps:
        raise ContractError(
            f"t must lie in [1, {timesteps}], got range "
            f"[{idx.min()}, {idx.max()}]"
        )
    return idx - 1


def _per_sample(coef: Array, ndim: int) -> Array:
    """Reshape a (B,) coefficient vector to broadcast over sample dims."""
    return coef.reshape(coef.shape + (1,) * (ndim - coef.ndim))


def q_sample(x0: Array, t, eps: Array, sched: NoiseSchedule) -> Array:
    """Closed-form forward marginal: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ContractError(f"x0 {x0.shape} and eps {eps.shape} differ")
    idx = _t_indices(t, sched.timesteps)
    a = _per_sample(sched.sqrt_alpha_bar[idx], x0.ndim)
    b = _per_sample(sched.sqrt_one_minus_alpha_bar[idx], x0.ndim)
    return a * x0 + b * eps


def q_step(x_prev: Array, t, eps: Array, sched: NoiseSchedule) -> Array:
    """Single forward Markov step: sqrt(1 - beta_t) x_prev + sqrt(beta_t) eps."""
    x_prev = np.asarray(x_prev, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x_prev.shape != eps.shape:
        raise ContractError(f"x_prev {x_prev.shape} and eps {eps.shape} differ")
    idx = _t_indices(t, sched.timesteps)
    a = _per_sample(np.sqrt(sched.alpha[idx]), x_prev.ndim)
    b = _per_sample(sched.sigma[idx], x_prev.ndim)
    return a * x_prev + b * eps


def p_sample(
    step: DiffusionStepInput,
    eps_hat: Array,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> Array:
    """One ancestral reverse step; deterministic at t = 1.

    mu = (1/sqrt(a_t)) (x_t - (beta_t/sqrt(1-ab_t)) eps_hat), then
    x_{t-1} = mu + sqrt(beta_t) z with z = 0 where t = 1. The noise draw
    happens unconditionally so chain rng consumption is t-independent.
    """
    x = np.asarray(
        step.x_masked.data if isinstance(step.x_masked, Tensor) else step.x_masked,
        dtype=np.float64,
    )
    eps_hat = np.asarray(
        eps_hat.data if isinstance(eps_hat, Tensor) else eps_hat, dtype=np.float64
    )
    if x.shape != eps_hat.shape:
        raise ContractError(f"x_t {x.shape} and eps_hat {eps_hat.shape} differ")
    idx = _t_indices(step.t, sched.timesteps)
    mu = _per_sample(sched.recip_sqrt_alpha[idx], x.ndim) * (
        x - _per_sample(sched.eps_coef[idx], x.ndim) * eps_hat
    )
    z = rng.standard_normal(x.shape)
    keep = _per_sample((idx > 0).astype(np.float64), x.ndim)
    return mu + _per_sample(sched.sigma[idx], x.ndim) * z * keep


def loss_eps(eps: Array, eps_hat: Tensor, mask_plan: MaskPlan) -> Tensor:
    """MSE between injected and predicted noise over masked positions only.

    ``eps`` is the full (B, N, D) noise applied to the image; the plan
    selects the masked rows it is compared on.
    """
    if mask_plan.n_masked == 0:
        raise ContractError("loss_eps needs a non-empty masked set")
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim != 3 or eps.shape[1] != mask_plan.n_tokens:
        raise ContractError(
            f"eps must be (B, N={mask_plan.n_tokens}, D), got {eps.shape}"
        )
    target = eps[:, mask_plan.masked_idx]
    return mse(eps_hat, Tensor(target))
