"""Noise schedules, forward diffusion, guidance, and reverse samplers.

Process math operates on plain numpy arrays (nothing here needs
gradients; the trainable part is the noise predictor). Two reverse
steps are provided: the ancestral DDPM update, which algebraically
inverts the forward marginal and is the default, and a literal
shrink-and-subtract variant kept for comparison because it is *not*
the exact inverse of the forward process. Sampling with fewer steps
than the schedule length walks a uniformly strided sub-schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import RngStream


@dataclass
class NoiseSchedule:
    """Per-step variances and their cumulative products.

    ``alpha_bar[t]`` is the product of (1 - beta[s]) for s <= t; the
    step indices carried in ``timesteps`` map sub-schedule positions
    back to the parent schedule (identity for a full schedule).
    """

    beta: np.ndarray
    alpha_bar: np.ndarray
    timesteps: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.beta)

    def check_range(self, t) -> None:
        t = np.asarray(t)
        if t.size and (t.min() < 0 or t.max() >= self.steps):
            raise ContractError(f"timestep {t} outside [0, {self.steps})")


def make_schedule(num_steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule with cumulative products in float64."""
    if num_steps < 1:
        raise ContractError(f"schedule needs at least one step, got {num_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ContractError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    beta = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar,
                         timesteps=np.arange(num_steps, dtype=np.int64))


def strided_schedule(sched: NoiseSchedule, steps: int) -> NoiseSchedule:
    """Uniformly strided sub-schedule visiting ``steps`` of the parent steps.

    Effective betas are 1 - abar[t_k]/abar[t_{k-1}], so the sub-schedule's
    cumulative products telescope back to the parent's.
    """
    if not 1 <= steps <= sched.steps:
        raise ContractError(f"steps must be in [1, {sched.steps}], got {steps}")
    if steps == sched.steps:
        return sched
    ts = (np.arange(1, steps + 1, dtype=np.int64) * sched.steps) // steps - 1
    abar = sched.alpha_bar[ts]
    prev = np.concatenate([[1.0], abar[:-1]])
    beta = 1.0 - abar / prev
    return NoiseSchedule(beta=beta, alpha_bar=abar, timesteps=ts)


def diffuse_step(x_prev: np.ndarray, t: int, sched: NoiseSchedule,
                 eps: np.ndarray) -> np.ndarray:
    """One forward Markov step: sqrt(1-beta_t) x + sqrt(beta_t) eps."""
    sched.check_range(t)
    if np.shape(x_prev) != np.shape(eps):
        raise DimensionError(f"noise shape {np.shape(eps)} != data shape {np.shape(x_prev)}")
    b = sched.beta[t]
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * eps


def _expand(coef: np.ndarray, ndim: int) -> np.ndarray:
    return np.asarray(coef).reshape((-1,) + (1,) * (ndim - 1))


def diffuse_to(x0: np.ndarray, t, sched: NoiseSchedule, eps: np.ndarray) -> np.ndarray:
    """Jump to the step-t marginal: sqrt(abar_t) x0 + sqrt(1-abar_t) eps.

    ``t`` may be a scalar or one index per batch row; t = -1 means
    "before any noise" and returns x0 exactly.
    """
    if np.shape(x0) != np.shape(eps):
        raise DimensionError(f"noise shape {np.shape(eps)} != data shape {np.shape(x0)}")
    t_arr = np.asarray(t)
    if t_arr.size and t_arr.min() >= 0:
        sched.check_range(t_arr)
    elif t_arr.size and t_arr.min() < -1:
        raise ContractError(f"timestep {t} outside [-1, {sched.steps})")
    abar = np.where(t_arr < 0, 1.0, sched.alpha_bar[np.maximum(t_arr, 0)])
    if t_arr.ndim:
        abar = _expand(abar, np.ndim(x0))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float,
                mode: str = "blend") -> np.ndarray:
    """Guided prediction.

    ``blend`` is w*cond + (1-w)*uncond; ``extrapolate`` is
    uncond + w*(cond - uncond). The two coincide algebraically for every
    w; both are kept so that claim stays checkable. Endpoints w=1 / w=0
    return the respective input bit-exactly.
    """
    if np.shape(eps_cond) != np.shape(eps_uncond):
        raise DimensionError(
            f"cfg_combine shapes differ: {np.shape(eps_cond)} vs {np.shape(eps_uncond)}"
        )
    if w == 1.0:
        return np.array(eps_cond, copy=True)
    if w == 0.0:
        return np.array(eps_uncond, copy=True)
    if mode == "blend":
        return w * eps_cond + (1.0 - w) * eps_uncond
    if mode == "extrapolate":
        return eps_uncond + w * (eps_cond - eps_uncond)
    raise ContractError(f"unknown cfg mode {mode!r}")


def reverse_step_paper(x_t: np.ndarray, t: int, eps_hat: np.ndarray,
                       sched: NoiseSchedule) -> np.ndarray:
    """Literal shrink-and-subtract reverse update.

    sqrt(1-beta_t) x_t - sqrt(beta_t) eps_hat. Not the algebraic inverse
    of the forward marginal; agrees with the ancestral mean only to first
    order as beta_t -> 0. Kept selectable for comparison.
    """
    sched.check_range(t)
    b = sched.beta[t]
    return np.sqrt(1.0 - b) * x_t - np.sqrt(b) * eps_hat


def reverse_step_ddpm(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule,
                      noise: np.ndarray | None = None) -> np.ndarray:
    """Ancestral DDPM update with sigma_t = sqrt(beta_t).

    (x_t - beta_t/sqrt(1-abar_t) eps_hat)/sqrt(1-beta_t) + sigma_t * xi.
    The final step (t=0) is deterministic; pass ``noise=None`` for the
    deterministic part at any step.
    """
    sched.check_range(t)
    b = sched.beta[t]
    abar = sched.alpha_bar[t]
    mean = (x_t - (b / np.sqrt(1.0 - abar)) * eps_hat) / np.sqrt(1.0 - b)
    if t == 0 or noise is None:
        return mean
    return mean + np.sqrt(b) * noise


def sample_loop(eps_fn, rngs, item_shape, sched: NoiseSchedule, steps: int, sampler: str,
                dtype=np.float32) -> np.ndarray:
    """Iterate reverse steps from seeded Gaussian noise, one stream per item.

    ``eps_fn(x, t_parent)`` returns the (already guided) noise
    prediction for the whole batch; ``t_parent`` indexes the parent
    schedule so the model sees its trained timestep ids. Every batch
    row draws from its own stream, so a batched run is bit-identical
    to sampling the items one at a time.
    """
    if sampler not in ("ddpm", "paper"):
        raise ContractError(f"unknown sampler {sampler!r}")
    rngs = list(rngs)
    sub = strided_schedule(sched, steps)
    x = np.stack([r.normal(item_shape, dtype=dtype) for r in rngs])
    for k in range(sub.steps - 1, -1, -1):
        eps_hat = eps_fn(x, int(sub.timesteps[k]))
        if sampler == "ddpm":
            if k > 0:
                noise = np.stack([r.normal(item_shape, dtype=dtype) for r in rngs])
            else:
                noise = None
            x = reverse_step_ddpm(x, k, eps_hat, sub, noise)
        else:
            x = reverse_step_paper(x, k, eps_hat, sub)
        x = x.astype(dtype, copy=False)
    return x


def noise_mse(eps: np.ndarray, eps_hat: np.ndarray) -> float:
    """Mean squared error between true and predicted noise."""
    d = np.asarray(eps, dtype=np.float64) - np.asarray(eps_hat, dtype=np.float64)
    return float(np.mean(d * d))
