"""Discrete diffusion process: variance schedule, forward noising, reverse step.

Conventions
-----------
Timesteps are 1-based: ``t = 1`` is the least-noisy step, ``t = T`` the most.
All schedule arithmetic is carried out in float64 so the cumulative products
stay accurate at ``T = 1000``; image tensors keep whatever dtype they arrive
with, and the scalar coefficients are cast on use.

The forward marginal is

    x_tilde = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps,

with ``abar_t`` the cumulative product of ``1 - beta_s`` for ``s <= t``.  The
reverse ancestral step is the standard DDPM posterior mean plus ``sigma_t * z``
with ``sigma_t**2 = beta_t``.
"""

import dataclasses
import math

import numpy as np
import torch

from .errors import InvalidRangeError, ShapeMismatchError, TimestepRangeError

__all__ = [
    "NoiseSchedule",
    "NoisySample",
    "build_linear_schedule",
    "forward_diffuse",
    "posterior_mean",
    "reverse_step",
    "snr",
]


@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    """Immutable variance schedule.

    The arrays are 0-indexed internally: ``betas[i]`` belongs to timestep
    ``i + 1``.  Use the 1-based accessors (`beta`, `alpha`, `alpha_bar`,
    `sigma`) anywhere a timestep is in play.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars", "sigmas"):
            arr = getattr(self, name)
            arr.flags.writeable = False

    def _index(self, t):
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer):
            if not np.all(t == np.floor(t)):
                raise TimestepRangeError(f"timesteps must be integers, got {t}")
            t = t.astype(np.int64)
        if np.any(t < 1) or np.any(t > self.T):
            raise TimestepRangeError(
                f"timestep {t} outside [1, {self.T}]"
            )
        return t - 1

    def beta(self, t):
        return self.betas[self._index(t)]

    def alpha(self, t):
        return self.alphas[self._index(t)]

    def alpha_bar(self, t):
        return self.alpha_bars[self._index(t)]

    def sigma(self, t):
        return self.sigmas[self._index(t)]


@dataclasses.dataclass(frozen=True)
class NoisySample:
    """A forward-diffused image together with the noise that produced it."""

    x_tilde: torch.Tensor
    t: object
    eps: torch.Tensor


def build_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linearly spaced variances from ``beta_start`` to ``beta_end`` inclusive.

    Raises:
        InvalidRangeError: unless ``T >= 1`` and ``0 < beta_start <= beta_end < 1``.
    """
    if not (isinstance(T, (int, np.integer)) and T >= 1):
        raise InvalidRangeError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidRangeError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sigmas = np.sqrt(betas)
    return NoiseSchedule(T=int(T), betas=betas, alphas=alphas,
                         alpha_bars=alpha_bars, sigmas=sigmas)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeMismatchError(
            f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ"
        )


def _per_sample_coeff(values: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    """Reshape per-sample scalars to broadcast over (B, C, H, W)."""
    coeff = torch.as_tensor(values, dtype=like.dtype)
    return coeff.reshape((-1,) + (1,) * (like.ndim - 1))


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor,
                    schedule: NoiseSchedule) -> NoisySample:
    """Sample the forward marginal at timestep ``t``.

    ``t`` may be a scalar or, for batched ``x0``/``eps`` of shape (B, C, H, W),
    a length-B sequence of per-sample timesteps.
    """
    _check_same_shape(x0, eps, "forward_diffuse")
    abar = schedule.alpha_bar(t)
    if np.ndim(abar) == 0:
        c_signal = math.sqrt(float(abar))
        c_noise = math.sqrt(1.0 - float(abar))
        x_tilde = c_signal * x0 + c_noise * eps
    else:
        if x0.ndim < 2 or abar.shape[0] != x0.shape[0]:
            raise ShapeMismatchError(
                f"got {np.ndim(np.asarray(t))}-d timesteps of length "
                f"{np.size(np.asarray(t))} for batch of {x0.shape[0]}"
            )
        c_signal = _per_sample_coeff(np.sqrt(abar), x0)
        c_noise = _per_sample_coeff(np.sqrt(1.0 - abar), x0)
        x_tilde = c_signal * x0 + c_noise * eps
    return NoisySample(x_tilde=x_tilde, t=t, eps=eps)


def posterior_mean(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int,
                   schedule: NoiseSchedule) -> torch.Tensor:
    """Mean of the reverse step: (x_t - beta_t/sqrt(1-abar_t) * eps_hat)/sqrt(alpha_t)."""
    _check_same_shape(x_t, eps_hat, "posterior_mean")
    alpha = float(schedule.alpha(t))
    abar = float(schedule.alpha_bar(t))
    beta = float(schedule.beta(t))
    c_eps = beta / math.sqrt(1.0 - abar)
    return (x_t - c_eps * eps_hat) / math.sqrt(alpha)


def reverse_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int,
                 z: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """One ancestral denoising step from ``x_t`` to ``x_{t-1}``.

    ``z`` must be all zeros at ``t = 1`` (no noise on the final step).
    """
    _check_same_shape(x_t, eps_hat, "reverse_step")
    _check_same_shape(x_t, z, "reverse_step")
    t_arr = int(np.asarray(t))
    mean = posterior_mean(x_t, eps_hat, t_arr, schedule)
    if t_arr == 1:
        if bool(torch.any(z != 0)):
            raise InvalidRangeError("z must be zero at t = 1")
        return mean
    return mean + float(schedule.sigma(t_arr)) * z


def snr(schedule: NoiseSchedule, t) -> float:
    """Signal-to-noise ratio abar_t / (1 - abar_t) at timestep ``t``."""
    abar = schedule.alpha_bar(t)
    return abar / (1.0 - abar)
