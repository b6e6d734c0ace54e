"""Ancestral sampling at arbitrary resolution plus guided variants.

All samplers share one reverse-chain core so the degenerate settings (zero
guidance scale, all-ones outpaint mask, zero low-pass operator) reproduce the
unconditional sampler bit for bit under a shared seed.  Two independent noise
streams are derived from the seed: the chain stream (initial state and the
per-step z) and an auxiliary stream for noising the outpaint source or the
reference image, so constrained sampling never perturbs the chain draws.

Guided updates, per reverse step t -> t-1 with unconditional proposal x_hat:

  score:      mean <- mean + scale * grad(log C)(x_t) before adding sigma * z
  outpaint:   x_{t-1} = x_hat * m + noisy_source_{t-1} * (1 - m)
  reference:  x_{t-1} = lowpass(noisy_ref_{t-1}) + x_hat - lowpass(x_hat)

At t = 1 the clean source/reference is substituted for its noisy version so
constrained regions carry no residual noise.  Output is clamped to [-1, 1]
only at the very end; intermediates are never clamped.
"""

import dataclasses

import torch

from .denoiser import Denoiser, predict_noise
from .errors import (
    DivergenceError,
    DivisibilityError,
    InvalidRangeError,
    ShapeMismatchError,
)
from .rng import make_generator
from .schedule import NoiseSchedule, forward_diffuse, posterior_mean

__all__ = [
    "GuidanceSpec",
    "OutpaintTask",
    "ReferenceTask",
    "SamplerState",
    "sample_uncond",
    "sample_score_guided",
    "sample_outpaint",
    "sample_reference_guided",
    "lowpass",
    "zero_lowpass",
    "AutogradScore",
    "QuadraticPull",
    "MeanColorScore",
    "PatchTemplateScore",
    "SCORE_REGISTRY",
    "make_score",
]


class AutogradScore:
    """Base for score functions: implement value(); the gradient is automatic."""

    def value(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def value_and_grad(self, x: torch.Tensor):
        xg = x.detach().requires_grad_(True)
        with torch.enable_grad():
            val = self.value(xg)
            (grad,) = torch.autograd.grad(val, xg)
        return float(val), grad.detach()


class QuadraticPull(AutogradScore):
    """log C(x) = -0.5 * ||x - target||^2; gradient is exactly target - x."""

    def __init__(self, target: torch.Tensor):
        self.target = target

    def value(self, x):
        return -0.5 * ((x - self.target) ** 2).sum()


class MeanColorScore(AutogradScore):
    """Pulls the per-channel mean toward a target color in [-1, 1] units."""

    def __init__(self, color, weight: float = 1.0):
        self.color = torch.as_tensor(color, dtype=torch.float32)
        self.weight = weight

    def value(self, x):
        means = x.mean(dim=(-2, -1))
        return -0.5 * self.weight * ((means - self.color.to(x.dtype)) ** 2).sum()


class PatchTemplateScore(AutogradScore):
    """Rewards correlation between the image and a small template patch,
    averaged over all positions."""

    def __init__(self, template: torch.Tensor, weight: float = 1.0):
        if template.ndim != 3:
            raise ShapeMismatchError("template must be (C, h, w)")
        self.template = template
        self.weight = weight

    def value(self, x):
        t = self.template.to(x.dtype)
        t = t - t.mean()
        norm = torch.sqrt((t ** 2).sum() + 1e-12)
        resp = torch.nn.functional.conv2d(x.unsqueeze(0), (t / norm).unsqueeze(0))
        return self.weight * resp.mean()


SCORE_REGISTRY = {
    "quadratic": QuadraticPull,
    "mean_color": MeanColorScore,
    "patch_template": PatchTemplateScore,
}


def make_score(name: str, **kwargs) -> AutogradScore:
    try:
        factory = SCORE_REGISTRY[name]
    except KeyError:
        raise InvalidRangeError(
            f"unknown score function {name!r}; known: {sorted(SCORE_REGISTRY)}"
        ) from None
    return factory(**kwargs)


@dataclasses.dataclass(frozen=True)
class GuidanceSpec:
    """A differentiable log-relevance function and its guidance scale."""

    score_fn: object
    scale: float

    def __post_init__(self):
        if self.scale < 0:
            raise InvalidRangeError(f"guidance scale must be >= 0, got {self.scale}")


@dataclasses.dataclass(frozen=True)
class OutpaintTask:
    """Source image and a {0,1} mask; 1 marks pixels to generate, 0 to keep."""

    source: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        if self.source.ndim != 3:
            raise ShapeMismatchError("source must be (C, H, W)")
        if self.mask.shape[-2:] != self.source.shape[-2:]:
            raise ShapeMismatchError(
                f"mask {tuple(self.mask.shape)} does not cover source "
                f"{tuple(self.source.shape)}"
            )
        ok = (self.mask == 0) | (self.mask == 1)
        if not bool(ok.all()):
            raise InvalidRangeError("mask values must be exactly 0 or 1")


@dataclasses.dataclass(frozen=True)
class ReferenceTask:
    """Reference image and the low-pass downsampling factor."""

    reference: torch.Tensor
    downsample_factor: int

    def __post_init__(self):
        if self.reference.ndim != 3:
            raise ShapeMismatchError("reference must be (C, H, W)")
        n = self.downsample_factor
        if n < 1:
            raise InvalidRangeError(f"downsample_factor must be >= 1, got {n}")
        _, h, w = self.reference.shape
        if h % n or w % n:
            raise DivisibilityError(
                f"reference {h}x{w} not divisible by downsample_factor {n}"
            )


@dataclasses.dataclass
class SamplerState:
    """Chain state handed to step hooks; x_t is the iterate entering step t."""

    x_t: torch.Tensor
    t: int
    rng: torch.Generator


def lowpass(image: torch.Tensor, factor: int) -> torch.Tensor:
    """Block-average the image over factor x factor cells and hold the cell
    value across the block.

    This is an orthogonal projection, so it is exactly linear and idempotent,
    which the reference-guided sampler's per-step invariant relies on.
    """
    if factor < 1:
        raise InvalidRangeError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return image
    x, squeeze = (image.unsqueeze(0), True) if image.ndim == 3 else (image, False)
    b, c, h, w = x.shape
    if h % factor or w % factor:
        raise DivisibilityError(
            f"image {h}x{w} not divisible by lowpass factor {factor}"
        )
    coarse = x.reshape(b, c, h // factor, factor, w // factor, factor).mean(dim=(3, 5))
    out = coarse.repeat_interleave(factor, dim=2).repeat_interleave(factor, dim=3)
    return out.squeeze(0) if squeeze else out


def zero_lowpass(image: torch.Tensor) -> torch.Tensor:
    """Degenerate low-pass operator returning all zeros (testing hook)."""
    return torch.zeros_like(image)


def _check_hw(denoiser: Denoiser, height: int, width: int):
    div = denoiser.config.divisor
    if height % div or width % div:
        raise DivisibilityError(
            f"requested {height}x{width}; sides must divide by {div}"
        )


def _ancestral(denoiser: Denoiser, schedule: NoiseSchedule, height: int,
               width: int, seed: int, *, guidance=None, outpaint=None,
               reference=None, lowpass_fn=None, clamp=True, step_hook=None):
    _check_hw(denoiser, height, width)
    chain = make_generator(seed, "chain")
    aux = make_generator(seed, "aux")
    shape = (denoiser.config.in_channels, height, width)
    x = torch.randn(shape, generator=chain)

    if outpaint is not None:
        source = outpaint.source.to(torch.float32)
        if tuple(source.shape) != shape:
            raise ShapeMismatchError(
                f"outpaint source {tuple(source.shape)} vs requested {shape}"
            )
        mask = outpaint.mask.to(torch.float32)
    if reference is not None:
        ref = reference.reference.to(torch.float32)
        if tuple(ref.shape) != shape:
            raise ShapeMismatchError(
                f"reference {tuple(ref.shape)} vs requested {shape}"
            )
        if lowpass_fn is None:
            n = reference.downsample_factor
            lowpass_fn = lambda img: lowpass(img, n)

    for t in range(schedule.T, 0, -1):
        if step_hook is not None:
            step_hook(SamplerState(x_t=x, t=t, rng=chain))
        with torch.no_grad():
            eps_hat = predict_noise(denoiser, x, t)
            mean = posterior_mean(x, eps_hat, t, schedule)
        if guidance is not None and guidance.scale != 0.0:
            val, grad = guidance.score_fn.value_and_grad(x)
            if not (torch.isfinite(grad).all() and torch.isfinite(torch.tensor(val))):
                raise DivergenceError(
                    f"nonfinite score gradient at step {t}", step=t)
            mean = mean + guidance.scale * grad
        if t > 1:
            z = torch.randn(shape, generator=chain)
            x = mean + float(schedule.sigma(t)) * z
        else:
            x = mean
        with torch.no_grad():
            if outpaint is not None:
                if t > 1:
                    noise = torch.randn(shape, generator=aux)
                    src = forward_diffuse(source, t - 1, noise, schedule).x_tilde
                else:
                    src = source
                x = x * mask + src * (1.0 - mask)
            if reference is not None:
                if t > 1:
                    noise = torch.randn(shape, generator=aux)
                    y = forward_diffuse(ref, t - 1, noise, schedule).x_tilde
                else:
                    y = ref
                x = lowpass_fn(y) + x - lowpass_fn(x)
    if step_hook is not None:
        step_hook(SamplerState(x_t=x, t=0, rng=chain))
    return x.clamp(-1.0, 1.0) if clamp else x


def sample_uncond(denoiser: Denoiser, schedule: NoiseSchedule, height: int,
                  width: int, seed: int, *, clamp: bool = True,
                  step_hook=None) -> torch.Tensor:
    """Draw one image of the requested size by full ancestral sampling."""
    return _ancestral(denoiser, schedule, height, width, seed,
                      clamp=clamp, step_hook=step_hook)


def sample_score_guided(denoiser: Denoiser, schedule: NoiseSchedule,
                        height: int, width: int, seed: int,
                        guidance: GuidanceSpec, *, clamp: bool = True,
                        step_hook=None) -> torch.Tensor:
    """Ancestral sampling with the posterior mean shifted by the score
    gradient, scaled by ``guidance.scale``."""
    return _ancestral(denoiser, schedule, height, width, seed,
                      guidance=guidance, clamp=clamp, step_hook=step_hook)


def sample_outpaint(denoiser: Denoiser, schedule: NoiseSchedule,
                    task: OutpaintTask, seed: int, *, clamp: bool = True,
                    step_hook=None) -> torch.Tensor:
    """Generate inside the mask while re-imposing a freshly noised copy of the
    source elsewhere at every step; the kept region ends exactly equal to the
    source."""
    _, h, w = task.source.shape
    return _ancestral(denoiser, schedule, h, w, seed, outpaint=task,
                      clamp=clamp, step_hook=step_hook)


def sample_reference_guided(denoiser: Denoiser, schedule: NoiseSchedule,
                            task: ReferenceTask, seed: int, *,
                            lowpass_fn=None, clamp: bool = True,
                            step_hook=None) -> torch.Tensor:
    """Force the iterate's low-frequency band to follow a noised copy of the
    reference while the model fills in the rest."""
    _, h, w = task.reference.shape
    return _ancestral(denoiser, schedule, h, w, seed, reference=task,
                      lowpass_fn=lowpass_fn, clamp=clamp, step_hook=step_hook)
