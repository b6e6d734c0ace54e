"""Single-image training: denoising loss, AdamW, EMA shadow, train loop.

The optimizer and EMA are pure functions over named parameter collections so
each update is independently checkable; the train loop is the only place that
mutates state.  Given (seed, config, image) the produced checkpoint is
bitwise-reproducible in single-threaded execution.
"""

import dataclasses
import math

import numpy as np
import torch

from .denoiser import Denoiser, DenoiserConfig, build_denoiser, predict_noise
from .errors import (
    DivergenceError,
    InvalidConfigError,
    InvalidRangeError,
    ShapeMismatchError,
)
from .rng import make_generator
from .schedule import NoiseSchedule, forward_diffuse

__all__ = [
    "TrainConfig",
    "AdamState",
    "Checkpoint",
    "denoising_loss",
    "optimizer_step",
    "ema_update",
    "init_adam_state",
    "train",
    "denoiser_from_checkpoint",
]

PRECISION_MODES = ("single", "half-compute-single-master")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 5000
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    batch: int = 8
    ema_decay: float = 0.9999
    seed: int = 0
    grad_clip_norm: float | None = 1.0
    precision: str = "single"

    def __post_init__(self):
        if self.total_steps < 1:
            raise InvalidConfigError(
                f"total_steps must be >= 1, got {self.total_steps}"
            )
        if self.learning_rate <= 0:
            raise InvalidConfigError("learning_rate must be > 0")
        if not (0.0 <= self.ema_decay <= 1.0):
            raise InvalidConfigError("ema_decay must lie in [0, 1]")
        if self.batch < 1:
            raise InvalidConfigError("batch must be >= 1")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise InvalidConfigError("grad_clip_norm must be positive or None")
        if self.precision not in PRECISION_MODES:
            raise InvalidConfigError(
                f"precision must be one of {PRECISION_MODES}, got {self.precision!r}"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclasses.dataclass
class AdamState:
    """First/second moment accumulators plus the update counter."""

    step: int
    m: dict
    v: dict


@dataclasses.dataclass(frozen=True)
class Checkpoint:
    """Everything needed to resume training or sample: configs plus both
    parameter sets (raw and EMA) as named float32 numpy arrays."""

    denoiser_config: DenoiserConfig
    schedule_params: tuple  # (T, beta_start, beta_end)
    raw_params: dict
    ema_params: dict
    step: int
    train_config: TrainConfig
    format_version: int = 1


def denoising_loss(denoiser: Denoiser, x0: torch.Tensor, t_draws,
                   eps_draws: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared noise-prediction error over the supplied draws.

    ``x0`` is one image (C, H, W); ``t_draws`` is a length-B sequence of
    timesteps and ``eps_draws`` a (B, C, H, W) stack of noise tensors.
    Returns a scalar tensor (keeps the autograd graph).
    """
    if x0.ndim != 3:
        raise ShapeMismatchError(f"x0 must be (C,H,W), got {tuple(x0.shape)}")
    if eps_draws.ndim != 4 or eps_draws.shape[1:] != x0.shape:
        raise ShapeMismatchError(
            f"eps_draws {tuple(eps_draws.shape)} inconsistent with image "
            f"{tuple(x0.shape)}"
        )
    t_arr = np.asarray(t_draws).reshape(-1)
    if t_arr.shape[0] != eps_draws.shape[0]:
        raise ShapeMismatchError(
            f"{t_arr.shape[0]} timesteps for {eps_draws.shape[0]} noise draws"
        )
    batch = x0.unsqueeze(0).expand_as(eps_draws)
    x_tilde = forward_diffuse(batch, t_arr, eps_draws, schedule).x_tilde
    eps_hat = predict_noise(denoiser, x_tilde, t_arr)
    return ((eps_draws - eps_hat) ** 2).mean()


def _check_names(a: dict, b: dict, what: str):
    if a.keys() != b.keys():
        only_a = sorted(set(a) - set(b))
        only_b = sorted(set(b) - set(a))
        raise ShapeMismatchError(f"{what}: name sets differ ({only_a} vs {only_b})")
    for k in a:
        if a[k].shape != b[k].shape:
            raise ShapeMismatchError(
                f"{what}: {k} has shapes {tuple(a[k].shape)} vs {tuple(b[k].shape)}"
            )


def init_adam_state(params: dict) -> AdamState:
    zeros = {k: torch.zeros_like(v) for k, v in params.items()}
    return AdamState(step=0, m=zeros,
                     v={k: torch.zeros_like(v) for k, v in params.items()})


def optimizer_step(params: dict, grads: dict, opt_state: AdamState,
                   learning_rate: float, weight_decay: float,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8):
    """One AdamW update with decoupled weight decay; returns new collections.

    Decay multiplies parameters by (1 - lr * wd) directly; it never passes
    through the moment estimates.
    """
    _check_names(params, grads, "optimizer_step")
    _check_names(params, opt_state.m, "optimizer_step moments")
    for k, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise DivergenceError(f"nonfinite gradient in {k!r}")
    t = opt_state.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = beta1 * opt_state.m[k] + (1.0 - beta1) * g
        v = beta2 * opt_state.v[k] + (1.0 - beta2) * g * g
        p = p * (1.0 - learning_rate * weight_decay)
        p = p - learning_rate * (m / bc1) / (torch.sqrt(v / bc2) + eps)
        new_params[k], new_m[k], new_v[k] = p, m, v
    return new_params, AdamState(step=t, m=new_m, v=new_v)


def ema_update(ema_params: dict, params: dict, decay: float) -> dict:
    """ema <- decay * ema + (1 - decay) * param, elementwise per array."""
    if not (0.0 <= decay <= 1.0):
        raise InvalidRangeError(f"decay must lie in [0, 1], got {decay}")
    _check_names(ema_params, params, "ema_update")
    return {k: decay * ema_params[k] + (1.0 - decay) * params[k]
            for k in params}


def _params_to_numpy(params: dict) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in params.items()}


def _make_checkpoint(net, ema, step, denoiser_config, schedule, train_config):
    raw = _params_to_numpy(dict(net.named_parameters()))
    return Checkpoint(
        denoiser_config=denoiser_config,
        schedule_params=(schedule.T, float(schedule.betas[0]),
                         float(schedule.betas[-1])),
        raw_params=raw,
        ema_params=_params_to_numpy(ema),
        step=step,
        train_config=train_config,
    )


def train(image: torch.Tensor, denoiser_config: DenoiserConfig,
          train_config: TrainConfig, schedule: NoiseSchedule, *,
          checkpoint_every: int = 10_000, checkpoint_callback=None,
          step_callback=None) -> Checkpoint:
    """Fit the noise predictor to one image.

    Each step draws ``batch`` independent (t, eps) pairs, minimizes the mean
    squared prediction error with AdamW, and folds the result into the EMA
    shadow.  ``step_callback(step, loss)`` observes the loss history;
    ``checkpoint_callback(checkpoint)`` fires every ``checkpoint_every`` steps
    and at completion.

    Raises:
        DivergenceError: if the loss or a gradient goes nonfinite, carrying
            the offending step index.
    """
    if image.ndim != 3:
        raise ShapeMismatchError(f"image must be (C,H,W), got {tuple(image.shape)}")
    div = denoiser_config.divisor
    if image.shape[1] % div or image.shape[2] % div:
        raise ShapeMismatchError(
            f"image sides {tuple(image.shape[1:])} must divide by {div}"
        )
    if float(image.abs().max()) > 1.0 + 1e-6:
        raise InvalidRangeError("image values must be normalized to [-1, 1]")

    net = build_denoiser(denoiser_config, seed=train_config.seed)
    image = image.to(torch.float32)
    ema = {k: v.detach().clone() for k, v in net.named_parameters()}
    opt_state = init_adam_state(dict(net.named_parameters()))
    gen = make_generator(train_config.seed, "train-draws")

    half = train_config.precision == "half-compute-single-master"
    for step in range(1, train_config.total_steps + 1):
        t_draws = torch.randint(1, schedule.T + 1, (train_config.batch,),
                                generator=gen)
        eps = torch.randn((train_config.batch,) + tuple(image.shape),
                          generator=gen)
        net.zero_grad(set_to_none=True)
        if half:
            with torch.autocast("cpu", dtype=torch.bfloat16):
                loss = denoising_loss(net, image, t_draws.numpy(), eps, schedule)
        else:
            loss = denoising_loss(net, image, t_draws.numpy(), eps, schedule)
        loss_val = float(loss.detach())
        if not math.isfinite(loss_val):
            raise DivergenceError(f"nonfinite loss at step {step}", step=step)
        loss.backward()
        if train_config.grad_clip_norm is not None:
            torch.nn.utils.clip_grad_norm_(net.parameters(),
                                           train_config.grad_clip_norm)
        params = dict(net.named_parameters())
        grads = {k: p.grad.detach() for k, p in params.items()}
        try:
            new_params, opt_state = optimizer_step(
                {k: p.detach() for k, p in params.items()}, grads, opt_state,
                train_config.learning_rate, train_config.weight_decay)
        except DivergenceError as e:
            raise DivergenceError(f"{e} at step {step}", step=step) from None
        with torch.no_grad():
            for k, p in params.items():
                p.copy_(new_params[k])
        ema = ema_update(ema, new_params, train_config.ema_decay)
        if step_callback is not None:
            step_callback(step, loss_val)
        if checkpoint_callback is not None and (
                step % checkpoint_every == 0 or step == train_config.total_steps):
            checkpoint_callback(_make_checkpoint(
                net, ema, step, denoiser_config, schedule, train_config))
    return _make_checkpoint(net, ema, train_config.total_steps,
                            denoiser_config, schedule, train_config)


def denoiser_from_checkpoint(checkpoint: Checkpoint,
                             use_ema: bool = True) -> Denoiser:
    """Rebuild the network and load the EMA (default) or raw parameters."""
    net = Denoiser(checkpoint.denoiser_config)
    source = checkpoint.ema_params if use_ema else checkpoint.raw_params
    state = {k: torch.from_numpy(np.asarray(v)) for k, v in source.items()}
    net.load_state_dict(state)
    return net
