"""Patch-wise fully convolutional noise predictor and receptive-field tooling.

The network is a shallow U-Net of time-embedded residual blocks with no
attention anywhere, so it is fully convolutional and accepts any input whose
sides divide by ``2**(stages - 1)``.  Normalization is computed per spatial
position (channel-group statistics at each pixel independently); this keeps
every operation spatially local, which the locality and receptive-field
contracts depend on.  Standard group normalization pools statistics over the
whole feature map and would couple every pixel to every other.

Receptive fields are reported two ways: analytically, by propagating an
integer interval through the per-layer growth rules of the block plan, and
empirically, by perturbing one input pixel and tracking the changed region
through the network segment by segment.  The change mask is re-injected at a
fixed amplitude after every segment; a single end-to-end difference would
decay geometrically with depth (roughly 0.3x per convolution at the box
frontier) and drop below any fixed threshold long before the theoretical
boundary, so deep configurations would be undermeasured.
"""

import dataclasses
import math

import torch
from torch import nn
from torch.nn import functional as F

from .errors import (
    DivisibilityError,
    InvalidConfigError,
    ProbeTooSmallError,
    TimestepRangeError,
)
from .rng import make_generator

__all__ = [
    "DenoiserConfig",
    "Denoiser",
    "ReceptiveField",
    "build_denoiser",
    "predict_noise",
    "receptive_field",
    "impulse_probe",
    "PRESETS",
    "RF_SWEEP_PRESET_NAMES",
    "DEFAULT_REFERENCE_HW",
    "resolve_preset",
]

# Reference image size used when quoting a receptive field as a ratio
# "to the full image"; roughly the short side of the training images the
# canonical sweep presets were tuned against.
DEFAULT_REFERENCE_HW = (280, 280)

PROBE_THRESHOLD = 1e-7
PROBE_EPS = 1e-3


@dataclasses.dataclass(frozen=True)
class DenoiserConfig:
    """Architecture description for the noise predictor.

    ``channels`` has one entry per stage; stage ``i`` runs at 1/2**i of the
    input resolution.  Encoder stages hold ``enc_resblocks`` time-embedded
    residual blocks each, decoder stages ``dec_resblocks``.
    """

    stages: int = 3
    channels: tuple = (64, 128, 256)
    enc_resblocks: int = 1
    dec_resblocks: int = 2
    kernel_size: int = 3
    time_embed_dim: int = 256
    norm_groups: int = 8
    zero_init_output: bool = True
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        self.validate()

    def validate(self):
        if self.stages < 1:
            raise InvalidConfigError(f"stages must be >= 1, got {self.stages}")
        if len(self.channels) != self.stages:
            raise InvalidConfigError(
                f"channels has {len(self.channels)} entries for {self.stages} stages"
            )
        if any(c <= 0 for c in self.channels):
            raise InvalidConfigError(f"channels must be positive, got {self.channels}")
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise InvalidConfigError(
                f"kernel_size must be odd and >= 3, got {self.kernel_size}"
            )
        if self.time_embed_dim < 1:
            raise InvalidConfigError("time_embed_dim must be >= 1")
        if self.enc_resblocks < 1 or self.dec_resblocks < 1:
            raise InvalidConfigError("resblock counts must be >= 1")
        if self.norm_groups < 1:
            raise InvalidConfigError("norm_groups must be >= 1")
        for c in self.channels:
            if c % self.norm_groups != 0:
                raise InvalidConfigError(
                    f"norm_groups={self.norm_groups} does not divide channel width {c}"
                )
        if self.in_channels < 1:
            raise InvalidConfigError("in_channels must be >= 1")

    @property
    def divisor(self) -> int:
        """Input sides must be multiples of this."""
        return 2 ** (self.stages - 1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


PRESETS = {
    # 3 stages at 1, 1/2, 1/4 resolution, widths 64/128/256, one encoder and
    # two decoder resblocks per stage.
    "default": DenoiserConfig(),
    # High-resolution variant: 4 stages, widths up to 512, one extra resblock
    # per stage on both sides.
    "enhanced": DenoiserConfig(
        stages=4, channels=(64, 128, 256, 512), enc_resblocks=2, dec_resblocks=3
    ),
    # Desk-scale configurations for CPU experiments on ~64 px crops.
    "small": DenoiserConfig(
        stages=2, channels=(16, 32), enc_resblocks=1, dec_resblocks=2,
        time_embed_dim=64,
    ),
    "desk-small": DenoiserConfig(
        stages=1, channels=(16,), enc_resblocks=1, dec_resblocks=1,
        time_embed_dim=64,
    ),
    "desk-mid": DenoiserConfig(
        stages=1, channels=(16,), enc_resblocks=2, dec_resblocks=3,
        time_embed_dim=64,
    ),
    "desk-large": DenoiserConfig(
        stages=2, channels=(16, 32), enc_resblocks=1, dec_resblocks=2,
        time_embed_dim=64,
    ),
    # Canonical receptive-field ladder (ratios ~0.07 / 0.17 / 0.36 / 0.74
    # against DEFAULT_REFERENCE_HW).
    "rf-tiny": DenoiserConfig(stages=1, channels=(64,), enc_resblocks=1,
                              dec_resblocks=2),
    "rf-small": DenoiserConfig(stages=2, channels=(64, 128), enc_resblocks=1,
                               dec_resblocks=2),
    "rf-mid": DenoiserConfig(),
    "rf-large": DenoiserConfig(stages=4, channels=(64, 128, 256, 512),
                               enc_resblocks=1, dec_resblocks=2),
}

RF_SWEEP_PRESET_NAMES = ("rf-tiny", "rf-small", "rf-mid", "rf-large")


def resolve_preset(name_or_config) -> DenoiserConfig:
    """Accept a preset name or pass a DenoiserConfig through."""
    if isinstance(name_or_config, DenoiserConfig):
        return name_or_config
    try:
        return PRESETS[name_or_config]
    except KeyError:
        raise InvalidConfigError(
            f"unknown denoiser preset {name_or_config!r}; "
            f"known: {', '.join(sorted(PRESETS))}"
        ) from None


class PositionalGroupNorm(nn.Module):
    """Channel-group standardization computed independently at every pixel.

    Unlike ``nn.GroupNorm`` no spatial pooling is involved, so the output at a
    pixel depends only on the input at that pixel.
    """

    def __init__(self, groups: int, channels: int, eps: float = 1e-6):
        super().__init__()
        if channels % groups != 0:
            raise InvalidConfigError(
                f"norm groups {groups} do not divide {channels} channels"
            )
        self.groups = groups
        self.channels = channels
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        b, c, h, w = x.shape
        g = self.groups
        xg = x.reshape(b, g, c // g, h, w)
        mean = xg.mean(dim=2, keepdim=True)
        var = xg.var(dim=2, keepdim=True, unbiased=False)
        xg = (xg - mean) / torch.sqrt(var + self.eps)
        x = xg.reshape(b, c, h, w)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class TimeResBlock(nn.Module):
    """norm -> silu -> conv, add per-channel time bias, norm -> silu -> conv, skip."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, groups: int,
                 kernel: int):
        super().__init__()
        pad = kernel // 2
        self.norm1 = PositionalGroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, kernel, padding=pad)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = PositionalGroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, kernel, padding=pad)
        if in_ch != out_ch:
            self.skip = nn.Conv2d(in_ch, out_ch, 1)
        else:
            self.skip = nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of (possibly fractional) timestep indices."""
    half = max(dim // 2, 1)
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half
    )
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    return emb[:, :dim]


class Denoiser(nn.Module):
    """The noise predictor eps_hat(x_t, t).

    The forward pass walks an explicit step plan (see :meth:`plan`) so the
    impulse probe can replay the exact same computation segment by segment.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        config.validate()
        self.config = config
        ch = config.channels
        k = config.kernel_size
        pad = k // 2
        d = config.time_embed_dim
        g = config.norm_groups

        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.stem = nn.Conv2d(config.in_channels, ch[0], k, padding=pad)

        self.enc_stages = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i in range(config.stages):
            blocks = nn.ModuleList(
                TimeResBlock(ch[i], ch[i], d, g, k)
                for _ in range(config.enc_resblocks)
            )
            self.enc_stages.append(blocks)
            if i < config.stages - 1:
                self.downs.append(nn.Conv2d(ch[i], ch[i + 1], k, stride=2,
                                            padding=pad))

        self.ups = nn.ModuleList()
        self.dec_stages = nn.ModuleList()
        for i in range(config.stages):
            if i < config.stages - 1:
                self.ups.append(nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(ch[i + 1], ch[i], k, padding=pad),
                ))
                first_in = 2 * ch[i]  # upsampled features + encoder skip
            else:
                first_in = ch[i]  # bottom stage consumes the encoder output
            blocks = nn.ModuleList()
            for j in range(config.dec_resblocks):
                blocks.append(TimeResBlock(first_in if j == 0 else ch[i],
                                           ch[i], d, g, k))
            self.dec_stages.append(blocks)

        self.out_norm = PositionalGroupNorm(g, ch[0])
        self.out_conv = nn.Conv2d(ch[0], config.in_channels, k, padding=pad)

    def plan(self):
        """Execution plan: ("module"|"tblock", module, tag) | ("save"|"cat", i)."""
        cfg = self.config
        steps = [("module", self.stem, "stem")]
        for i in range(cfg.stages):
            for j, blk in enumerate(self.enc_stages[i]):
                steps.append(("tblock", blk, f"enc{i}.{j}"))
            if i < cfg.stages - 1:
                steps.append(("save", i, f"skip{i}"))
                steps.append(("module", self.downs[i], f"down{i}"))
        for j, blk in enumerate(self.dec_stages[cfg.stages - 1]):
            steps.append(("tblock", blk, f"dec{cfg.stages - 1}.{j}"))
        for i in range(cfg.stages - 2, -1, -1):
            steps.append(("module", self.ups[i], f"up{i}"))
            steps.append(("cat", i, f"cat{i}"))
            for j, blk in enumerate(self.dec_stages[i]):
                steps.append(("tblock", blk, f"dec{i}.{j}"))
        steps.append(("module", self._head, "head"))
        return steps

    def _head(self, h):
        return self.out_conv(F.silu(self.out_norm(h)))

    def embed_time(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(timestep_embedding(t, self.config.time_embed_dim))

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        temb = self.embed_time(t)
        h = x
        skips = {}
        for step in self.plan():
            kind = step[0]
            if kind == "module":
                h = step[1](h)
            elif kind == "tblock":
                h = step[1](h, temb)
            elif kind == "save":
                skips[step[1]] = h
            elif kind == "cat":
                h = torch.cat([h, skips.pop(step[1])], dim=1)
        return h

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_denoiser(config: DenoiserConfig, seed: int) -> Denoiser:
    """Construct and deterministically initialize a denoiser.

    Same (config, seed) gives bitwise-identical parameters: weights are drawn
    from a dedicated generator in registration order.
    """
    config.validate()
    net = Denoiser(config)
    g = make_generator(seed, "denoiser-init")
    with torch.no_grad():
        for _, mod in net.named_modules():
            if isinstance(mod, nn.Conv2d):
                fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
                mod.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=g)
                mod.bias.zero_()
            elif isinstance(mod, nn.Linear):
                mod.weight.normal_(0.0, math.sqrt(1.0 / mod.in_features),
                                   generator=g)
                mod.bias.zero_()
            elif isinstance(mod, PositionalGroupNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
        if config.zero_init_output:
            net.out_conv.weight.zero_()
            net.out_conv.bias.zero_()
    return net


def _as_batched(x: torch.Tensor):
    if x.ndim == 3:
        return x.unsqueeze(0), True
    if x.ndim == 4:
        return x, False
    raise DivisibilityError(f"expected (C,H,W) or (B,C,H,W) input, got {tuple(x.shape)}")


def predict_noise(denoiser: Denoiser, x_t: torch.Tensor, t) -> torch.Tensor:
    """Evaluate eps_hat on an image or a batch; output shape matches input.

    ``t`` is an integer timestep or a per-sample sequence for batched input.
    Both sides of the input must divide by ``2**(stages-1)``.
    """
    cfg = denoiser.config
    x, squeezed = _as_batched(x_t)
    b, c, h, w = x.shape
    div = cfg.divisor
    if h % div or w % div:
        raise DivisibilityError(
            f"input {h}x{w} must have sides divisible by {div} "
            f"(stages={cfg.stages})"
        )
    if c != cfg.in_channels:
        raise DivisibilityError(
            f"input has {c} channels, model expects {cfg.in_channels}"
        )
    dtype = next(denoiser.parameters()).dtype
    t_vec = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    if t_vec.numel() == 1:
        t_vec = t_vec.expand(b)
    elif t_vec.numel() != b:
        raise TimestepRangeError(
            f"{t_vec.numel()} timesteps for a batch of {b}"
        )
    if bool((t_vec < 1).any()):
        raise TimestepRangeError(f"timesteps must be >= 1, got {t}")
    out = denoiser(x.to(dtype), t_vec.to(dtype))
    return out.squeeze(0) if squeezed else out


@dataclasses.dataclass(frozen=True)
class ReceptiveField:
    """Receptive-field extent in pixels plus its ratio to a reference image."""

    height_px: int
    width_px: int
    ratio: float


def _geometry_steps(config: DenoiserConfig):
    """Spatial-geometry mirror of Denoiser.plan()."""
    steps = [("conv",)]
    for i in range(config.stages):
        steps += [("block",)] * config.enc_resblocks
        if i < config.stages - 1:
            steps += [("save", i), ("down",)]
    steps += [("block",)] * config.dec_resblocks
    for i in range(config.stages - 2, -1, -1):
        steps += [("up",), ("conv",), ("cat", i)]
        steps += [("block",)] * config.dec_resblocks
    steps.append(("conv",))
    return steps


def _influence_interval(config: DenoiserConfig):
    """Output-pixel interval influenced by a point perturbation at coordinate 0.

    Coordinates are relative to the perturbed pixel, which must sit on the
    coarsest downsampling grid (a multiple of ``2**(stages-1)``).  Rules per
    layer, with r = kernel // 2:

      stride-1 conv   [a, b] -> [a - r, b + r]
      stride-2 conv   [a, b] -> [ceil((a - r)/2), floor((b + r)/2)]
      nearest x2 up   [a, b] -> [2a, 2b + 1]
      skip concat     union with the saved encoder interval
    """
    r = config.kernel_size // 2
    a = b = 0
    saved = {}
    for step in _geometry_steps(config):
        kind = step[0]
        if kind == "conv":
            a, b = a - r, b + r
        elif kind == "block":
            a, b = a - 2 * r, b + 2 * r  # two convs; the residual add is interior
        elif kind == "down":
            a, b = -((r - a) // 2), (b + r) // 2
        elif kind == "up":
            a, b = 2 * a, 2 * b + 1
        elif kind == "save":
            saved[step[1]] = (a, b)
        elif kind == "cat":
            sa, sb = saved.pop(step[1])
            a, b = min(a, sa), max(b, sb)
    return a, b


def _ratio(edge_h: int, edge_w: int, reference_hw) -> float:
    ref_h, ref_w = reference_hw
    return min(edge_h, edge_w) / math.sqrt(ref_h * ref_w)


def receptive_field(config: DenoiserConfig,
                    reference_hw=DEFAULT_REFERENCE_HW) -> ReceptiveField:
    """Analytic receptive field of one output pixel.

    Computed by composing per-layer growth rules through the encoder-decoder
    graph and taking the union over skip paths; identical vertical and
    horizontal extents because all kernels are square.
    """
    config.validate()
    a, b = _influence_interval(config)
    edge = b - a + 1
    return ReceptiveField(edge, edge, _ratio(edge, edge, reference_hw))


class _ProbeClipped(Exception):
    """Changed region reached the working-canvas border mid-walk."""


def _touches_border(mask: torch.Tensor) -> bool:
    return bool(mask[0, :].any() or mask[-1, :].any()
                or mask[:, 0].any() or mask[:, -1].any())


def _probe_segments(segments, x0: torch.Tensor, row: int, col: int,
                    threshold: float = PROBE_THRESHOLD,
                    eps: float = PROBE_EPS, seed: int = 0):
    """Track the changed-pixel region through a list of segment callables.

    Each entry is ``(kind, fn)`` with kind "apply" (fn maps tensor to tensor),
    "save" or "cat" (fn is the skip index).  After every applied segment the
    change mask is re-derived from a fresh fixed-amplitude perturbation on the
    current support, so the measured region never decays with depth.
    Returns the final boolean mask over output pixels; raises _ProbeClipped if
    the region reaches the canvas border at any depth.
    """
    h = x0
    mask = torch.zeros(x0.shape[-2:], dtype=torch.bool)
    mask[row, col] = True
    saved = {}
    gen = make_generator(seed, "impulse-probe")
    with torch.inference_mode():
        for kind, fn in segments:
            if kind == "save":
                saved[fn] = (h, mask)
                continue
            if kind == "cat":
                sh, smask = saved.pop(fn)
                h = torch.cat([h, sh], dim=1)
                mask = mask | smask
                continue
            base = fn(h)
            n = int(mask.sum())
            signs = torch.randint(0, 2, (h.shape[0], h.shape[1], n),
                                  generator=gen, dtype=h.dtype) * 2.0 - 1.0
            perturbed = h.clone()
            perturbed[:, :, mask] += eps * signs
            delta = (fn(perturbed) - base).abs()
            mask = delta.amax(dim=(0, 1)) > threshold
            if not bool(mask.any()):
                raise RuntimeError(
                    "perturbation vanished inside a probe segment; "
                    "weights are degenerate"
                )
            if _touches_border(mask):
                raise _ProbeClipped
            h = base
    return mask


def impulse_probe(denoiser: Denoiser, probe_size: int,
                  reference_hw=DEFAULT_REFERENCE_HW) -> ReceptiveField:
    """Empirical receptive field measured on the actual network.

    One centered input pixel is perturbed and the bounding box of output
    pixels whose response moves by more than ``1e-7`` is returned.  Requires
    non-degenerate weights; build the probe network with
    ``zero_init_output=False``.
    """
    cfg = denoiser.config
    if cfg.zero_init_output and float(denoiser.out_conv.weight.abs().max()) == 0.0:
        raise InvalidConfigError(
            "impulse_probe needs non-degenerate weights; build the probe "
            "denoiser with zero_init_output=False"
        )
    div = cfg.divisor
    if probe_size % div:
        raise DivisibilityError(
            f"probe_size {probe_size} must be divisible by {div}"
        )
    analytic = receptive_field(cfg, reference_hw)
    need = 2 * max(analytic.height_px, analytic.width_px)
    if probe_size < need:
        raise ProbeTooSmallError(
            f"probe_size {probe_size} < 2x analytic receptive field ({need})"
        )
    temb = denoiser.embed_time(torch.ones(1))
    segments = []
    for step in denoiser.plan():
        kind, payload = step[0], step[1]
        if kind == "module":
            segments.append(("apply", payload))
        elif kind == "tblock":
            segments.append(("apply", (lambda m: lambda h: m(h, temb))(payload)))
        elif kind in ("save", "cat"):
            segments.append((kind, payload))

    def run(canvas: int):
        # Center on the coarsest downsampling grid so the probe parity
        # matches the analytic interval propagation.
        center = (canvas // 2 // div) * div
        gen = make_generator(0, "impulse-probe-base")
        x0 = torch.randn((1, cfg.in_channels, canvas, canvas), generator=gen)
        return _probe_segments(segments, x0, center, center)

    # Spatial locality makes the measured support independent of canvas size
    # as long as nothing is clipped, so work on the smallest canvas that can
    # hold the expected region; fall back to the full probe_size if the
    # region ever reaches a border.
    margin = 8 * div + 16
    working = min(probe_size, -(-(analytic.height_px + margin) // div) * div)
    try:
        mask = run(working)
    except _ProbeClipped:
        if working == probe_size:
            raise ProbeTooSmallError(
                f"changed region reaches the probe boundary at size {probe_size}"
            ) from None
        try:
            mask = run(probe_size)
        except _ProbeClipped:
            raise ProbeTooSmallError(
                f"changed region reaches the probe boundary at size {probe_size}"
            ) from None

    rows = mask.any(dim=1).nonzero().reshape(-1)
    cols = mask.any(dim=0).nonzero().reshape(-1)
    height = int(rows[-1] - rows[0] + 1)
    width = int(cols[-1] - cols[0] + 1)
    return ReceptiveField(height, width, _ratio(height, width, reference_hw))
