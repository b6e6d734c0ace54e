"""Run configuration: an INI-style section/key-value file with strict keys.

Every field has a default, so an empty file (or no file) is a valid
configuration; unknown sections or keys are rejected outright.  The effective
defaults-merged configuration is echoed into every output manifest so any
artifact can be reproduced from its manifest alone.
"""

import configparser
import dataclasses

from .denoiser import DenoiserConfig, resolve_preset
from .errors import ConfigFileError
from .training import TrainConfig

__all__ = [
    "ScheduleParams",
    "SamplingParams",
    "GuidanceParams",
    "MetricsParams",
    "PathsParams",
    "SweepParams",
    "RunConfig",
    "load_run_config",
]


@dataclasses.dataclass(frozen=True)
class ScheduleParams:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclasses.dataclass(frozen=True)
class SamplingParams:
    height: int = 64
    width: int = 64
    seed: int = 0
    count: int = 1


@dataclasses.dataclass(frozen=True)
class GuidanceParams:
    mode: str = "none"  # none | score | outpaint | reference
    scale: float = 1.0
    score: str = "mean_color"
    color: tuple = (0.0, 0.0, 0.0)
    template: str | None = None
    mask: str | None = None
    reference: str | None = None
    downsample_factor: int = 4


@dataclasses.dataclass(frozen=True)
class MetricsParams:
    extractor: str = "seeded:0"  # "seeded:<seed>" or a weight-archive path
    coefficient_mode: str = "pair-mean"


@dataclasses.dataclass(frozen=True)
class PathsParams:
    image: str | None = None
    checkpoint: str | None = None
    output_dir: str = "out"


@dataclasses.dataclass(frozen=True)
class SweepParams:
    configs: tuple = ("desk-small", "desk-mid", "desk-large")
    train_budget: int = 5000
    samples_per_config: int = 10
    batch: int = 4
    learning_rate: float = 2e-4


@dataclasses.dataclass(frozen=True)
class TrainingParams:
    total_steps: int = 5000
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    batch: int = 8
    ema_decay: float = 0.9999
    seed: int = 0
    grad_clip_norm: float | None = 1.0
    precision: str = "single"
    checkpoint_every: int = 10000

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            total_steps=self.total_steps, learning_rate=self.learning_rate,
            weight_decay=self.weight_decay, batch=self.batch,
            ema_decay=self.ema_decay, seed=self.seed,
            grad_clip_norm=self.grad_clip_norm, precision=self.precision)


@dataclasses.dataclass(frozen=True)
class RunConfig:
    schedule: ScheduleParams = ScheduleParams()
    denoiser: DenoiserConfig = DenoiserConfig()
    training: TrainingParams = TrainingParams()
    sampling: SamplingParams = SamplingParams()
    guidance: GuidanceParams = GuidanceParams()
    metrics: MetricsParams = MetricsParams()
    paths: PathsParams = PathsParams()
    sweep: SweepParams = SweepParams()

    def to_dict(self) -> dict:
        doc = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, DenoiserConfig):
                doc[f.name] = value.to_dict()
            else:
                d = dataclasses.asdict(value)
                for k, v in d.items():
                    if isinstance(v, tuple):
                        d[k] = list(v)
                doc[f.name] = d
        return doc


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text: str) -> tuple:
    return tuple(int(part.strip()) for part in text.split(",") if part.strip())


def _parse_float_tuple(text: str) -> tuple:
    return tuple(float(part.strip()) for part in text.split(",") if part.strip())


def _parse_str_tuple(text: str) -> tuple:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _parse_opt_float(text: str):
    return None if text.strip().lower() == "none" else float(text)


def _parse_opt_str(text: str):
    return None if text.strip().lower() == "none" else text.strip()


_SCHEMAS = {
    "schedule": {"T": int, "beta_start": float, "beta_end": float},
    "denoiser": {
        "preset": str, "stages": int, "channels": _parse_int_tuple,
        "enc_resblocks": int, "dec_resblocks": int, "kernel_size": int,
        "time_embed_dim": int, "norm_groups": int,
        "zero_init_output": _parse_bool, "in_channels": int,
    },
    "training": {
        "total_steps": int, "learning_rate": float, "weight_decay": float,
        "batch": int, "ema_decay": float, "seed": int,
        "grad_clip_norm": _parse_opt_float, "precision": str,
        "checkpoint_every": int,
    },
    "sampling": {"height": int, "width": int, "seed": int, "count": int},
    "guidance": {
        "mode": str, "scale": float, "score": str,
        "color": _parse_float_tuple, "template": _parse_opt_str,
        "mask": _parse_opt_str, "reference": _parse_opt_str,
        "downsample_factor": int,
    },
    "metrics": {"extractor": str, "coefficient_mode": str},
    "paths": {"image": _parse_opt_str, "checkpoint": _parse_opt_str,
              "output_dir": str},
    "sweep": {"configs": _parse_str_tuple, "train_budget": int,
              "samples_per_config": int, "batch": int,
              "learning_rate": float},
}

_SECTION_TYPES = {
    "schedule": ScheduleParams,
    "training": TrainingParams,
    "sampling": SamplingParams,
    "guidance": GuidanceParams,
    "metrics": MetricsParams,
    "paths": PathsParams,
    "sweep": SweepParams,
}


def load_run_config(path) -> RunConfig:
    """Parse an INI run-configuration file over the documented defaults.

    Raises:
        ConfigFileError: unknown section, unknown key, or unparsable value.
        FileNotFoundError: if the file does not exist.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    with open(path) as fh:  # raises FileNotFoundError naturally
        try:
            parser.read_file(fh)
        except configparser.Error as e:
            raise ConfigFileError(f"{path}: {e}") from None

    sections = {}
    for section in parser.sections():
        if section not in _SCHEMAS:
            raise ConfigFileError(
                f"{path}: unknown section [{section}]; "
                f"known: {', '.join(sorted(_SCHEMAS))}"
            )
        schema = _SCHEMAS[section]
        values = {}
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigFileError(
                    f"{path}: unknown key {key!r} in [{section}]; "
                    f"known: {', '.join(sorted(schema))}"
                )
            try:
                values[key] = schema[key](raw)
            except (ValueError, TypeError) as e:
                raise ConfigFileError(
                    f"{path}: bad value for {section}.{key}: {e}"
                ) from None
        sections[section] = values

    kwargs = {}
    den = sections.pop("denoiser", None)
    if den is not None:
        preset = den.pop("preset", None)
        base = resolve_preset(preset) if preset else DenoiserConfig()
        kwargs["denoiser"] = dataclasses.replace(base, **den)
    for name, cls in _SECTION_TYPES.items():
        if name in sections:
            kwargs[name] = cls(**sections.pop(name))
    return RunConfig(**kwargs)
