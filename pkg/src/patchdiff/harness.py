"""Desk-scale experiment automation: receptive-field sweeps and eval sets.

A sweep trains one model per architecture on the same image, draws a sample
set from each, and scores fidelity (mean Frechet distance against the
training image) and diversity (mean pairwise perceptual distance).  Rows are
isolated: one diverging run is recorded as a failed row without aborting the
rest.  Budgets here are desk-scale by design; only the direction of the
fidelity/diversity trend against receptive-field size is meaningful, not
absolute values.
"""

import dataclasses
import json
import math

from .archive import checkpoint_content_hash
from .denoiser import DenoiserConfig, receptive_field
from .errors import SweepFailedError, ValidationError
from .images import save_image
from .metrics import FeatureExtractor, diversity, seeded_extractor, sifid
from .rng import derive_seed
from .sampling import sample_uncond
from .schedule import build_linear_schedule
from .training import Checkpoint, TrainConfig, denoiser_from_checkpoint, train

__all__ = [
    "SweepSpec",
    "SweepRow",
    "SweepReport",
    "run_rf_sweep",
    "generate_eval_set",
    "report_to_text",
    "report_to_json",
]


@dataclasses.dataclass(frozen=True)
class SweepSpec:
    image: object  # (3, H, W) tensor in [-1, 1]
    configs: tuple  # DenoiserConfig per row
    config_names: tuple
    train_budget: int = 5000
    samples_per_config: int = 10
    extractor: FeatureExtractor | None = None
    seed: int = 0
    schedule_params: tuple = (1000, 1e-4, 0.02)
    batch: int = 4
    learning_rate: float = 2e-4

    def __post_init__(self):
        if len(self.configs) < 2:
            raise ValidationError("a sweep needs at least 2 configs")
        if len(self.config_names) != len(self.configs):
            raise ValidationError("one name per config required")
        if self.train_budget < 1 or self.samples_per_config < 1:
            raise ValidationError("budgets must be >= 1")


@dataclasses.dataclass
class SweepRow:
    name: str
    rf_ratio: float
    rf_px: int
    sifid: float | None = None
    diversity: float | None = None
    error: str | None = None
    checkpoint: Checkpoint | None = None


@dataclasses.dataclass
class SweepReport:
    rows: list
    train_budget: int
    samples_per_config: int
    seed: int
    extractor_provenance: str


def run_rf_sweep(spec: SweepSpec) -> SweepReport:
    """Train/sample/score one row per config; rows sorted by RF ratio."""
    image = spec.image
    _, h, w = image.shape
    extractor = spec.extractor or seeded_extractor(0)
    t_steps, beta_start, beta_end = spec.schedule_params
    schedule = build_linear_schedule(t_steps, beta_start, beta_end)

    rows = []
    for name, config in zip(spec.config_names, spec.configs):
        rf = receptive_field(config, reference_hw=(h, w))
        row = SweepRow(name=name, rf_ratio=rf.ratio, rf_px=rf.height_px)
        try:
            tc = TrainConfig(
                total_steps=spec.train_budget,
                learning_rate=spec.learning_rate,
                batch=spec.batch,
                seed=derive_seed(spec.seed, "sweep-train", name),
            )
            ckpt = train(image, config, tc, schedule)
            net = denoiser_from_checkpoint(ckpt)
            samples = [
                sample_uncond(net, schedule, h, w,
                              derive_seed(spec.seed, "sweep-sample", name, i))
                for i in range(spec.samples_per_config)
            ]
            scores = [sifid(s, image, extractor) for s in samples]
            row.sifid = sum(scores) / len(scores)
            row.diversity = diversity(samples, extractor).mean_diversity
            row.checkpoint = ckpt
            if not (math.isfinite(row.sifid) and math.isfinite(row.diversity)):
                row.error = "nonfinite score"
        except Exception as e:  # isolate the row, keep sweeping
            row.error = f"{type(e).__name__}: {e}"
        rows.append(row)
    if all(r.error is not None for r in rows):
        raise SweepFailedError(
            "every sweep row failed: " + "; ".join(r.error for r in rows)
        )
    rows.sort(key=lambda r: r.rf_ratio)
    return SweepReport(rows=rows, train_budget=spec.train_budget,
                       samples_per_config=spec.samples_per_config,
                       seed=spec.seed,
                       extractor_provenance=extractor.provenance)


def report_to_text(report: SweepReport) -> str:
    lines = [
        f"receptive-field sweep  (train_budget={report.train_budget}, "
        f"samples={report.samples_per_config}, seed={report.seed}, "
        f"extractor={report.extractor_provenance})",
        f"{'config':<14} {'rf_px':>6} {'rf_ratio':>9} {'sifid':>12} "
        f"{'diversity':>12}  error",
    ]
    for r in report.rows:
        s = f"{r.sifid:.6f}" if r.sifid is not None else "-"
        d = f"{r.diversity:.6f}" if r.diversity is not None else "-"
        lines.append(
            f"{r.name:<14} {r.rf_px:>6} {r.rf_ratio:>9.4f} {s:>12} {d:>12}  "
            f"{r.error or ''}"
        )
    return "\n".join(lines) + "\n"


def report_to_json(report: SweepReport) -> str:
    doc = {
        "train_budget": report.train_budget,
        "samples_per_config": report.samples_per_config,
        "seed": report.seed,
        "extractor": report.extractor_provenance,
        "rows": [
            {"name": r.name, "rf_px": r.rf_px, "rf_ratio": r.rf_ratio,
             "sifid": r.sifid, "diversity": r.diversity, "error": r.error}
            for r in report.rows
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def generate_eval_set(checkpoint: Checkpoint, count: int, height: int,
                      width: int, seed: int, out_dir, *,
                      config_echo: dict | None = None) -> dict:
    """Sample ``count`` images from a checkpoint into ``out_dir``.

    Writes sample_NNNN.png files plus manifest.json recording the seed, the
    per-image sub-seeds, shapes and the checkpoint content hash; reruns with
    the same arguments produce identical files.
    """
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    out_dir.mkdir(parents=True, exist_ok=True)
    net = denoiser_from_checkpoint(checkpoint)
    t_steps, beta_start, beta_end = checkpoint.schedule_params
    schedule = build_linear_schedule(t_steps, beta_start, beta_end)
    entries = []
    for i in range(count):
        sub_seed = derive_seed(seed, "eval-image", i)
        image = sample_uncond(net, schedule, height, width, sub_seed)
        name = f"sample_{i:04d}.png"
        save_image(image, out_dir / name)
        entries.append({"file": name, "sub_seed": sub_seed,
                        "height": height, "width": width})
    manifest = {
        "seed": seed,
        "count": count,
        "checkpoint_hash": checkpoint_content_hash(checkpoint),
        "images": entries,
    }
    if config_echo is not None:
        manifest["config"] = config_echo
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
