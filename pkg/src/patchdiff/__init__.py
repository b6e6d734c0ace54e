"""Single-image diffusion toolkit.

Learns a denoising diffusion model from one natural image with a
patch-level-receptive-field denoiser, samples at arbitrary resolution,
supports score-guided generation, outpainting and low-pass reference
guidance, and ships seeded-feature fidelity/diversity metrics plus a
receptive-field ablation harness.
"""

from .schedule import (
    NoiseSchedule,
    NoisySample,
    build_linear_schedule,
    forward_diffuse,
    posterior_mean,
    reverse_step,
    snr,
)
from .denoiser import (
    Denoiser,
    DenoiserConfig,
    ReceptiveField,
    PRESETS,
    build_denoiser,
    impulse_probe,
    predict_noise,
    receptive_field,
    resolve_preset,
)
from .training import (
    AdamState,
    Checkpoint,
    TrainConfig,
    denoiser_from_checkpoint,
    denoising_loss,
    ema_update,
    init_adam_state,
    optimizer_step,
    train,
)
from .sampling import (
    GuidanceSpec,
    MeanColorScore,
    OutpaintTask,
    PatchTemplateScore,
    QuadraticPull,
    ReferenceTask,
    SamplerState,
    lowpass,
    make_score,
    sample_outpaint,
    sample_reference_guided,
    sample_score_guided,
    sample_uncond,
    zero_lowpass,
)
from .metrics import (
    DiversityReport,
    FeatureExtractor,
    FeatureStats,
    LayerSpec,
    diversity,
    extract_patch_features,
    fit_stats,
    frechet_distance,
    load_extractor_weights,
    save_extractor_weights,
    seeded_extractor,
    sifid,
)
from .harness import (
    SweepReport,
    SweepRow,
    SweepSpec,
    generate_eval_set,
    run_rf_sweep,
)
from .archive import load_checkpoint, save_checkpoint
from .images import center_crop_to_multiple, load_image, load_mask, save_image
from .runconfig import RunConfig, load_run_config

__version__ = "0.1.0"
