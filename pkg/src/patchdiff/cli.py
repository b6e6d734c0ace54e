"""Command-line surface.

Subcommands: train, sample, outpaint, guide, edit, eval, rf, sweep.
Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
Every artifact-producing command writes a manifest echoing the full effective
configuration.
"""

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from .archive import checkpoint_content_hash, load_checkpoint, save_checkpoint
from .denoiser import (
    PRESETS,
    build_denoiser,
    impulse_probe,
    receptive_field,
    resolve_preset,
)
from .errors import PatchDiffError, ValidationError
from .harness import (
    SweepSpec,
    generate_eval_set,
    report_to_json,
    report_to_text,
    run_rf_sweep,
)
from .images import center_crop_to_multiple, load_image, load_mask, save_image
from .metrics import (
    diversity,
    load_extractor_weights,
    seeded_extractor,
    sifid,
)
from .runconfig import RunConfig, load_run_config
from .sampling import (
    GuidanceSpec,
    OutpaintTask,
    ReferenceTask,
    make_score,
    sample_outpaint,
    sample_reference_guided,
    sample_score_guided,
)
from .schedule import build_linear_schedule
from .training import denoiser_from_checkpoint, train

__all__ = ["main"]


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_run_config(args.config)
    return RunConfig()


def _replace_section(cfg: RunConfig, section: str, **updates) -> RunConfig:
    updates = {k: v for k, v in updates.items() if v is not None}
    if not updates:
        return cfg
    current = getattr(cfg, section)
    return dataclasses.replace(cfg, **{
        section: dataclasses.replace(current, **updates)})


def _write_manifest(path: Path, doc: dict):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _schedule_of(cfg: RunConfig):
    s = cfg.schedule
    return build_linear_schedule(s.T, s.beta_start, s.beta_end)


def _resolve_extractor(spec: str):
    if spec.startswith("seeded:"):
        return seeded_extractor(int(spec.split(":", 1)[1]))
    return load_extractor_weights(spec)


def _require(value, flag: str):
    if value is None:
        raise ValidationError(f"missing required input: {flag}")
    return value


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    cfg = _replace_section(cfg, "paths", image=args.image,
                           output_dir=args.output)
    cfg = _replace_section(cfg, "training", total_steps=args.steps,
                           seed=args.seed)
    image_path = _require(cfg.paths.image, "--image or paths.image")
    image = load_image(image_path)
    image, offsets = center_crop_to_multiple(image, cfg.denoiser.divisor)
    out = _out_dir(cfg)
    schedule = _schedule_of(cfg)

    losses = []
    ckpt_paths = []

    def on_step(step, loss):
        losses.append((step, loss))

    def on_checkpoint(ckpt):
        p = out / f"checkpoint_step{ckpt.step:07d}.sindiff"
        save_checkpoint(ckpt, p)
        ckpt_paths.append(str(p))

    checkpoint = train(image, cfg.denoiser, cfg.training.to_train_config(),
                       schedule, checkpoint_every=cfg.training.checkpoint_every,
                       checkpoint_callback=on_checkpoint, step_callback=on_step)
    final_path = out / "checkpoint.sindiff"
    save_checkpoint(checkpoint, final_path)

    with open(out / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        writer.writerows(losses)

    _write_manifest(out / "train_manifest.json", {
        "command": "train",
        "config": cfg.to_dict(),
        "image": str(image_path),
        "crop_offsets": {"top": offsets[0], "left": offsets[1]},
        "crop_size": list(image.shape[1:]),
        "checkpoint": str(final_path),
        "checkpoint_hash": checkpoint_content_hash(checkpoint),
        "interval_checkpoints": ckpt_paths,
        "final_loss": losses[-1][1] if losses else None,
    })
    print(f"trained {cfg.training.total_steps} steps -> {final_path}")
    return 0


def _cmd_sample(args) -> int:
    cfg = _load_config(args)
    cfg = _replace_section(cfg, "paths", checkpoint=args.checkpoint,
                           output_dir=args.output)
    cfg = _replace_section(cfg, "sampling", seed=args.seed, count=args.count,
                           height=args.height, width=args.width)
    checkpoint = load_checkpoint(_require(cfg.paths.checkpoint, "--checkpoint"))
    out = _out_dir(cfg)
    manifest = generate_eval_set(
        checkpoint, cfg.sampling.count, cfg.sampling.height,
        cfg.sampling.width, cfg.sampling.seed, out,
        config_echo=cfg.to_dict())
    print(f"wrote {manifest['count']} samples to {out}")
    return 0


def _guided_common(args, mode: str):
    cfg = _load_config(args)
    cfg = _replace_section(cfg, "paths", checkpoint=args.checkpoint,
                           output_dir=args.output)
    cfg = _replace_section(cfg, "sampling", seed=args.seed,
                           height=getattr(args, "height", None),
                           width=getattr(args, "width", None))
    cfg = _replace_section(cfg, "guidance", mode=mode,
                           scale=getattr(args, "scale", None),
                           score=getattr(args, "score", None),
                           mask=getattr(args, "mask", None),
                           reference=getattr(args, "reference", None),
                           downsample_factor=getattr(args, "factor", None))
    if getattr(args, "color", None) is not None:
        color = tuple(float(c) for c in args.color.split(","))
        cfg = _replace_section(cfg, "guidance", color=color)
    checkpoint = load_checkpoint(_require(cfg.paths.checkpoint, "--checkpoint"))
    net = denoiser_from_checkpoint(checkpoint)
    t, b0, b1 = checkpoint.schedule_params
    schedule = build_linear_schedule(t, b0, b1)
    return cfg, checkpoint, net, schedule


def _emit_guided(cfg, checkpoint, image, command: str, extra: dict) -> Path:
    out = _out_dir(cfg)
    img_path = out / f"{command}.png"
    save_image(image, img_path)
    doc = {
        "command": command,
        "config": cfg.to_dict(),
        "checkpoint_hash": checkpoint_content_hash(checkpoint),
        "output": str(img_path),
    }
    doc.update(extra)
    _write_manifest(out / f"{command}_manifest.json", doc)
    print(f"wrote {img_path}")
    return img_path


def _cmd_outpaint(args) -> int:
    cfg, checkpoint, net, schedule = _guided_common(args, "outpaint")
    if args.source:
        cfg = _replace_section(cfg, "paths", image=args.source)
    source = load_image(_require(cfg.paths.image, "--source"))
    divisor = checkpoint.denoiser_config.divisor
    source, (top, left) = center_crop_to_multiple(source, divisor)
    mask = load_mask(_require(cfg.guidance.mask, "--mask"))
    if mask.shape != source.shape[1:]:
        h, w = source.shape[1:]
        mask = mask[top:top + h, left:left + w]
    task = OutpaintTask(source=source, mask=mask)
    image = sample_outpaint(net, schedule, task, cfg.sampling.seed)
    _emit_guided(cfg, checkpoint, image, "outpaint",
                 {"seed": cfg.sampling.seed})
    return 0


def _cmd_guide(args) -> int:
    cfg, checkpoint, net, schedule = _guided_common(args, "score")
    kwargs = {}
    if cfg.guidance.score == "mean_color":
        kwargs["color"] = cfg.guidance.color
    elif cfg.guidance.score == "quadratic":
        raise ValidationError(
            "quadratic score needs a target image; use the API for that"
        )
    elif cfg.guidance.score == "patch_template":
        template = load_image(_require(cfg.guidance.template, "--template"))
        kwargs["template"] = template
    score_fn = make_score(cfg.guidance.score, **kwargs)
    guidance = GuidanceSpec(score_fn=score_fn, scale=cfg.guidance.scale)
    image = sample_score_guided(net, schedule, cfg.sampling.height,
                                cfg.sampling.width, cfg.sampling.seed,
                                guidance)
    _emit_guided(cfg, checkpoint, image, "guide",
                 {"seed": cfg.sampling.seed, "score": cfg.guidance.score,
                  "scale": cfg.guidance.scale})
    return 0


def _cmd_edit(args) -> int:
    cfg, checkpoint, net, schedule = _guided_common(args, "reference")
    reference = load_image(_require(cfg.guidance.reference, "--reference"))
    reference, _ = center_crop_to_multiple(reference,
                                           checkpoint.denoiser_config.divisor)
    task = ReferenceTask(reference=reference,
                         downsample_factor=cfg.guidance.downsample_factor)
    image = sample_reference_guided(net, schedule, task, cfg.sampling.seed)
    _emit_guided(cfg, checkpoint, image, "edit",
                 {"seed": cfg.sampling.seed,
                  "downsample_factor": cfg.guidance.downsample_factor})
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    cfg = _replace_section(cfg, "paths", image=args.image,
                           checkpoint=args.checkpoint, output_dir=args.output)
    cfg = _replace_section(cfg, "sampling", seed=args.seed, count=args.count)
    cfg = _replace_section(cfg, "metrics", extractor=args.extractor,
                           coefficient_mode=args.coefficient_mode)
    reference = load_image(_require(cfg.paths.image, "--image"))
    extractor = _resolve_extractor(cfg.metrics.extractor)
    out = _out_dir(cfg)

    if args.samples_dir:
        sample_paths = sorted(Path(args.samples_dir).glob("*.png"))
        if not sample_paths:
            raise ValidationError(f"no .png files in {args.samples_dir}")
        samples = [load_image(p) for p in sample_paths]
        source = str(args.samples_dir)
    else:
        checkpoint = load_checkpoint(_require(cfg.paths.checkpoint,
                                              "--checkpoint or --samples-dir"))
        net = denoiser_from_checkpoint(checkpoint)
        t, b0, b1 = checkpoint.schedule_params
        schedule = build_linear_schedule(t, b0, b1)
        h, w = reference.shape[1:]
        from .rng import derive_seed
        from .sampling import sample_uncond
        samples = [
            sample_uncond(net, schedule, h, w,
                          derive_seed(cfg.sampling.seed, "eval-image", i))
            for i in range(cfg.sampling.count)
        ]
        source = f"checkpoint:{cfg.paths.checkpoint}"

    scores = [sifid(s, reference, extractor) for s in samples]
    mean_sifid = sum(scores) / len(scores)
    report_lines = [
        "report = sifid-diversity",
        f"extractor = {extractor.provenance}",
        f"coefficient_mode = {cfg.metrics.coefficient_mode}",
        f"samples = {len(samples)}",
        f"source = {source}",
        f"sifid_mean = {mean_sifid:.8f}",
    ]
    for i, s in enumerate(scores):
        report_lines.append(f"sifid_{i:04d} = {s:.8f}")
    if len(samples) >= 2:
        div = diversity(samples, extractor,
                        coefficient_mode=cfg.metrics.coefficient_mode)
        report_lines.append(f"diversity_mean = {div.mean_diversity:.8f}")
    report = "\n".join(report_lines) + "\n"
    (out / "eval_report.txt").write_text(report)
    _write_manifest(out / "eval_manifest.json", {
        "command": "eval", "config": cfg.to_dict(), "source": source,
        "sifid_mean": mean_sifid,
    })
    print(report, end="")
    return 0


def _cmd_rf(args) -> int:
    if args.config in PRESETS:
        config = resolve_preset(args.config)
    elif Path(args.config).exists():
        config = load_run_config(args.config).denoiser
    else:
        config = resolve_preset(args.config)  # raises with the known names
    analytic = receptive_field(config)
    print(f"analytic receptive field: {analytic.height_px}x{analytic.width_px} "
          f"(ratio {analytic.ratio:.4f})")
    if not args.no_probe:
        probe_cfg = dataclasses.replace(config, zero_init_output=False)
        net = build_denoiser(probe_cfg, seed=0)
        need = 2 * max(analytic.height_px, analytic.width_px)
        probe_size = -(-need // config.divisor) * config.divisor
        probed = impulse_probe(net, probe_size)
        print(f"probed receptive field:   {probed.height_px}x{probed.width_px} "
              f"(ratio {probed.ratio:.4f})")
        if (probed.height_px, probed.width_px) != (analytic.height_px,
                                                   analytic.width_px):
            print("warning: probe disagrees with the analytic value",
                  file=sys.stderr)
            return 2
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    cfg = _replace_section(cfg, "paths", image=args.image, output_dir=args.output)
    image = load_image(_require(cfg.paths.image, "--image or paths.image"))
    configs = tuple(resolve_preset(name) for name in cfg.sweep.configs)
    divisor = max(c.divisor for c in configs)
    image, _ = center_crop_to_multiple(image, divisor)
    spec = SweepSpec(
        image=image,
        configs=configs,
        config_names=tuple(cfg.sweep.configs),
        train_budget=cfg.sweep.train_budget,
        samples_per_config=cfg.sweep.samples_per_config,
        extractor=_resolve_extractor(cfg.metrics.extractor),
        seed=cfg.sampling.seed,
        schedule_params=(cfg.schedule.T, cfg.schedule.beta_start,
                         cfg.schedule.beta_end),
        batch=cfg.sweep.batch,
        learning_rate=cfg.sweep.learning_rate,
    )
    report = run_rf_sweep(spec)
    out = _out_dir(cfg)
    text = report_to_text(report)
    (out / "sweep_report.txt").write_text(text)
    (out / "sweep_report.json").write_text(report_to_json(report))
    _write_manifest(out / "sweep_manifest.json", {
        "command": "sweep", "config": cfg.to_dict(),
    })
    print(text, end="")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="patchdiff",
                     description="Single-image diffusion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, config=True, output=True):
        if config:
            p.add_argument("--config", help="run-configuration file")
        if output:
            p.add_argument("--output", help="output directory")

    p = sub.add_parser("train", parents=[], help="fit a model to one image")
    common(p)
    p.add_argument("--image", help="training image (8-bit RGB PNG)")
    p.add_argument("--steps", type=int, help="override training.total_steps")
    p.add_argument("--seed", type=int, help="override training.seed")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", help="draw unconditional samples")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("outpaint", help="regenerate the masked region")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--source", help="source image")
    p.add_argument("--mask", help="single-channel mask: 0 keep, 255 generate")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_outpaint)

    p = sub.add_parser("guide", help="score-guided sampling")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--score", choices=["mean_color", "patch_template"])
    p.add_argument("--scale", type=float)
    p.add_argument("--color", help="target color 'r,g,b' in [-1,1]")
    p.add_argument("--template", help="template image for patch_template")
    p.add_argument("--seed", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=_cmd_guide)

    p = sub.add_parser("edit", help="low-pass reference-guided sampling")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--reference", help="reference image")
    p.add_argument("--factor", type=int, help="low-pass downsample factor")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_edit)

    p = sub.add_parser("eval", help="sifid/diversity report")
    common(p)
    p.add_argument("--image", help="reference (training) image")
    p.add_argument("--samples-dir", help="directory of generated PNGs")
    p.add_argument("--checkpoint", help="sample from this checkpoint instead")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--extractor", help="'seeded:<seed>' or weights archive")
    p.add_argument("--coefficient-mode", choices=["pair-mean", "paper-literal"])
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("rf", help="print analytic and probed receptive field")
    p.add_argument("--config", required=True,
                   help="preset name or run-config file")
    p.add_argument("--no-probe", action="store_true",
                   help="skip the empirical probe")
    p.set_defaults(func=_cmd_rf)

    p = sub.add_parser("sweep", help="receptive-field ablation sweep")
    common(p)
    p.add_argument("--image", help="training image")
    p.set_defaults(func=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help and friends
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except PatchDiffError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # pragma: no cover - last resort
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
