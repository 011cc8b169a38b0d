"""Command-line interface of vjdd."""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import torch
from monty.serialization import dumpfn, loadfn

from vjdd.core.base import VJDDError
from vjdd.core.config import RunConfig, parse_overrides, read_config
from vjdd.core.dataio import load_clip, load_tensor, save_clip, save_tensor
from vjdd.core.degrade import NoiseParams, degrade_frame, noise_std
from vjdd.core.motionsynth import (
    MotionParams,
    random_texture,
    save_synthetic_clip,
    synth_clip,
)
from vjdd.workflows.ablation import run_ablation
from vjdd.workflows.evaluation import (
    EvaluationReport,
    evaluate,
    held_out_clips,
    make_restorer,
    noise_params_for,
    render_table,
)
from vjdd.workflows.sets import VARIANTS, AblationGenerator
from vjdd.workflows.training import (
    model_from_checkpoint,
    read_log,
    sample_noise_params,
    summarize_log,
    train,
)

logger = logging.getLogger(__name__)

RAW_FILENAME = "raw.vjdt"
STD_FILENAME = "std.vjdt"
NOISE_FILENAME = "noise.yaml"


def _load_config(args) -> RunConfig:
    config = read_config(args.config) if args.config else RunConfig()
    overrides = parse_overrides(args.set)
    if overrides:
        config = config.updated(overrides)
    return config


def _noise_from_args(args) -> NoiseParams:
    if args.sigma_s is not None or args.sigma_r is not None:
        return NoiseParams(args.sigma_s or 0.0, args.sigma_r or 0.0)
    return noise_params_for(args.level)


def cmd_synth(args) -> int:
    """Write a synthetic clip with known motion."""
    config = _load_config(args)
    size = args.size or config.data.crop_size
    frames = args.frames or config.data.clip_len
    margin = config.motion.margin
    generator = torch.Generator().manual_seed(args.seed)
    base = random_texture(size + 2 * margin, size + 2 * margin, generator)
    if args.level == "sampled":
        params = sample_noise_params(generator, config.noise)
    else:
        params = _noise_from_args(args)
    clip = synth_clip(
        base,
        frames,
        params,
        motion=MotionParams.from_config(config.motion),
        out_size=size,
        pattern=config.data.bayer_pattern,
        seed=args.seed,
    )
    out = save_synthetic_clip(clip, args.out)
    if args.png:
        save_clip(clip.clean.clamp(0, 1), out / "clean")
    logger.info("Wrote synthetic clip to %s", out)
    return 0


def cmd_degrade(args) -> int:
    """Mosaic a clean clip and add noise."""
    clip = load_clip(args.clip)
    params = _noise_from_args(args)
    generator = torch.Generator().manual_seed(args.seed)
    raw = degrade_frame(clip.frames, params, generator, args.pattern)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(raw.cfa, out / RAW_FILENAME)
    save_tensor(noise_std(raw.cfa, *params.as_tuple()), out / STD_FILENAME)
    dumpfn(
        {
            "sigma_s": params.sigma_s,
            "sigma_r": params.sigma_r,
            "pattern": args.pattern,
            "seed": args.seed,
            "clip": str(args.clip),
        },
        out / NOISE_FILENAME,
    )
    logger.info("Wrote raw clip %s to %s", clip.id, out)
    return 0


def cmd_train(args) -> int:
    """Run one or both training stages."""
    config = _load_config(args)
    if args.work_dir:
        config = config.updated({"paths.work_dir": args.work_dir})
    Path(config.paths.work_dir).mkdir(parents=True, exist_ok=True)
    config.to_file(Path(config.paths.work_dir, "config.yaml"))
    init = args.init
    if args.stage in ("pretrain", "both"):
        result = train(config, "pretrain", init_checkpoint=init, progress=args.progress)
        init = result.checkpoint_dir
        print(f"pretrain checkpoint: {result.checkpoint_dir}")
    if args.stage in ("full", "both"):
        result = train(
            config,
            "full",
            init_checkpoint=init,
            allow_scratch=args.from_scratch,
            progress=args.progress,
        )
        print(f"full checkpoint: {result.checkpoint_dir}")
    return 0


def cmd_restore(args) -> int:
    """Restore a raw clip with a trained checkpoint."""
    raw_dir = Path(args.raw)
    cfa = load_tensor(raw_dir / RAW_FILENAME)
    if (raw_dir / STD_FILENAME).exists():
        std = load_tensor(raw_dir / STD_FILENAME)
    else:
        noise = loadfn(raw_dir / NOISE_FILENAME)
        std = noise_std(cfa, noise["sigma_s"], noise["sigma_r"])
    model = model_from_checkpoint(args.checkpoint)
    dtype = next(model.parameters()).dtype
    restored = model.restore(cfa.to(dtype), std.to(dtype))
    save_clip(restored.clamp(0, 1), args.out, fmt=args.format)
    logger.info("Wrote %d restored frames to %s", restored.shape[0], args.out)
    return 0


def cmd_eval(args) -> int:
    """Evaluate a checkpoint or a baseline."""
    config = _load_config(args)
    if args.clips:
        clips = [load_clip(p) for p in args.clips]
    else:
        clips = held_out_clips(
            count=args.synthetic,
            size=config.data.crop_size,
            n_frames=config.data.clip_len,
            seed=config.seeds.eval,
            margin=config.motion.margin,
            motion=MotionParams.from_config(config.motion),
        )
    kind = "network" if args.checkpoint else args.baseline
    restorer = make_restorer(kind, args.checkpoint, config.data.bayer_pattern)
    report = evaluate(
        restorer,
        clips,
        level=args.level,
        seed=args.seed if args.seed is not None else config.seeds.eval,
        pattern=config.data.bayer_pattern,
        domain=args.domain,
        flow_source=args.flow_source,
        heatmap_dir=args.heatmaps,
    )
    if args.out:
        report.to_file(args.out)
    print(render_table([(report.restorer, report.means())]))
    return 0


def _report(data) -> EvaluationReport:
    if isinstance(data, EvaluationReport):
        return data
    return EvaluationReport.from_dict(data)


def cmd_report(args) -> int:
    """Print a training log summary or a metric table."""
    path = Path(args.path)
    if path.suffix == ".jsonl":
        summary = summarize_log(read_log(path))
        for stage, info in summary.items():
            print(
                f"{stage}: step {info['steps']}  lr {info['lr']:.3e}  "
                f"total {info['total']:.6f}  L_r(ema) {info['l_r_ema']:.6f}  "
                f"totals consistent: {info['totals_consistent']}"
            )
        return 0
    data = loadfn(path)
    if isinstance(data, dict) and "variants" in data:
        rows = [(v["label"], _report(v["report"]).means()) for v in data["variants"]]
        rows += [(r.restorer, r.means()) for r in map(_report, data["baselines"])]
    else:
        report = _report(data)
        rows = [(report.restorer, report.means())]
    print(render_table(rows))
    return 0


def cmd_ablate(args) -> int:
    """Train, evaluate and compare the ablation variants."""
    config = _load_config(args)
    generator = AblationGenerator(
        base_config=config,
        eval_level=args.level,
        variants=tuple(args.variants or VARIANTS),
    )
    report = run_ablation(
        generator.get_specs(),
        work_dir=args.work_dir,
        n_eval_clips=args.eval_clips,
        progress=args.progress,
    )
    out = Path(args.work_dir, args.out)
    report.to_file(out)
    print(report.table())
    if not report.data_consistent:
        print("warning: variants did not see identical training data")
    return 0


def _add_config_args(parser: argparse.ArgumentParser):
    parser.add_argument("-c", "--config", help="Run configuration file")
    parser.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="Override a configuration key (dotted, e.g. loss.gamma=0)",
    )


def _add_noise_args(parser: argparse.ArgumentParser, levels: List[str]):
    parser.add_argument(
        "--level", default=levels[0], choices=levels, help="Noise level"
    )
    parser.add_argument("--sigma-s", type=float, default=None, help="Shot noise scale")
    parser.add_argument("--sigma-r", type=float, default=None, help="Read noise scale")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vjdd", description="Video joint denoising and demosaicking laboratory."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Make a synthetic clip with known motion")
    _add_config_args(p)
    _add_noise_args(p, ["sampled", "low", "high", "none"])
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--frames", type=int, default=None, help="Number of frames")
    p.add_argument("--size", type=int, default=None, help="Frame size")
    p.add_argument("--seed", type=int, default=0, help="Clip seed")
    p.add_argument("--png", action="store_true", help="Also write clean PNG frames")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("degrade", help="Mosaic and add noise to a clean clip")
    p.add_argument("clip", help="Clip directory of PNG frames or .vjdt file")
    _add_noise_args(p, ["low", "high", "none"])
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--seed", type=int, default=1234, help="Noise seed")
    p.add_argument("--pattern", default="RGGB", help="Bayer pattern")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="Train the restoration network")
    _add_config_args(p)
    p.add_argument(
        "--stage", default="both", choices=["pretrain", "full", "both"], help="Stage"
    )
    p.add_argument("--init", default=None, help="Checkpoint to start or resume from")
    p.add_argument(
        "--from-scratch",
        action="store_true",
        help="Allow the full stage without a pretrain checkpoint",
    )
    p.add_argument("--work-dir", default=None, help="Run directory")
    p.add_argument("--progress", action="store_true", help="Show progress bars")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="Restore a raw clip")
    p.add_argument("--checkpoint", required=True, help="Checkpoint directory")
    p.add_argument("--raw", required=True, help="Directory written by degrade")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--format", default="png", choices=["png", "vjdt"], help="Format")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", help="Evaluate a checkpoint or a baseline")
    _add_config_args(p)
    p.add_argument("--checkpoint", default=None, help="Checkpoint directory")
    p.add_argument(
        "--baseline",
        default="bilinear",
        choices=["bilinear", "bilateral", "oracle"],
        help="Baseline used without a checkpoint",
    )
    p.add_argument("--clips", nargs="*", default=None, help="Clean clips")
    p.add_argument("--synthetic", type=int, default=4, help="Held-out synthetic clips")
    p.add_argument("--level", default="low", choices=["low", "high"], help="Noise")
    p.add_argument("--seed", type=int, default=None, help="Evaluation seed")
    p.add_argument("--domain", default="srgb", choices=["srgb", "linear"])
    p.add_argument("--flow-source", default="gt", choices=["gt", "restored"])
    p.add_argument("--heatmaps", default=None, help="Directory for WE/RWE heatmaps")
    p.add_argument("--out", default=None, help="Report file (.json or .yaml)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="Render a training log or evaluation report")
    p.add_argument("path", help="train_log.jsonl or a report file")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="Train and compare the ablation variants")
    _add_config_args(p)
    p.add_argument("--work-dir", default="ablation", help="Root directory")
    p.add_argument("--variants", nargs="*", default=None, help="Variant labels")
    p.add_argument("--eval-clips", type=int, default=4, help="Held-out clips")
    p.add_argument("--level", default="low", choices=["low", "high"], help="Noise")
    p.add_argument("--out", default="ablation_report.json", help="Report file name")
    p.add_argument("--progress", action="store_true", help="Show progress bars")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run the vjdd command line."""
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except VJDDError as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
