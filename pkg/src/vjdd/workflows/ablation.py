"""Ablation runs: train and evaluate model variants under identical seeds."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from monty.serialization import dumpfn

from vjdd.core.dataio import Clip
from vjdd.core.losses import build_extractor
from vjdd.core.motionsynth import MotionParams
from vjdd.workflows.evaluation import (
    BilinearRestorer,
    EvaluationReport,
    NetworkRestorer,
    evaluate,
    held_out_clips,
    render_table,
)
from vjdd.workflows.sets import ExperimentSpec
from vjdd.workflows.training import TrainResult, train

logger = logging.getLogger(__name__)


@dataclass
class VariantResult:
    """Training outputs and evaluation of one variant."""

    label: str
    checkpoint_dir: str
    pretrain_checkpoint_dir: str
    first_batch_sha256: Optional[str]
    report: EvaluationReport

    def as_dict(self):
        """Return a dict representation of the result."""
        return {
            "label": self.label,
            "checkpoint_dir": self.checkpoint_dir,
            "pretrain_checkpoint_dir": self.pretrain_checkpoint_dir,
            "first_batch_sha256": self.first_batch_sha256,
            "report": self.report.as_dict(),
        }


@dataclass
class AblationReport:
    """Side-by-side metrics of every variant (and the baselines)."""

    level: str
    variants: List[VariantResult] = field(default_factory=list)
    baselines: List[EvaluationReport] = field(default_factory=list)

    @property
    def data_consistent(self) -> bool:
        """True when every variant saw the same first full-stage batch."""
        hashes = {v.first_batch_sha256 for v in self.variants}
        return len(hashes) <= 1

    def means(self) -> Dict[str, Dict[str, Optional[float]]]:
        """Metric means by row label."""
        rows = {v.label: v.report.means() for v in self.variants}
        rows.update({b.restorer: b.means() for b in self.baselines})
        return rows

    def table(self) -> str:
        """Plain-text comparison table."""
        return render_table(list(self.means().items()))

    def as_dict(self):
        """Return a dict representation of the report."""
        return {
            "level": self.level,
            "data_consistent": self.data_consistent,
            "variants": [v.as_dict() for v in self.variants],
            "baselines": [b.as_dict() for b in self.baselines],
        }

    def to_file(self, fname: Union[str, Path]):
        """Write the report (JSON or YAML by extension)."""
        dumpfn(self.as_dict(), fname)


def run_ablation(
    specs: Sequence[ExperimentSpec],
    work_dir: Union[str, Path] = ".",
    eval_clips: Optional[List[Clip]] = None,
    n_eval_clips: int = 4,
    baselines: bool = True,
    progress: bool = False,
) -> AblationReport:
    """Train and evaluate every variant.

    Variants whose stage-1 settings agree share one pretrain run; each
    variant then runs its own full stage. All variants use the same seeds, so
    their data streams are identical, which the report checks through the
    first-batch hashes.

    Args:
        specs: Experiment specs, e.g. from
            :meth:`~vjdd.workflows.sets.AblationGenerator.get_specs`.
        work_dir: Root directory of the runs.
        eval_clips: Clean evaluation clips; held-out synthetic clips when None.
        n_eval_clips: Number of held-out clips to make.
        baselines: Also evaluate the bilinear and bilinear+bilateral baselines.
        progress: Show progress bars.
    """
    if not specs:
        raise ValueError("An ablation needs at least one variant.")
    work_dir = Path(work_dir)
    levels = {s.eval_level for s in specs}
    if len(levels) != 1:
        raise ValueError(f"Variants must share one evaluation level, got {levels}.")
    level = levels.pop()
    first = specs[0].resolved_config()
    if eval_clips is None:
        eval_clips = held_out_clips(
            count=n_eval_clips,
            size=first.data.crop_size,
            n_frames=first.data.clip_len,
            seed=first.seeds.eval,
            margin=first.motion.margin,
            motion=MotionParams.from_config(first.motion),
        )
    perceptual = build_extractor(first.loss.perceptual_model, first.seeds.perceptual)

    pretrained: Dict[str, TrainResult] = {}
    report = AblationReport(level=level)
    for spec in specs:
        config = spec.resolved_config()
        key = spec.pretrain_key()
        if key not in pretrained:
            pre_config = config.updated(
                {"paths.work_dir": str(work_dir / f"pretrain_{key}")}
            )
            logger.info("Pretraining for %s (key %s)", spec.name, key)
            pretrained[key] = train(pre_config, "pretrain", progress=progress)
        pre = pretrained[key]
        config = config.updated({"paths.work_dir": str(work_dir / spec.slug)})
        logger.info("Fine-tuning variant %s", spec.name)
        result = train(
            config, "full", init_checkpoint=pre.checkpoint_dir, progress=progress
        )
        restorer = NetworkRestorer.from_checkpoint(result.checkpoint, name=spec.name)
        evaluation = evaluate(
            restorer,
            eval_clips,
            level=level,
            seed=config.seeds.eval,
            pattern=config.data.bayer_pattern,
            perceptual=perceptual,
        )
        report.variants.append(
            VariantResult(
                label=spec.name,
                checkpoint_dir=str(result.checkpoint_dir),
                pretrain_checkpoint_dir=str(pre.checkpoint_dir),
                first_batch_sha256=result.first_batch_sha256,
                report=evaluation,
            )
        )
    if baselines:
        for denoise in (False, True):
            restorer = BilinearRestorer(
                pattern=first.data.bayer_pattern, denoise=denoise
            )
            report.baselines.append(
                evaluate(
                    restorer,
                    eval_clips,
                    level=level,
                    seed=first.seeds.eval,
                    pattern=first.data.bayer_pattern,
                    perceptual=perceptual,
                )
            )
    if not report.data_consistent:
        logger.warning("Ablation variants did not see identical training data.")
    return report
