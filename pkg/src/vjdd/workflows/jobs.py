"""Jobflow makers for vjdd training and evaluation."""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, ClassVar, Dict, List, Optional

from jobflow import Flow, Maker, job

from vjdd.core.losses import build_extractor
from vjdd.core.motionsynth import MotionParams
from vjdd.workflows.evaluation import (
    NetworkRestorer,
    evaluate,
    held_out_clips,
    render_table,
)
from vjdd.workflows.sets import AblationGenerator, ExperimentGenerator, ExperimentSpec
from vjdd.workflows.training import train


def _spec_config(spec: ExperimentSpec, work_dir: str):
    return spec.resolved_config().updated({"paths.work_dir": work_dir})


@dataclass
class BaseVJDDMaker(Maker):
    """Maker for vjdd jobs."""

    experiment_generator: ExperimentGenerator = field(
        default_factory=ExperimentGenerator
    )
    name: Optional[str] = None
    job_type: ClassVar[str] = "job"

    def __post_init__(self):
        """Process post-init configuration."""
        if self.name is None:
            self.name = f"{self.experiment_generator.calc_type} {self.job_type}"


@dataclass
class PretrainMaker(BaseVJDDMaker):
    """Maker for the reconstruction-only training stage."""

    job_type: ClassVar[str] = "pretrain"

    @job
    def make(self, spec: Optional[ExperimentSpec] = None) -> Dict[str, Any]:
        """Return a pretraining jobflow.Job."""
        spec = spec or self.experiment_generator.get_spec()
        work_dir = Path(f"pretrain_{spec.pretrain_key()}").absolute()
        config = _spec_config(spec, str(work_dir))
        result = train(config, "pretrain")
        return {
            "checkpoint_dir": str(result.checkpoint_dir.absolute()),
            "first_batch_sha256": result.first_batch_sha256,
            "steps": result.steps,
        }


@dataclass
class FinetuneMaker(BaseVJDDMaker):
    """Maker for the full-loss training stage."""

    job_type: ClassVar[str] = "finetune"

    @job
    def make(
        self, pretrain: Dict[str, Any], spec: Optional[ExperimentSpec] = None
    ) -> Dict[str, Any]:
        """Return a fine-tuning jobflow.Job starting from a pretrain output."""
        spec = spec or self.experiment_generator.get_spec()
        config = _spec_config(spec, str(Path(spec.slug).absolute()))
        result = train(config, "full", init_checkpoint=pretrain["checkpoint_dir"])
        return {
            "label": spec.name,
            "checkpoint_dir": str(result.checkpoint_dir.absolute()),
            "first_batch_sha256": result.first_batch_sha256,
            "steps": result.steps,
        }


@dataclass
class EvaluateMaker(BaseVJDDMaker):
    """Maker for evaluating a trained checkpoint on held-out synthetic clips."""

    n_clips: int = 4
    job_type: ClassVar[str] = "evaluate"

    @job
    def make(
        self, trained: Dict[str, Any], spec: Optional[ExperimentSpec] = None
    ) -> Dict[str, Any]:
        """Return an evaluation jobflow.Job."""
        spec = spec or self.experiment_generator.get_spec()
        config = spec.resolved_config()
        clips = held_out_clips(
            count=self.n_clips,
            size=config.data.crop_size,
            n_frames=config.data.clip_len,
            seed=config.seeds.eval,
            margin=config.motion.margin,
            motion=MotionParams.from_config(config.motion),
        )
        restorer = NetworkRestorer.from_checkpoint(
            trained["checkpoint_dir"], name=spec.name
        )
        perceptual = build_extractor(
            config.loss.perceptual_model, config.seeds.perceptual
        )
        report = evaluate(
            restorer,
            clips,
            level=spec.eval_level,
            seed=config.seeds.eval,
            pattern=config.data.bayer_pattern,
            perceptual=perceptual,
        )
        return report.as_dict()


@job
def collect_ablation(
    labels: List[str], reports: List[Dict[str, Any]]
) -> Dict[str, Any]:
    """Gather the variant reports into one table."""
    rows = [(label, report["means"]) for label, report in zip(labels, reports)]
    return {"rows": dict(rows), "table": render_table(rows)}


def ablation_flow(
    generator: Optional[AblationGenerator] = None, n_eval_clips: int = 4
) -> Flow:
    """Flow training and evaluating every ablation variant.

    Variants with the same stage-1 settings share one pretrain job.
    """
    generator = generator or AblationGenerator()
    jobs = []
    pretrain_jobs = {}
    labels, reports = [], []
    for spec in generator.get_specs():
        key = spec.pretrain_key()
        if key not in pretrain_jobs:
            pretrain = PretrainMaker(
                experiment_generator=generator, name=f"pretrain {key}"
            ).make(spec)
            pretrain_jobs[key] = pretrain
            jobs.append(pretrain)
        finetune = FinetuneMaker(
            experiment_generator=generator, name=f"finetune {spec.name}"
        ).make(pretrain_jobs[key].output, spec)
        evaluation = EvaluateMaker(
            experiment_generator=generator,
            name=f"evaluate {spec.name}",
            n_clips=n_eval_clips,
        ).make(finetune.output, spec)
        jobs.extend([finetune, evaluation])
        labels.append(spec.name)
        reports.append(evaluation.output)
    collect = collect_ablation(labels, reports)
    jobs.append(collect)
    return Flow(jobs, output=collect.output, name=generator.calc_type)
