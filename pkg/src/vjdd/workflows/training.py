"""Two-stage training of the restoration network.

Stage "pretrain" optimizes the reconstruction loss only. Stage "full" starts
from a pretrained checkpoint and optimizes the weighted sum of all losses.
Every training item is drawn from ``(seeds.*, item index)`` so that the data
stream depends only on the configuration, not on the worker count or on where
a run was resumed. Real clips from ``data.train_dirs`` feed the reconstruction,
perceptual and relational losses; clips synthesized with known motion feed the
temporal consistency losses.
"""
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import torch
from monty.json import jsanitize
from torch.utils.data import DataLoader, Dataset, Subset
from tqdm import tqdm

from vjdd.core.base import ShapeError, VJDDError
from vjdd.core.config import NoiseConfig, RunConfig
from vjdd.core.dataio import (
    Checkpoint,
    Clip,
    load_checkpoint,
    load_clip,
    save_checkpoint,
)
from vjdd.core.degrade import NoiseParams, degrade_frame, noise_std
from vjdd.core.losses import (
    LossBreakdown,
    LossWeights,
    NumericError,
    build_extractor,
    loss_dtc,
    loss_dtc_long,
    loss_p,
    loss_r,
    loss_rpc,
    total_loss,
    weighted_total,
)
from vjdd.core.motionsynth import MotionParams, random_texture, synth_clip
from vjdd.models.netcore import RestorationNet

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "full")
SEED_STRIDE = 1_000_003


class TrainingError(VJDDError):
    """Base exception for training runs."""


class StageError(TrainingError):
    """Exception raised when a stage is started without its prerequisites."""


class TrainingHaltedError(TrainingError):
    """Exception raised when a non-finite loss stops training.

    Attributes:
        step: Step at which the loss became non-finite.
        checkpoint_dir: Last checkpoint written before the failure, if any.
    """

    def __init__(self, message: str, step: int, checkpoint_dir: Optional[Path] = None):
        """Store the failure step and the last good checkpoint."""
        super().__init__(message)
        self.step = step
        self.checkpoint_dir = checkpoint_dir


def item_seed(base: int, index: int) -> int:
    """Seed of item ``index`` in the stream seeded by ``base``."""
    return base * SEED_STRIDE + index


def sample_noise_params(
    generator: Optional[torch.Generator] = None, config: Optional[NoiseConfig] = None
) -> NoiseParams:
    """Draw (sigma_s, sigma_r) within the configured ranges.

    With ``sampling="log"`` the logarithms are uniform, otherwise the values.
    """
    config = config or NoiseConfig()
    r = torch.rand(2, generator=generator, dtype=torch.float64).tolist()
    sigmas = []
    for u, (lo, hi) in zip(
        r,
        (
            (config.sigma_s_min, config.sigma_s_max),
            (config.sigma_r_min, config.sigma_r_max),
        ),
    ):
        if config.sampling == "log":
            value = math.exp(math.log(lo) + u * (math.log(hi) - math.log(lo)))
        else:
            value = lo + u * (hi - lo)
        sigmas.append(min(max(value, lo), hi))
    return NoiseParams(*sigmas)


def cosine_lr(step: int, total_steps: int, lr0: float, floor: float) -> float:
    """Cosine decay from ``lr0`` at step 0 to ``floor`` at ``total_steps``."""
    if total_steps <= 0:
        return lr0
    s = min(max(step, 0), total_steps)
    return floor + 0.5 * (lr0 - floor) * (1 + math.cos(math.pi * s / total_steps))


def load_sources(paths: List[str]) -> List[Clip]:
    """Load the clean clips listed in ``data.train_dirs``."""
    clips = [load_clip(p) for p in paths]
    logger.info("Loaded %d training clips", len(clips))
    return clips


class TrainingClipDataset(Dataset):
    """Training items of a reconstruction clip and a synthetic motion clip.

    Item ``i`` draws everything from generators seeded with :func:`item_seed`
    of the data, noise and flow seeds. Without source clips a single
    synthetic clip, built from a procedural texture, serves every loss. With
    source clips the item holds a contiguous real clip (``clean``, ``raw``,
    ``std``) for the reconstruction, perceptual and relational losses and a
    clip synthesized from one source frame (``motion_*``, ``step_flows``,
    ``masks``) for the temporal consistency losses.
    """

    def __init__(
        self, config: RunConfig, length: int, sources: Optional[List[Clip]] = None
    ):
        """Create the dataset of ``length`` items."""
        self.config = config
        self.length = length
        self.sources = sources or []
        self.motion = MotionParams.from_config(config.motion)
        self.base_size = config.data.crop_size + 2 * config.motion.margin
        for clip in self.sources:
            if min(clip.height, clip.width) < self.base_size:
                raise ShapeError(
                    f"Clip {clip.id} ({clip.height}x{clip.width}) is smaller than "
                    f"the {self.base_size}px base frame."
                )
            if len(clip) < config.data.clip_len:
                raise ShapeError(
                    f"Clip {clip.id} has {len(clip)} frames; training clips need "
                    f"{config.data.clip_len}."
                )

    def __len__(self):
        """Return the number of items."""
        return self.length

    @property
    def real(self) -> bool:
        """Whether items carry real clips."""
        return bool(self.sources)

    @staticmethod
    def _even_offset(u: float, extent: int, size: int) -> int:
        # even offsets keep the Bayer phase of the crop fixed
        return 2 * int(u * ((extent - size) // 2 + 1))

    def _base_frame(self, generator: torch.Generator) -> torch.Tensor:
        size = self.base_size
        if not self.sources:
            return random_texture(size, size, generator)
        r = torch.rand(4, generator=generator, dtype=torch.float64).tolist()
        clip = self.sources[int(r[0] * len(self.sources))]
        frame = clip.frames[int(r[1] * len(clip))]
        top = self._even_offset(r[2], clip.height, size)
        left = self._even_offset(r[3], clip.width, size)
        return frame[:, top : top + size, left : left + size].float()

    def _real_clip(self, generator: torch.Generator) -> torch.Tensor:
        n, size = self.config.data.clip_len, self.config.data.crop_size
        r = torch.rand(4, generator=generator, dtype=torch.float64).tolist()
        clip = self.sources[int(r[0] * len(self.sources))]
        start = int(r[1] * (len(clip) - n + 1))
        top = self._even_offset(r[2], clip.height, size)
        left = self._even_offset(r[3], clip.width, size)
        frames = clip.frames[start : start + n, :, top : top + size, left : left + size]
        return frames.float().contiguous()

    def __getitem__(self, index: int) -> Dict[str, Any]:
        """Build item ``index``."""
        seeds = self.config.seeds
        data_gen = torch.Generator().manual_seed(item_seed(seeds.data, index))
        noise_gen = torch.Generator().manual_seed(item_seed(seeds.noise, index))
        flow_gen = torch.Generator().manual_seed(item_seed(seeds.flow, index))
        params = sample_noise_params(noise_gen, self.config.noise)
        pattern = self.config.data.bayer_pattern
        synthetic = synth_clip(
            self._base_frame(data_gen),
            self.config.data.clip_len,
            params,
            generator=flow_gen,
            motion=self.motion,
            out_size=self.config.data.crop_size,
            pattern=pattern,
            noise_generator=noise_gen,
        )
        item = {
            "step_flows": synthetic.step_flows,
            "masks": synthetic.masks,
            "sigma_s": params.sigma_s,
            "sigma_r": params.sigma_r,
            "index": index,
        }
        if not self.real:
            item.update(
                clean=synthetic.clean, raw=synthetic.raw, std=synthetic.noise_maps
            )
            return item
        clean = self._real_clip(data_gen)
        raw = torch.stack(
            [degrade_frame(f, params, noise_gen, pattern).cfa for f in clean]
        )
        item.update(
            clean=clean,
            raw=raw,
            std=noise_std(raw, *params.as_tuple()),
            motion_clean=synthetic.clean,
            motion_raw=synthetic.raw,
            motion_std=synthetic.noise_maps,
        )
        return item


def batch_hash(batch: Dict[str, Any]) -> str:
    """SHA-256 of the clean and raw tensors of a batch."""
    digest = hashlib.sha256()
    for key in ("clean", "raw", "motion_clean", "motion_raw"):
        if key in batch:
            digest.update(batch[key].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def compute_losses(
    restored: torch.Tensor,
    batch: Dict[str, Any],
    weights: LossWeights,
    config: RunConfig,
    extractor: Optional[torch.nn.Module] = None,
    motion_restored: Optional[torch.Tensor] = None,
) -> LossBreakdown:
    """Loss components with non-zero weight and their weighted total.

    ``motion_restored`` is the restoration of the synthetic motion clip of
    the batch; when None, ``restored`` itself carries the known motion.
    """
    eps = config.loss.eps
    clean = batch["clean"]
    moving = restored if motion_restored is None else motion_restored
    parts: Dict[str, Optional[torch.Tensor]] = {"l_r": loss_r(restored, clean, eps)}
    if weights.lam:
        parts["l_p"] = loss_p(restored, clean, extractor, eps)
    if weights.alpha:
        parts["l_dtc"] = loss_dtc(moving, batch["step_flows"], batch["masks"], eps)
    if weights.beta:
        parts["l_dtc_long"] = loss_dtc_long(
            moving, batch["step_flows"], config.loss.long_term_gap, batch["masks"], eps
        )
    if weights.gamma:
        parts["l_rpc"] = loss_rpc(restored, clean, extractor, eps)
    return total_loss(weights=weights, **parts)


@dataclass
class TrainResult:
    """Outcome of a training stage."""

    checkpoint: Checkpoint
    checkpoint_dir: Path
    log_file: Path
    first_batch_sha256: Optional[str]
    steps: int


def checkpoint_path(config: RunConfig, stage: str, step: int) -> Path:
    """Directory of the checkpoint of ``stage`` at ``step``."""
    paths = config.paths
    return Path(paths.work_dir, paths.checkpoint_dir, f"{stage}_{step:06d}")


def _model_state(model: torch.nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _truncate_log(log_file: Path, stage: str, start: int):
    # drop records a run of ``stage`` from ``start`` will write again
    if not log_file.exists():
        return
    order = STAGES.index(stage)
    kept = [
        r
        for r in read_log(log_file)
        if STAGES.index(r["stage"]) < order
        or (r["stage"] == stage and r["step"] <= start)
    ]
    with open(log_file, "w") as f:
        for record in kept:
            f.write(json.dumps(record) + "\n")


def build_model(config: RunConfig) -> RestorationNet:
    """Restoration network with parameters drawn from ``seeds.init``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seeds.init)
        return RestorationNet.from_config(config.model)


def train(
    config: RunConfig,
    stage: str = "pretrain",
    init_checkpoint: Optional[Union[str, Path]] = None,
    allow_scratch: bool = False,
    sources: Optional[List[Clip]] = None,
    progress: bool = False,
) -> TrainResult:
    """Run one training stage.

    Args:
        config: Run configuration.
        stage: "pretrain" (reconstruction loss only) or "full" (all losses).
        init_checkpoint: Checkpoint to start from. A checkpoint of the same
            stage resumes it (optimizer state and step included); a pretrain
            checkpoint starts the full stage.
        allow_scratch: Start the full stage without a pretrain checkpoint.
        sources: Clean source clips; loaded from ``data.train_dirs`` when
            None.
        progress: Show a progress bar.

    Returns:
        The final checkpoint and where the run wrote its outputs.
    """
    if stage not in STAGES:
        raise StageError(f'Unknown stage "{stage}"; expected one of {STAGES}.')
    model = build_model(config)
    schedule = config.schedule
    optimizer = torch.optim.Adam(
        model.parameters(), lr=schedule.lr, betas=schedule.betas
    )
    start, first_hash = 0, None
    if init_checkpoint is not None:
        ckpt = load_checkpoint(init_checkpoint)
        model.load_state_dict(ckpt.params)
        if ckpt.stage == stage:
            if ckpt.optimizer_state is not None:
                optimizer.load_state_dict(ckpt.optimizer_state)
            start = ckpt.step
            first_hash = ckpt.extra.get("first_batch_sha256")
            logger.info("Resuming %s stage at step %d", stage, start)
        elif stage == "pretrain":
            raise StageError("A full-stage checkpoint cannot start pretraining.")
    elif stage == "full" and not allow_scratch:
        raise StageError(
            "The full stage needs a pretrain checkpoint (or allow_scratch=True)."
        )

    total = schedule.pretrain_steps if stage == "pretrain" else schedule.finetune_steps
    if stage == "pretrain":
        weights = LossWeights.reconstruction_only()
    else:
        weights = LossWeights.from_config(config.loss)
    extractor = None
    if weights.lam or weights.gamma:
        extractor = build_extractor(
            config.loss.perceptual_model, config.seeds.perceptual
        )

    if sources is None:
        sources = load_sources(config.data.train_dirs)
    batch_size = config.data.batch_size
    dataset = TrainingClipDataset(config, total * batch_size, sources)
    loader = DataLoader(
        Subset(dataset, range(start * batch_size, total * batch_size)),
        batch_size=batch_size,
        shuffle=False,
        num_workers=config.data.num_workers,
    )
    log_file = Path(config.paths.work_dir, config.paths.log_file)
    log_file.parent.mkdir(parents=True, exist_ok=True)
    _truncate_log(log_file, stage, start)

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            params=_model_state(model),
            optimizer_state=optimizer.state_dict(),
            step=step,
            config=config.model_dump(mode="json"),
            stage=stage,
            extra={
                "first_batch_sha256": first_hash,
                "items_consumed": step * batch_size,
                "seeds": config.seeds.model_dump(),
            },
        )

    step = start
    last_good: Optional[Path] = None
    model.train()
    logger.info("Training %s stage for %d steps", stage, total - start)
    with open(log_file, "a") as log:
        batches = tqdm(loader, total=total - start, disable=not progress, desc=stage)
        for batch in batches:
            if first_hash is None:
                first_hash = batch_hash(batch)
                logger.info("First %s batch sha256 %s", stage, first_hash)
            lr = cosine_lr(step, total, schedule.lr, schedule.lr_floor)
            for group in optimizer.param_groups:
                group["lr"] = lr
            restored = model.run_clip(batch["raw"], batch["std"])
            motion_restored = None
            if (weights.alpha or weights.beta) and "motion_raw" in batch:
                motion_restored = model.run_clip(
                    batch["motion_raw"], batch["motion_std"]
                )
            try:
                breakdown = compute_losses(
                    restored, batch, weights, config, extractor, motion_restored
                )
            except NumericError as exc:
                raise TrainingHaltedError(
                    f"Non-finite loss at step {step} of the {stage} stage: {exc} "
                    f"Last good checkpoint: {last_good}.",
                    step=step,
                    checkpoint_dir=last_good,
                ) from exc
            optimizer.zero_grad()
            breakdown.total.backward()
            optimizer.step()
            step += 1
            if step % schedule.log_every == 0 or step == total:
                record = {"stage": stage, "step": step, "lr": lr}
                record.update(breakdown.as_record())
                record["weights"] = asdict(breakdown.weights)
                log.write(json.dumps(jsanitize(record)) + "\n")
                log.flush()
            if step % schedule.checkpoint_every == 0 and step < total:
                last_good = save_checkpoint(
                    snapshot(step), checkpoint_path(config, stage, step)
                )

    final = snapshot(step)
    final_dir = save_checkpoint(final, checkpoint_path(config, stage, step))
    return TrainResult(
        checkpoint=final,
        checkpoint_dir=final_dir,
        log_file=log_file,
        first_batch_sha256=first_hash,
        steps=step,
    )


def read_log(path: Union[str, Path]) -> List[Dict[str, Any]]:
    """Read the records of a training log."""
    with open(path, "r") as f:
        return [json.loads(line) for line in f if line.strip()]


def model_from_checkpoint(ckpt: Union[Checkpoint, str, Path]) -> RestorationNet:
    """Rebuild the network stored in a checkpoint."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    config = RunConfig.build(ckpt.config)
    model = RestorationNet.from_config(config.model)
    model.load_state_dict(ckpt.params)
    model.eval()
    return model


def ema(values: List[float], decay: float = 0.9) -> List[float]:
    """Exponential moving average of a sequence."""
    out: List[float] = []
    for v in values:
        out.append(v if not out else decay * out[-1] + (1 - decay) * v)
    return out


def summarize_log(records: List[Dict[str, Any]]) -> Dict[str, Dict[str, Any]]:
    """Per-stage summary of training log records.

    ``totals_consistent`` tells whether every logged total matches the weighted
    sum of the logged components up to float32 rounding.
    """
    summary = {}
    for stage in STAGES:
        rows = [r for r in records if r.get("stage") == stage]
        if not rows:
            continue
        consistent = all(
            math.isclose(
                weighted_total(r, LossWeights(**r["weights"])),
                r["total"],
                rel_tol=1e-5,
                abs_tol=1e-8,
            )
            for r in rows
            if "weights" in r
        )
        summary[stage] = {
            "steps": rows[-1]["step"],
            "lr": rows[-1]["lr"],
            "total": rows[-1]["total"],
            "l_r_ema": ema([r["l_r"] for r in rows])[-1],
            "totals_consistent": consistent,
        }
    return summary
