"""Evaluation of restorers on clean clips degraded at a fixed noise level."""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from monty.serialization import dumpfn, loadfn

from vjdd.core.dataio import Checkpoint, Clip
from vjdd.core.degrade import (
    NOISELESS,
    BayerPattern,
    NoiseParams,
    degrade_frame,
    noise_std,
)
from vjdd.core.flowmetrics import MetricReport, compute_clip_metrics
from vjdd.core.losses import loss_p
from vjdd.core.motionsynth import MotionParams, random_texture, synth_clip
from vjdd.workflows.training import model_from_checkpoint

logger = logging.getLogger(__name__)

EVAL_SEED = 1234
GREEN_KERNEL = ((0.0, 1.0, 0.0), (1.0, 4.0, 1.0), (0.0, 1.0, 0.0))
RED_BLUE_KERNEL = ((1.0, 2.0, 1.0), (2.0, 4.0, 2.0), (1.0, 2.0, 1.0))
METRIC_COLUMNS = ("psnr", "ssim", "we", "tof", "rwe", "lp")


class Restorer(Protocol):
    """Anything that maps a noisy CFA clip and its noise maps to linear RGB."""

    name: str

    def restore(self, cfa: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
        """Restore a clip (N, H, W) into frames (N, 3, H, W)."""
        ...


def bayer_masks(
    height: int,
    width: int,
    pattern: Union[BayerPattern, str] = "RGGB",
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Sampling masks (3, H, W) of the R, G and B sites of a Bayer pattern."""
    masks = torch.zeros(3, height, width, dtype=dtype)
    tiles = ((0, 0), (0, 1), (1, 0), (1, 1))
    for c, (dy, dx) in zip(BayerPattern(pattern).channels, tiles):
        masks[c, dy::2, dx::2] = 1
    return masks


def bilinear_demosaic(
    cfa: torch.Tensor, pattern: Union[BayerPattern, str] = "RGGB"
) -> torch.Tensor:
    """Bilinear interpolation of a CFA (..., H, W) into RGB (..., 3, H, W).

    Each channel is its sparse samples convolved with the classic bilinear
    kernel, normalized by the convolved sampling mask so that frame borders
    only average the samples that exist.
    """
    height, width = cfa.shape[-2:]
    lead = cfa.shape[:-2]
    flat = cfa.reshape(-1, 1, height, width)
    masks = bayer_masks(height, width, pattern, cfa.dtype).to(cfa.device)
    green = torch.tensor(GREEN_KERNEL, dtype=cfa.dtype, device=cfa.device) / 4
    red_blue = torch.tensor(RED_BLUE_KERNEL, dtype=cfa.dtype, device=cfa.device) / 4
    out = []
    for c in range(3):
        kernel = (green if c == 1 else red_blue).view(1, 1, 3, 3)
        mask = masks[c].view(1, 1, height, width)
        num = F.conv2d(flat * mask, kernel, padding=1)
        den = F.conv2d(mask, kernel, padding=1)
        out.append(num / den)
    return torch.cat(out, dim=1).reshape(*lead, 3, height, width)


@dataclass
class BilinearRestorer:
    """Non-learned baseline: bilinear demosaicking, optionally bilateral denoising.

    The bilateral range scale is ``sigma_color_factor`` times the mean noise
    standard deviation of each frame.
    """

    pattern: str = "RGGB"
    denoise: bool = False
    diameter: int = 5
    sigma_color_factor: float = 2.0
    sigma_space: float = 1.5

    @property
    def name(self) -> str:
        """Row label of the baseline."""
        return "bilinear+bilateral" if self.denoise else "bilinear"

    def _bilateral(self, frame: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
        img = frame.permute(1, 2, 0).cpu().numpy().astype(np.float32)
        sigma_color = self.sigma_color_factor * float(std.mean())
        out = cv2.bilateralFilter(img, self.diameter, sigma_color, self.sigma_space)
        return torch.from_numpy(out).permute(2, 0, 1).to(frame.dtype)

    def restore(self, cfa: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
        """Demosaic (and denoise) every frame of a clip (N, H, W)."""
        rgb = bilinear_demosaic(cfa, self.pattern)
        if self.denoise:
            rgb = torch.stack([self._bilateral(f, s) for f, s in zip(rgb, std)])
        return rgb


@dataclass
class OracleRestorer:
    """Returns the ground truth of the clip being evaluated."""

    name: str = "oracle"
    frames: Optional[torch.Tensor] = None

    def prepare(self, clip: Clip):
        """Remember the ground truth of the next clip."""
        self.frames = clip.frames

    def restore(self, cfa: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
        """Ground-truth frames of the prepared clip."""
        if self.frames is None:
            raise ValueError("The oracle has no clip prepared.")
        return self.frames.clone()


@dataclass
class NetworkRestorer:
    """Restoration network wrapped as a restorer."""

    model: torch.nn.Module
    name: str = "vjdd"

    @classmethod
    def from_checkpoint(
        cls, checkpoint: Union[Checkpoint, str, Path], name: str = "vjdd"
    ) -> "NetworkRestorer":
        """Load the network stored in a checkpoint."""
        return cls(model=model_from_checkpoint(checkpoint), name=name)

    def restore(self, cfa: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
        """Run the network over the clip."""
        return self.model.restore(cfa, std)


def make_restorer(kind: str, checkpoint: Optional[str] = None, pattern: str = "RGGB"):
    """Restorer by name: "network", "bilinear", "bilateral" or "oracle"."""
    if kind == "network":
        if checkpoint is None:
            raise ValueError("The network restorer needs a checkpoint.")
        return NetworkRestorer.from_checkpoint(checkpoint)
    if kind == "bilinear":
        return BilinearRestorer(pattern=pattern)
    if kind == "bilateral":
        return BilinearRestorer(pattern=pattern, denoise=True)
    if kind == "oracle":
        return OracleRestorer()
    raise ValueError(f'Unknown restorer "{kind}".')


def _mean(values: List[Optional[float]]) -> Optional[float]:
    values = [v for v in values if v is not None]
    if not values:
        return None
    if any(math.isinf(v) for v in values):
        return math.inf
    return float(np.mean(values))


@dataclass
class EvaluationReport:
    """Metrics of one restorer over a set of clips."""

    restorer: str
    level: str
    seed: int
    domain: str = "srgb"
    clips: List[MetricReport] = field(default_factory=list)
    lp: List[Optional[float]] = field(default_factory=list)

    def means(self) -> Dict[str, Optional[float]]:
        """Metric means over clips (clip means first, then their mean)."""
        per_clip = [c.means() for c in self.clips]
        out = {
            name: _mean([m[name] for m in per_clip]) for name in METRIC_COLUMNS[:-1]
        }
        out["lp"] = _mean(self.lp)
        return out

    def as_dict(self):
        """Return a dict representation of the report."""
        return {
            "@module": self.__class__.__module__,
            "@class": self.__class__.__name__,
            "restorer": self.restorer,
            "level": self.level,
            "seed": self.seed,
            "domain": self.domain,
            "clips": [c.as_dict() for c in self.clips],
            "lp": self.lp,
            "means": self.means(),
        }

    @classmethod
    def from_dict(cls, d):
        """Construct the report from its dict representation."""
        clips = [
            c if isinstance(c, MetricReport) else MetricReport.from_dict(c)
            for c in d["clips"]
        ]
        return cls(
            restorer=d["restorer"],
            level=d["level"],
            seed=d["seed"],
            domain=d.get("domain", "srgb"),
            clips=clips,
            lp=d.get("lp") or [],
        )

    def to_file(self, fname: Union[str, Path]):
        """Write the report (JSON or YAML by extension)."""
        dumpfn(self.as_dict(), fname)

    @classmethod
    def from_file(cls, fname: Union[str, Path]) -> "EvaluationReport":
        """Read a report written by :meth:`to_file`."""
        data = loadfn(fname)
        return data if isinstance(data, cls) else cls.from_dict(data)


def noise_params_for(level: str) -> NoiseParams:
    """Evaluation noise of a level name ("low", "high" or "none")."""
    if level.lower() == "none":
        return NOISELESS
    return NoiseParams.from_level(level)


def evaluate(
    restorer: Restorer,
    clips: Sequence[Clip],
    level: str = "low",
    seed: int = EVAL_SEED,
    pattern: str = "RGGB",
    domain: str = "srgb",
    flow_source: str = "gt",
    heatmap_dir: Optional[Union[str, Path]] = None,
    perceptual: Optional[torch.nn.Module] = None,
) -> EvaluationReport:
    """Degrade every clip at ``level``, restore it and measure the result.

    Clip ``i`` is degraded with a generator seeded ``seed + i``, so the same
    clips, level and seed always give the same observations.

    Args:
        restorer: Object with ``restore(cfa, std)``; an optional
            ``prepare(clip)`` is called before each clip.
        clips: Clean clips.
        level: "low", "high" or "none".
        seed: Evaluation noise seed.
        pattern: Bayer pattern of the observations.
        domain: Metric domain, "srgb" or "linear".
        flow_source: Flow pair of WE/RWE, "gt" or "restored".
        heatmap_dir: Write amplified WE/RWE heatmaps there when given.
        perceptual: Also report the perceptual distance per frame.
    """
    params = noise_params_for(level)
    report = EvaluationReport(
        restorer=getattr(restorer, "name", type(restorer).__name__),
        level=level,
        seed=seed,
        domain=domain,
    )
    for i, clip in enumerate(clips):
        generator = torch.Generator().manual_seed(seed + i)
        raw = degrade_frame(clip.frames, params, generator, pattern)
        std = noise_std(raw.cfa, *params.as_tuple())
        prepare = getattr(restorer, "prepare", None)
        if prepare is not None:
            prepare(clip)
        with torch.no_grad():
            restored = restorer.restore(raw.cfa, std).to(clip.frames.dtype)
        metrics, maps = compute_clip_metrics(
            restored,
            clip.frames,
            clip_id=clip.id,
            domain=domain,
            flow_source=flow_source,
            heatmaps=heatmap_dir is not None,
        )
        report.clips.append(metrics)
        if perceptual is not None:
            with torch.no_grad():
                lp = loss_p(restored, clip.frames, perceptual)
            report.lp.append(float(lp) / len(clip))
        if heatmap_dir is not None:
            write_heatmaps(maps, Path(heatmap_dir, report.restorer, clip.id))
        logger.info("Evaluated %s on %s", report.restorer, clip.id)
    return report


def write_heatmaps(maps: Dict[str, List[np.ndarray]], directory: Path):
    """Write WE/RWE heatmaps as PNG images."""
    directory.mkdir(parents=True, exist_ok=True)
    for name, images in maps.items():
        for t, img in enumerate(images):
            cv2.imwrite(str(directory / f"{name}_{t:04d}.png"), img)


def held_out_clips(
    count: int = 4,
    size: int = 32,
    n_frames: int = 8,
    seed: int = EVAL_SEED,
    margin: int = 16,
    motion: Optional[MotionParams] = None,
) -> List[Clip]:
    """Clean synthetic evaluation clips from procedural textures.

    Seeds differ from every training stream, so the clips are never seen in
    training.
    """
    clips = []
    for i in range(count):
        generator = torch.Generator().manual_seed(seed * 7919 + i)
        base = random_texture(size + 2 * margin, size + 2 * margin, generator)
        synth = synth_clip(
            base, n_frames, NOISELESS, generator=generator, motion=motion, out_size=size
        )
        clips.append(Clip(frames=synth.clean.clamp(0, 1), id=f"heldout_{i:03d}"))
    return clips


def _format(value: Optional[float], name: str) -> str:
    if value is None:
        return "-"
    if math.isinf(value):
        return "inf"
    if name in ("psnr",):
        return f"{value:.2f}"
    if name == "ssim":
        return f"{value:.4f}"
    return f"{value:.3e}"


def render_table(
    rows: Sequence[Tuple[str, Dict[str, Any]]], columns: Sequence[str] = METRIC_COLUMNS
) -> str:
    """Plain-text table of metric means, one row per restorer or variant."""
    header = ["variant", *columns]
    body = [
        [label, *(_format(means.get(c), c) for c in columns)] for label, means in rows
    ]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]

    def line(cells):
        return "  ".join(cell.ljust(w) for cell, w in zip(cells, widths)).rstrip()

    rule = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), rule, *(line(r) for r in body)])
