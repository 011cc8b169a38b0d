"""Training objectives.

All losses take restored and ground-truth clips of shape (N, 3, H, W) or
batches (B, N, 3, H, W). Each loss sums Charbonnier terms over frames (or
frame pairs) of one clip and averages over the batch.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from vjdd.core.base import ShapeError, VJDDError, as_batch
from vjdd.core.degrade import isp
from vjdd.core.motionsynth import gap_flows, warp

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-3
COMPONENTS = ("l_r", "l_p", "l_dtc", "l_dtc_long", "l_rpc")


class LossError(VJDDError):
    """Base exception for losses."""


class ContractError(LossError):
    """Exception raised when a loss is called without the data it needs."""


class NumericError(LossError):
    """Exception raised when a loss component is not finite."""


def _per_sample(sq: torch.Tensor, start: int) -> torch.Tensor:
    return sq.flatten(start).sum(-1)


def charbonnier(
    a: torch.Tensor,
    b: torch.Tensor,
    eps: float = DEFAULT_EPS,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Charbonnier distance sqrt(sum(mask * (a - b)**2) + eps**2) over all elements."""
    if a.shape != b.shape:
        raise ShapeError(f"Shapes {tuple(a.shape)} and {tuple(b.shape)} differ.")
    sq = (a - b) ** 2
    if mask is not None:
        sq = mask * sq
    return torch.sqrt(sq.sum() + eps**2)


def _clips(xh: torch.Tensor, x: torch.Tensor):
    if xh.shape != x.shape:
        raise ShapeError(
            f"Restored clip {tuple(xh.shape)} and ground truth {tuple(x.shape)} differ."
        )
    return as_batch(xh, 5)[0], as_batch(x, 5)[0]


def _framewise(xh: torch.Tensor, x: torch.Tensor, eps: float) -> torch.Tensor:
    # (B, N, ...) -> sum over frames of per-frame Charbonnier, mean over batch
    return torch.sqrt(_per_sample((xh - x) ** 2, 2) + eps**2).sum(1).mean()


def loss_r(xh: torch.Tensor, x: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Reconstruction loss in the linear and sRGB domains."""
    xh, x = _clips(xh, x)
    return _framewise(xh, x, eps) + _framewise(isp(xh), isp(x), eps)


class RandomConvExtractor(nn.Module):
    """Frozen feature stack of seeded random convolutions.

    Three stages of 3x3 convolution, LeakyReLU and 2x average pooling. Weights
    are drawn once, uniformly within +-1/sqrt(fan_in), and never trained.
    """

    def __init__(
        self,
        channels: Sequence[int] = (16, 32, 64),
        seed: int = 4,
        negative_slope: float = 0.2,
    ):
        """Draw the frozen weights from ``seed``."""
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.negative_slope = negative_slope
        self.convs = nn.ModuleList()
        c_in = 3
        for c_out in channels:
            conv = nn.Conv2d(c_in, c_out, 3, padding=1, bias=False)
            bound = 1 / math.sqrt(c_in * 9)
            with torch.no_grad():
                weight = torch.rand(conv.weight.shape, generator=generator)
                conv.weight.copy_((2 * weight - 1) * bound)
            conv.weight.requires_grad_(False)
            self.convs.append(conv)
            c_in = c_out
        self.eval()

    def train(self, mode: bool = True):
        """Keep the extractor in evaluation mode."""
        return super().train(False)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        """Features of every stage for frames (B, 3, H, W)."""
        feats = []
        for conv in self.convs:
            x = F.avg_pool2d(F.leaky_relu(conv(x), self.negative_slope), 2)
            feats.append(x)
        return feats


class TorchScriptExtractor(nn.Module):
    """Frozen feature extractor loaded from a TorchScript file (e.g. VGG features)."""

    def __init__(self, path: Union[str, Path]):
        """Load the scripted module."""
        super().__init__()
        self.module = torch.jit.load(str(path), map_location="cpu")
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.module.eval()

    def train(self, mode: bool = True):
        """Keep the extractor in evaluation mode."""
        return super().train(False)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        """Features for frames (B, 3, H, W)."""
        out = self.module(x)
        return list(out) if isinstance(out, (list, tuple)) else [out]


def build_extractor(path: Optional[str] = None, seed: int = 4) -> nn.Module:
    """Perceptual extractor: TorchScript from ``path`` or the seeded random stack."""
    if path:
        logger.info("Loading perceptual extractor from %s", path)
        return TorchScriptExtractor(path)
    return RandomConvExtractor(seed=seed)


def _phi(phi: Callable, frames: torch.Tensor, srgb: bool = False) -> torch.Tensor:
    # (B, N, 3, H, W) -> (B, N, D) flattened multi-stage features
    b, n = frames.shape[:2]
    flat = frames.reshape(b * n, *frames.shape[2:])
    feats = phi(isp(flat) if srgb else flat)
    if isinstance(feats, torch.Tensor):
        feats = [feats]
    return torch.cat([f.reshape(b, n, -1) for f in feats], dim=-1)


def loss_p(
    xh: torch.Tensor, x: torch.Tensor, phi: Callable, eps: float = DEFAULT_EPS
) -> torch.Tensor:
    """Perceptual loss: Charbonnier distance of extractor features of sRGB frames."""
    xh, x = _clips(xh, x)
    return _framewise(
        _phi(phi, xh, srgb=True), _phi(phi, x, srgb=True).detach(), eps
    )


def loss_rpc(
    xh: torch.Tensor, x: torch.Tensor, phi: Callable, eps: float = DEFAULT_EPS
) -> torch.Tensor:
    """Relational consistency of temporal feature differences.

    Features are taken of the unaligned linear frames, without the ISP.
    """
    xh, x = _clips(xh, x)
    if xh.shape[1] < 2:
        raise ContractError("The relational loss needs clips of at least 2 frames.")
    fh = _phi(phi, xh)
    f = _phi(phi, x).detach()
    rel = (fh[:, :-1] - fh[:, 1:]) - (f[:, :-1] - f[:, 1:])
    return torch.sqrt(_per_sample(rel**2, 2) + eps**2).sum(1).mean()


def loss_dtc_long(
    restored: torch.Tensor,
    step_flows: Optional[torch.Tensor],
    gap: int,
    masks: Optional[torch.Tensor] = None,
    eps: float = DEFAULT_EPS,
) -> torch.Tensor:
    """Consistency of restored frames ``gap`` apart under the known motion.

    Args:
        restored: Restored clip (N, 3, H, W) or batch (B, N, 3, H, W).
        step_flows: Ground-truth f_{t->t+1}, (N-1, 2, H, W) or batched.
        gap: Frame distance.
        masks: Optional content masks (N, 1, H, W) or batched.
        eps: Charbonnier floor.
    """
    if step_flows is None:
        raise ContractError("Temporal consistency losses need ground-truth flows.")
    restored, _ = as_batch(restored, 5)
    step_flows, _ = as_batch(step_flows, 5)
    b, n, c, height, width = restored.shape
    if n <= gap:
        raise ContractError(f"A gap of {gap} needs more than {gap} frames, got {n}.")
    if step_flows.shape[:2] != (b, n - 1):
        raise ContractError(
            f"Expected {n - 1} step flows per clip, got {tuple(step_flows.shape)}."
        )
    m = n - gap
    flows = gap_flows(step_flows, gap).reshape(b * m, 2, height, width)
    src = restored[:, :m].reshape(b * m, c, height, width)
    tgt = restored[:, gap:].reshape(b * m, c, height, width)
    warped, valid = warp(src, flows)
    if masks is not None:
        masks, _ = as_batch(masks, 5)
        carried = warp(masks[:, :m].reshape(b * m, 1, height, width), flows)[0]
        valid = valid * (carried >= 1 - 1e-6).to(valid.dtype)
        valid = valid * masks[:, gap:].reshape(b * m, 1, height, width)
    sq = _per_sample(valid * (warped - tgt) ** 2, 1).view(b, m)
    return torch.sqrt(sq + eps**2).sum(1).mean()


def loss_dtc(
    restored: torch.Tensor,
    step_flows: Optional[torch.Tensor],
    masks: Optional[torch.Tensor] = None,
    eps: float = DEFAULT_EPS,
) -> torch.Tensor:
    """Consistency of consecutive restored frames under the known step motion."""
    return loss_dtc_long(restored, step_flows, 1, masks=masks, eps=eps)


@dataclass
class LossWeights:
    """Weights of the perceptual, DTC, long-term DTC and RPC terms."""

    lam: float = 0.002
    alpha: float = 0.5
    beta: float = 0.2
    gamma: float = 0.001

    @classmethod
    def from_config(cls, config) -> "LossWeights":
        """Build from a :class:`~vjdd.core.config.LossConfig`."""
        return cls(config.lam, config.alpha, config.beta, config.gamma)

    @classmethod
    def reconstruction_only(cls) -> "LossWeights":
        """Weights of the pretraining objective."""
        return cls(0.0, 0.0, 0.0, 0.0)

    def for_component(self) -> Dict[str, float]:
        """Weight of every loss component."""
        return {
            "l_r": 1.0,
            "l_p": self.lam,
            "l_dtc": self.alpha,
            "l_dtc_long": self.beta,
            "l_rpc": self.gamma,
        }


def weighted_total(values: Dict[str, Optional[float]], weights: LossWeights) -> float:
    """Total of logged component values; absent components count as zero."""
    total = 0.0
    for name, weight in weights.for_component().items():
        value = values.get(name)
        if value is not None and weight != 0:
            total += weight * value
    return total


@dataclass
class LossBreakdown:
    """Loss components (None when not computed) and the differentiable total."""

    total: torch.Tensor
    weights: LossWeights
    l_r: torch.Tensor
    l_p: Optional[torch.Tensor] = None
    l_dtc: Optional[torch.Tensor] = None
    l_dtc_long: Optional[torch.Tensor] = None
    l_rpc: Optional[torch.Tensor] = None

    def values(self) -> Dict[str, Optional[float]]:
        """Component values as floats."""
        return {
            name: None if getattr(self, name) is None else float(getattr(self, name))
            for name in COMPONENTS
        }

    def as_record(self) -> Dict[str, Optional[float]]:
        """Loggable record of the components and the optimized total."""
        record = self.values()
        record["total"] = float(self.total)
        return record


def total_loss(
    l_r: torch.Tensor,
    l_p: Optional[torch.Tensor] = None,
    l_dtc: Optional[torch.Tensor] = None,
    l_dtc_long: Optional[torch.Tensor] = None,
    l_rpc: Optional[torch.Tensor] = None,
    weights: Optional[LossWeights] = None,
) -> LossBreakdown:
    """Weighted sum L_r + lam L_p + alpha L_dtc + beta L_dtc_long + gamma L_rpc."""
    weights = weights or LossWeights()
    parts = {
        "l_r": l_r,
        "l_p": l_p,
        "l_dtc": l_dtc,
        "l_dtc_long": l_dtc_long,
        "l_rpc": l_rpc,
    }
    for name, value in parts.items():
        if value is not None and not torch.isfinite(torch.as_tensor(value)).all():
            raise NumericError(f"Loss component {name} is not finite: {value}.")
    total = l_r
    for name, weight in weights.for_component().items():
        if name != "l_r" and parts[name] is not None and weight != 0:
            total = total + weight * parts[name]
    return LossBreakdown(total=total, weights=weights, **parts)
