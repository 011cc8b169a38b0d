"""Global-to-local alignment of frame features.

A target feature map is aligned to a reference in three steps:

1. an exhaustive integer translation search on the quarter-resolution level
   of a learned three-level pyramid;
2. the translation, rescaled per level, is applied to the whole target
   pyramid;
3. coarse-to-fine learned offsets drive deformable sampling at every level,
   each level fused with the upsampled result of the coarser one.
"""
import logging
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import deform_conv2d

from vjdd.core.base import ShapeError, VJDDWarning, as_batch, unbatch
from vjdd.core.motionsynth import warp

logger = logging.getLogger(__name__)

N_LEVELS = 3
KERNEL_TAPS = tuple((ky, kx) for ky in (-1, 0, 1) for kx in (-1, 0, 1))
MIN_OVERLAP = 0.25
NEGATIVE_SLOPE = 0.1


class GlobalShiftSaturationWarning(VJDDWarning):
    """Warning raised when the global search ends on the border of its range."""


def _candidates(f_max: int):
    span = range(-f_max, f_max + 1)
    shifts = [(u, v) for u in span for v in span]
    return sorted(shifts, key=lambda s: (s[0] ** 2 + s[1] ** 2, s[0], s[1]))


@torch.no_grad()
def global_align(ref_q: torch.Tensor, tgt_q: torch.Tensor, f_max: int) -> torch.Tensor:
    """Integer translation (u, v) minimizing the overlap-mean absolute difference.

    The cost of a candidate is the mean of ``|warp(tgt, (u, v)) - ref|`` over
    the pixels where the shifted target is defined. Candidates whose overlap
    covers less than a quarter of the frame are skipped. Ties go to the
    smaller shift norm, then to the lexicographically smaller (u, v).

    Args:
        ref_q: Reference features (C, H, W) or (B, C, H, W).
        tgt_q: Target features of the same shape.
        f_max: Search radius.

    Returns:
        Long tensor (2,) or (B, 2) of shifts.
    """
    if ref_q.shape != tgt_q.shape:
        raise ShapeError(
            f"Reference {tuple(ref_q.shape)} and target {tuple(tgt_q.shape)} differ."
        )
    if f_max < 0:
        raise ValueError(f"f_max must be >= 0, got {f_max}.")
    ref, squeeze = as_batch(ref_q, 4)
    tgt, _ = as_batch(tgt_q, 4)
    b, _, height, width = ref.shape
    best_cost = torch.full((b,), float("inf"), dtype=torch.float64, device=ref.device)
    best = torch.zeros(b, 2, dtype=torch.long, device=ref.device)
    for u, v in _candidates(f_max):
        overlap_h, overlap_w = height - abs(v), width - abs(u)
        if overlap_h <= 0 or overlap_w <= 0:
            continue
        if overlap_h * overlap_w < MIN_OVERLAP * height * width:
            continue
        y0, x0 = max(0, -v), max(0, -u)
        ref_part = ref[..., y0 : y0 + overlap_h, x0 : x0 + overlap_w]
        tgt_part = tgt[..., y0 + v : y0 + v + overlap_h, x0 + u : x0 + u + overlap_w]
        cost = (tgt_part - ref_part).abs().flatten(1).mean(1).to(torch.float64)
        better = cost < best_cost
        best_cost = torch.where(better, cost, best_cost)
        best[better] = torch.tensor([u, v], device=ref.device)
    if f_max > 0 and bool((best.abs() == f_max).any()):
        warnings.warn(
            f"Global shift reached the search limit f_max={f_max}.",
            GlobalShiftSaturationWarning,
        )
    return unbatch(best, squeeze)


def shift_flow(shift: torch.Tensor, height: int, width: int, scale: float, like):
    """Constant flow (B, 2, H, W) of integer shifts (B, 2) multiplied by ``scale``."""
    flow = shift.to(like.dtype).view(-1, 2, 1, 1) * scale
    return flow.expand(-1, -1, height, width)


def apply_global(
    pyramid: Sequence[torch.Tensor], shift: torch.Tensor
) -> List[torch.Tensor]:
    """Shift every pyramid level by the quarter-resolution shift, rescaled.

    Level 0 (full) moves by 4x the shift, level 1 by 2x and level 2 by 1x.
    """
    shift = shift.view(-1, 2)
    out = []
    for level, feat in enumerate(pyramid):
        scale = 2 ** (N_LEVELS - 1 - level)
        flow = shift_flow(shift, *feat.shape[-2:], scale, feat)
        out.append(warp(feat, flow)[0])
    return out


def deform_sample(
    tgt: torch.Tensor,
    offsets: torch.Tensor,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """3x3 deformable convolution with replicate border.

    Tap ``k`` (row-major over (ky, kx) in {-1, 0, 1}^2) reads ``tgt`` bilinearly
    at ``p + (kx, ky) + (offsets[2k], offsets[2k+1])``. Sampling positions are
    clamped to the frame before :func:`torchvision.ops.deform_conv2d` runs, so
    with zero offsets this is an ordinary 3x3 convolution of the
    replicate-padded input.

    Args:
        tgt: Features (B, C, H, W).
        offsets: (B, 18, H, W), x then y offset per tap.
        weight: Kernel (C_out, C, 3, 3).
        bias: Optional (C_out,).
    """
    b, c, height, width = tgt.shape
    k = len(KERNEL_TAPS)
    if offsets.shape != (b, 2 * k, height, width):
        raise ShapeError(
            f"Offsets {tuple(offsets.shape)} do not match features {tuple(tgt.shape)}."
        )
    if weight.shape[1:] != (c, 3, 3):
        raise ShapeError(f"Kernel {tuple(weight.shape)} does not match {c} channels.")
    options = dict(dtype=offsets.dtype, device=offsets.device)
    ys = torch.arange(height, **options).view(1, 1, height, 1)
    xs = torch.arange(width, **options).view(1, 1, 1, width)
    ky = torch.tensor([t[0] for t in KERNEL_TAPS], **options).view(1, k, 1, 1)
    kx = torch.tensor([t[1] for t in KERNEL_TAPS], **options).view(1, k, 1, 1)
    px = (xs + kx + offsets[:, 0::2]).clamp(0, width - 1)
    py = (ys + ky + offsets[:, 1::2]).clamp(0, height - 1)
    # torchvision takes (dy, dx) per tap relative to p + (kx, ky)
    relative = torch.stack([py - ys - ky, px - xs - kx], dim=2).flatten(1, 2)
    return deform_conv2d(tgt, relative, weight, bias, padding=1)


def upsample_offsets(offsets: torch.Tensor) -> torch.Tensor:
    """Bilinear x2 upsampling of an offset field, values doubled."""
    up = F.interpolate(offsets, scale_factor=2, mode="bilinear", align_corners=False)
    return 2 * up


class FeaturePyramid(nn.Module):
    """Learned three-level pyramid (1, 1/2, 1/4) built with strided convolutions."""

    def __init__(self, channels: int):
        """Create the downsampling convolutions."""
        super().__init__()
        self.down = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, stride=2, padding=1)
            for _ in range(N_LEVELS - 1)
        )

    def forward(self, feat: torch.Tensor) -> List[torch.Tensor]:
        """Levels from full to quarter resolution."""
        if feat.shape[-2] % 4 or feat.shape[-1] % 4:
            raise ShapeError(
                f"Feature size {tuple(feat.shape[-2:])} must be divisible by 4."
            )
        levels = [feat]
        for conv in self.down:
            levels.append(F.leaky_relu(conv(levels[-1]), NEGATIVE_SLOPE))
        return levels


class OffsetEstimator(nn.Module):
    """Offsets g1(LReLU([g2([ref, tgt]), 2 * up(coarser offsets)])) for one level.

    ``g1`` is zero-initialized so that alignment starts as the identity. The
    coarsest level has no coarser offsets to concatenate.
    """

    def __init__(self, channels: int, coarsest: bool = False):
        """Create g2 and the zero-initialized g1."""
        super().__init__()
        n_offsets = 2 * len(KERNEL_TAPS)
        self.channels = channels
        self.coarsest = coarsest
        self.g2 = nn.Conv2d(2 * channels, channels, 3, padding=1)
        g1_in = channels + (0 if coarsest else n_offsets)
        self.g1 = nn.Conv2d(g1_in, n_offsets, 3, padding=1)
        nn.init.zeros_(self.g1.weight)
        nn.init.zeros_(self.g1.bias)

    def forward(
        self,
        ref: torch.Tensor,
        tgt: torch.Tensor,
        coarser: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Offsets (B, 18, H, W) at this level."""
        if ref.shape[1] != self.channels or tgt.shape[1] != self.channels:
            raise ShapeError(
                f"Expected {self.channels}-channel features, got {ref.shape[1]} and "
                f"{tgt.shape[1]}."
            )
        x = self.g2(torch.cat([ref, tgt], dim=1))
        if not self.coarsest:
            if coarser is None:
                raise ShapeError("Finer levels need the coarser level offsets.")
            x = torch.cat([x, upsample_offsets(coarser)], dim=1)
        return self.g1(F.leaky_relu(x, NEGATIVE_SLOPE))


class DeformAlign(nn.Module):
    """Deformable sampling followed by Conv+LReLU fusion with the coarser result."""

    def __init__(self, channels: int, coarsest: bool = False):
        """Create the deformable kernel and the fusion convolution."""
        super().__init__()
        self.coarsest = coarsest
        self.weight = nn.Parameter(torch.empty(channels, channels, 3, 3))
        self.bias = nn.Parameter(torch.zeros(channels))
        nn.init.kaiming_uniform_(self.weight, a=NEGATIVE_SLOPE)
        self.fuse = nn.Conv2d(channels * (1 if coarsest else 2), channels, 3, padding=1)

    def forward(
        self,
        tgt: torch.Tensor,
        offsets: torch.Tensor,
        coarser: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Aligned features at this level."""
        x = deform_sample(tgt, offsets, self.weight, self.bias)
        if not self.coarsest:
            up = F.interpolate(
                coarser, scale_factor=2, mode="bilinear", align_corners=False
            )
            x = torch.cat([x, up], dim=1)
        return F.leaky_relu(self.fuse(x), NEGATIVE_SLOPE)


@dataclass
class AlignResult:
    """Output of :class:`GLAM`."""

    aligned: torch.Tensor
    offsets: List[torch.Tensor]
    shift: torch.Tensor


class GLAM(nn.Module):
    """Global-to-local alignment module."""

    def __init__(self, channels: int = 32, f_max: int = 16):
        """Create the pyramid and per-level offset and alignment layers."""
        super().__init__()
        self.channels = channels
        self.f_max = f_max
        self.pyramid = FeaturePyramid(channels)
        # indexed by level: 0 full, 1 half, 2 quarter resolution
        self.offset_estimators = nn.ModuleList(
            OffsetEstimator(channels, coarsest=level == N_LEVELS - 1)
            for level in range(N_LEVELS)
        )
        self.aligners = nn.ModuleList(
            DeformAlign(channels, coarsest=level == N_LEVELS - 1)
            for level in range(N_LEVELS)
        )

    def global_shift(self, ref: torch.Tensor, tgt: torch.Tensor) -> torch.Tensor:
        """Quarter-resolution global shift (B, 2) aligning ``tgt`` to ``ref``."""
        return global_align(self.pyramid(ref)[-1], self.pyramid(tgt)[-1], self.f_max)

    def align(
        self, ref_pyr: Sequence[torch.Tensor], tgt_pyr: Sequence[torch.Tensor]
    ) -> AlignResult:
        """Align a target pyramid to a reference pyramid."""
        if len(ref_pyr) != N_LEVELS or len(tgt_pyr) != N_LEVELS:
            raise ShapeError(f"Pyramids must have {N_LEVELS} levels.")
        shift = global_align(ref_pyr[-1], tgt_pyr[-1], self.f_max).view(-1, 2)
        tgt_pyr = apply_global(tgt_pyr, shift)
        offsets: List[torch.Tensor] = []
        off, aligned = None, None
        for level in reversed(range(N_LEVELS)):
            off = self.offset_estimators[level](ref_pyr[level], tgt_pyr[level], off)
            aligned = self.aligners[level](tgt_pyr[level], off, aligned)
            offsets.insert(0, off)
        return AlignResult(aligned=aligned, offsets=offsets, shift=shift)

    def forward(self, ref: torch.Tensor, tgt: torch.Tensor) -> AlignResult:
        """Align target features (B, C, H, W) to reference features."""
        return self.align(self.pyramid(ref), self.pyramid(tgt))
