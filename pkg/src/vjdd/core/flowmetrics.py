"""Optical flow estimation, occlusion maps and restoration metrics.

Temporal metrics compare a restored pair of frames with the ground-truth
pair along a flow estimated by a classical coarse-to-fine Horn-Schunck
estimator:

* WE: masked mean absolute difference between the warped next restored frame
  and the current one.
* tOF: mean absolute difference between flows estimated on the restored and
  on the ground-truth pair.
* RWE: WE with the ground truth's own warped difference subtracted.
"""
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from vjdd.core.base import ShapeError, VJDDError, VJDDWarning
from vjdd.core.degrade import isp
from vjdd.core.motionsynth import warp

logger = logging.getLogger(__name__)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
HS_AVERAGE_KERNEL = (
    (1 / 12, 1 / 6, 1 / 12),
    (1 / 6, 0.0, 1 / 6),
    (1 / 12, 1 / 6, 1 / 12),
)
OCCLUSION_THRESHOLD = 1.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
HEATMAP_GAIN = 10.0

FlowEstimator = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class MetricError(VJDDError):
    """Exception raised when a metric is undefined for its inputs."""


class FlowPyramidWarning(VJDDWarning):
    """Warning raised when frames are too small for a three-level flow pyramid."""


def luma(x: torch.Tensor) -> torch.Tensor:
    """Grayscale (..., 1, H, W) of RGB frames (..., 3, H, W)."""
    weights = torch.tensor(LUMA_WEIGHTS, dtype=x.dtype, device=x.device)
    return torch.einsum("c,...chw->...hw", weights, x).unsqueeze(-3)


def _replicate_conv(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    pad = kernel.shape[-1] // 2
    return F.conv2d(F.pad(x, (pad, pad, pad, pad), mode="replicate"), kernel)


@dataclass
class HornSchunckFlow:
    """Coarse-to-fine Horn-Schunck flow estimator.

    Each pyramid level re-warps the second frame with the current flow a few
    times and runs a fixed number of Horn-Schunck smoothness iterations on
    the linearized brightness constancy. All computations are float64 so that
    results are reproducible.

    Args:
        alpha: Smoothness weight (in intensity units).
        iterations: Horn-Schunck iterations per warp.
        warps: Re-linearizations per pyramid level.
        max_levels: Maximum number of pyramid levels.
        min_size: Smallest allowed pyramid level side.
    """

    alpha: float = 0.02
    iterations: int = 150
    warps: int = 3
    max_levels: int = 4
    min_size: int = 8

    def levels(self, height: int, width: int) -> int:
        """Number of pyramid levels used for a frame size."""
        if min(height, width) < self.min_size:
            raise ShapeError(
                f"Frames of {height}x{width} are smaller than the flow pyramid "
                f"floor of {self.min_size}x{self.min_size}."
            )
        count = 1
        while count < self.max_levels and min(height, width) >> count >= self.min_size:
            count += 1
        return count

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Estimate the flow f with warp(b, f) ~ a for frames (..., 3, H, W)."""
        if a.shape != b.shape:
            raise ShapeError(
                f"Cannot estimate flow between shapes {tuple(a.shape)} and "
                f"{tuple(b.shape)}."
            )
        lead = a.shape[:-3]
        height, width = a.shape[-2:]
        n_levels = self.levels(height, width)
        if n_levels < 3:
            warnings.warn(
                f"Only {n_levels} flow pyramid levels fit a {height}x{width} frame.",
                FlowPyramidWarning,
            )
        ga = luma(a.detach().reshape(-1, *a.shape[-3:]).to(torch.float64))
        gb = luma(b.detach().reshape(-1, *b.shape[-3:]).to(torch.float64))

        pyramid = [(ga, gb)]
        for _ in range(n_levels - 1):
            pa, pb = pyramid[-1]
            size = (pa.shape[-2] // 2, pa.shape[-1] // 2)
            pyramid.append(
                (
                    F.interpolate(pa, size=size, mode="area"),
                    F.interpolate(pb, size=size, mode="area"),
                )
            )

        flow = torch.zeros(ga.shape[0], 2, *pyramid[-1][0].shape[-2:], dtype=ga.dtype)
        for la, lb in reversed(pyramid):
            if flow.shape[-2:] != la.shape[-2:]:
                sy = la.shape[-2] / flow.shape[-2]
                sx = la.shape[-1] / flow.shape[-1]
                flow = F.interpolate(
                    flow, size=la.shape[-2:], mode="bilinear", align_corners=False
                )
                flow = flow * torch.tensor([sx, sy], dtype=flow.dtype).view(1, 2, 1, 1)
            for _ in range(self.warps):
                flow = self._refine(la, lb, flow)
        return flow.to(a.dtype).reshape(*lead, 2, height, width)

    def _refine(self, a: torch.Tensor, b: torch.Tensor, flow: torch.Tensor):
        b_w = warp(b, flow)[0]
        mean = 0.5 * (a + b_w)
        dx = torch.tensor([[[[-0.5, 0.0, 0.5]]]], dtype=a.dtype)
        ix = F.conv2d(F.pad(mean, (1, 1, 0, 0), mode="replicate"), dx)
        iy = F.conv2d(F.pad(mean, (0, 0, 1, 1), mode="replicate"), dx.transpose(-1, -2))
        it = b_w - a
        avg = torch.tensor(HS_AVERAGE_KERNEL, dtype=a.dtype).view(1, 1, 3, 3)
        u0, v0 = flow[:, :1], flow[:, 1:]
        u, v = u0, v0
        denom = self.alpha**2 + ix**2 + iy**2
        for _ in range(self.iterations):
            u_bar = _replicate_conv(u, avg)
            v_bar = _replicate_conv(v, avg)
            residual = (ix * (u_bar - u0) + iy * (v_bar - v0) + it) / denom
            u = u_bar - ix * residual
            v = v_bar - iy * residual
        return torch.cat([u, v], dim=1)


_default_estimator = HornSchunckFlow()


def estimate_flow(
    a: torch.Tensor, b: torch.Tensor, estimator: Optional[FlowEstimator] = None
) -> torch.Tensor:
    """Estimate the flow f such that warp(b, f) approximates a."""
    return (estimator or _default_estimator)(a, b)


def occlusion_map(
    f_fwd: torch.Tensor, f_bwd: torch.Tensor, threshold: float = OCCLUSION_THRESHOLD
) -> torch.Tensor:
    """Forward-backward consistency mask (..., 1, H, W); 1 where consistent."""
    if f_fwd.shape != f_bwd.shape:
        raise ShapeError(
            f"Flow shapes {tuple(f_fwd.shape)} and {tuple(f_bwd.shape)} differ."
        )
    diff = f_fwd + warp(f_bwd, f_fwd)[0]
    return (diff.norm(dim=-3, keepdim=True) <= threshold).to(f_fwd.dtype)


@dataclass
class PairMotion:
    """Flow between a pair of frames and the mask of pixels it is trusted on."""

    flow: torch.Tensor
    mask: torch.Tensor


def pair_motion(
    x_t: torch.Tensor,
    x_t1: torch.Tensor,
    estimator: Optional[FlowEstimator] = None,
    threshold: float = OCCLUSION_THRESHOLD,
) -> PairMotion:
    """Flow from frame t to frame t+1 and its occlusion-and-validity mask."""
    f_fwd = estimate_flow(x_t, x_t1, estimator)
    f_bwd = estimate_flow(x_t1, x_t, estimator)
    valid = warp(x_t1, f_fwd)[1]
    return PairMotion(flow=f_fwd, mask=occlusion_map(f_fwd, f_bwd, threshold) * valid)


def _motion(xh_t, xh_t1, x_t, x_t1, flow_source, estimator, motion):
    if motion is not None:
        return motion
    if flow_source == "gt":
        if x_t is None or x_t1 is None:
            raise MetricError("Ground-truth frames are needed for ground-truth flow.")
        return pair_motion(x_t, x_t1, estimator)
    if flow_source == "restored":
        return pair_motion(xh_t, xh_t1, estimator)
    raise ValueError(f'Unknown flow source "{flow_source}".')


def _masked_mean(err: torch.Tensor, mask: torch.Tensor) -> float:
    count = mask.sum() * err.shape[-3]
    if count == 0:
        raise MetricError("The occlusion mask is empty; the metric is undefined.")
    return float((mask * err).sum() / count)


def warping_error_map(
    xh_t: torch.Tensor, xh_t1: torch.Tensor, motion: PairMotion
) -> torch.Tensor:
    """Per-pixel masked warping error (..., 1, H, W) averaged over channels."""
    err = (warp(xh_t1, motion.flow)[0] - xh_t).abs()
    return motion.mask * err.mean(dim=-3, keepdim=True)


def warping_error(
    xh_t: torch.Tensor,
    xh_t1: torch.Tensor,
    x_t: Optional[torch.Tensor] = None,
    x_t1: Optional[torch.Tensor] = None,
    flow_source: str = "gt",
    estimator: Optional[FlowEstimator] = None,
    motion: Optional[PairMotion] = None,
) -> float:
    """Warping error between consecutive restored frames.

    The flow and mask come from the ground-truth pair by default, from the
    restored pair with ``flow_source="restored"``, or from ``motion``.
    """
    motion = _motion(xh_t, xh_t1, x_t, x_t1, flow_source, estimator, motion)
    err = (warp(xh_t1, motion.flow)[0] - xh_t).abs()
    return _masked_mean(err, motion.mask)


def relative_warping_error_map(
    xh_t: torch.Tensor,
    xh_t1: torch.Tensor,
    x_t: torch.Tensor,
    x_t1: torch.Tensor,
    motion: PairMotion,
) -> torch.Tensor:
    """Per-pixel masked RWE (..., 1, H, W) averaged over channels."""
    err = _relative_difference(xh_t, xh_t1, x_t, x_t1, motion.flow).abs()
    return motion.mask * err.mean(dim=-3, keepdim=True)


def _relative_difference(xh_t, xh_t1, x_t, x_t1, flow):
    restored = warp(xh_t1, flow)[0] - xh_t
    reference = warp(x_t1, flow)[0] - x_t
    return restored - reference


def rwe(
    xh_t: torch.Tensor,
    xh_t1: torch.Tensor,
    x_t: torch.Tensor,
    x_t1: torch.Tensor,
    flow_source: str = "gt",
    estimator: Optional[FlowEstimator] = None,
    motion: Optional[PairMotion] = None,
) -> float:
    """Relative warping error: WE minus the ground truth's own warped change."""
    for t in (xh_t1, x_t, x_t1):
        if t.shape != xh_t.shape:
            raise ShapeError("All RWE frames must have the same shape.")
    motion = _motion(xh_t, xh_t1, x_t, x_t1, flow_source, estimator, motion)
    err = _relative_difference(xh_t, xh_t1, x_t, x_t1, motion.flow).abs()
    return _masked_mean(err, motion.mask)


def tof(
    xh_t: torch.Tensor,
    xh_t1: torch.Tensor,
    x_t: torch.Tensor,
    x_t1: torch.Tensor,
    estimator: Optional[FlowEstimator] = None,
    gt_flow: Optional[torch.Tensor] = None,
) -> float:
    """Mean absolute difference of flows estimated on restored and GT pairs."""
    if xh_t.shape != x_t.shape or xh_t1.shape != x_t1.shape:
        raise ShapeError("Restored and ground-truth frames must have the same shape.")
    restored = estimate_flow(xh_t, xh_t1, estimator)
    reference = estimate_flow(x_t, x_t1, estimator) if gt_flow is None else gt_flow
    return float((restored - reference).abs().mean())


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for signals in [0, 1]; inf if equal."""
    if a.shape != b.shape:
        raise ShapeError(f"Shapes {tuple(a.shape)} and {tuple(b.shape)} differ.")
    x = a.detach().to(torch.float64).clamp(0, 1)
    y = b.detach().to(torch.float64).clamp(0, 1)
    mse = float(((x - y) ** 2).mean())
    if mse == 0:
        return math.inf
    return 10 * math.log10(1 / mse)


def _gaussian_window(dtype) -> torch.Tensor:
    coords = torch.arange(SSIM_WINDOW, dtype=dtype) - SSIM_WINDOW // 2
    g = torch.exp(-(coords**2) / (2 * SSIM_SIGMA**2))
    g = g / g.sum()
    return torch.outer(g, g).view(1, 1, SSIM_WINDOW, SSIM_WINDOW)


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Single-scale SSIM of frames (..., C, H, W) averaged over channels.

    Uses an 11x11 Gaussian window (sigma 1.5) in valid mode.
    """
    if a.shape != b.shape:
        raise ShapeError(f"Shapes {tuple(a.shape)} and {tuple(b.shape)} differ.")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs frames of at least {SSIM_WINDOW} pixels.")
    x = a.detach().to(torch.float64).clamp(0, 1).reshape(-1, 1, *a.shape[-2:])
    y = b.detach().to(torch.float64).clamp(0, 1).reshape(-1, 1, *b.shape[-2:])
    window = _gaussian_window(torch.float64)
    mu_x, mu_y = F.conv2d(x, window), F.conv2d(y, window)
    sxx = F.conv2d(x * x, window) - mu_x * mu_x
    syy = F.conv2d(y * y, window) - mu_y * mu_y
    sxy = F.conv2d(x * y, window) - mu_x * mu_y
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float((num / den).mean())


def error_heatmap(err: torch.Tensor, gain: float = HEATMAP_GAIN) -> np.ndarray:
    """Render an error map (H, W) as a color image, amplified by ``gain``."""
    values = (err.detach().squeeze().cpu().numpy() * gain).clip(0, 1)
    return cv2.applyColorMap((values * 255).round().astype(np.uint8), cv2.COLORMAP_JET)


def _mean(values: List[Optional[float]]) -> Optional[float]:
    finite = [v for v in values if v is not None]
    if not finite:
        return None
    return float(np.mean(finite))


@dataclass
class MetricReport:
    """Per-clip restoration metrics.

    PSNR and SSIM are per frame, WE/tOF/RWE per consecutive frame pair. Pairs
    whose occlusion mask is empty are stored as None and left out of means.
    """

    clip_id: str = "clip"
    psnr: List[float] = field(default_factory=list)
    ssim: List[float] = field(default_factory=list)
    we: List[Optional[float]] = field(default_factory=list)
    tof: List[Optional[float]] = field(default_factory=list)
    rwe: List[Optional[float]] = field(default_factory=list)

    def means(self) -> Dict[str, Optional[float]]:
        """Clip means of every metric."""
        return {
            "psnr": _mean_psnr(self.psnr),
            "ssim": _mean(self.ssim),
            "we": _mean(self.we),
            "tof": _mean(self.tof),
            "rwe": _mean(self.rwe),
        }

    def as_dict(self):
        """Return a dict representation of the report."""
        return {
            "@module": self.__class__.__module__,
            "@class": self.__class__.__name__,
            "clip_id": self.clip_id,
            "psnr": self.psnr,
            "ssim": self.ssim,
            "we": self.we,
            "tof": self.tof,
            "rwe": self.rwe,
            "means": self.means(),
        }

    @classmethod
    def from_dict(cls, d):
        """Construct the report from its dict representation."""
        return cls(**{k: d[k] for k in ("clip_id", "psnr", "ssim", "we", "tof", "rwe")})


def _mean_psnr(values: List[float]) -> Optional[float]:
    if not values:
        return None
    if any(math.isinf(v) for v in values):
        return math.inf
    return float(np.mean(values))


def compute_clip_metrics(
    restored: torch.Tensor,
    gt: torch.Tensor,
    clip_id: str = "clip",
    domain: str = "srgb",
    flow_source: str = "gt",
    estimator: Optional[FlowEstimator] = None,
    heatmaps: bool = False,
) -> Tuple[MetricReport, Dict[str, List[np.ndarray]]]:
    """Compute every metric for a restored clip (N, 3, H, W) against its GT.

    Args:
        restored: Restored linear frames.
        gt: Ground-truth linear frames.
        clip_id: Identifier stored in the report.
        domain: "srgb" to measure after the ISP, "linear" to measure directly.
        flow_source: "gt" or "restored" pair for WE/RWE flows.
        estimator: Flow estimator, Horn-Schunck by default.
        heatmaps: Also render WE and RWE error maps.

    Returns:
        The report and a dict with "we" and "rwe" heatmap lists (empty unless
        requested).
    """
    if restored.shape != gt.shape:
        raise ShapeError(
            f"Restored clip {tuple(restored.shape)} and ground truth "
            f"{tuple(gt.shape)} differ."
        )
    if domain == "srgb":
        restored, gt = isp(restored.detach()), isp(gt.detach())
    elif domain != "linear":
        raise ValueError(f'Unknown metric domain "{domain}".')
    restored = restored.detach().clamp(0, 1)
    gt = gt.detach().clamp(0, 1)

    report = MetricReport(clip_id=clip_id)
    maps: Dict[str, List[np.ndarray]] = {"we": [], "rwe": []}
    for t in range(gt.shape[0]):
        report.psnr.append(psnr(restored[t], gt[t]))
        report.ssim.append(ssim(restored[t], gt[t]))
    for t in range(gt.shape[0] - 1):
        xh_t, xh_t1, x_t, x_t1 = restored[t], restored[t + 1], gt[t], gt[t + 1]
        motion = _motion(xh_t, xh_t1, x_t, x_t1, flow_source, estimator, None)
        gt_flow = motion.flow if flow_source == "gt" else None
        report.tof.append(tof(xh_t, xh_t1, x_t, x_t1, estimator, gt_flow=gt_flow))
        try:
            report.we.append(warping_error(xh_t, xh_t1, motion=motion))
            report.rwe.append(rwe(xh_t, xh_t1, x_t, x_t1, motion=motion))
        except MetricError:
            logger.warning("Empty occlusion mask for pair %d of %s", t, clip_id)
            report.we.append(None)
            report.rwe.append(None)
        if heatmaps:
            maps["we"].append(error_heatmap(warping_error_map(xh_t, xh_t1, motion)))
            rwe_map = relative_warping_error_map(xh_t, xh_t1, x_t, x_t1, motion)
            maps["rwe"].append(error_heatmap(rwe_map))
    return report, maps
