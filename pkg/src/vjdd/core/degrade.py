"""Degradation model: Bayer mosaic, signal-dependent noise and the fixed ISP.

A clean linear frame ``x`` is degraded to ``y = mosaic(x) + n`` with
``n ~ N(0, sigma_s * x + sigma_r**2)``. The ISP maps linear RGB to sRGB for
losses and metrics computed in the display domain.
"""
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from vjdd.core.base import ShapeError, VJDDError, check_even

TILE_POSITIONS = ((0, 0), (0, 1), (1, 0), (1, 1))
WB_GAINS = (1.9, 1.0, 1.7)
CCM = (
    (1.06, -0.27, 0.21),
    (-0.13, 1.15, -0.02),
    (0.04, -0.39, 1.35),
)
SRGB_THRESHOLD = 0.0031308

Sigma = Union[float, torch.Tensor]


class ParamError(VJDDError, ValueError):
    """Exception raised for invalid noise parameters."""


class BayerPattern(str, Enum):
    """Bayer colour filter patterns, named by the 2x2 tile read row by row."""

    RGGB = "RGGB"
    BGGR = "BGGR"
    GRBG = "GRBG"
    GBRG = "GBRG"

    @property
    def channels(self) -> Tuple[int, ...]:
        """RGB channel index sampled at each tile position."""
        return tuple("RGB".index(c) for c in self.value)


@dataclass(frozen=True)
class NoiseParams:
    """Shot (``sigma_s``) and read (``sigma_r``) noise scales."""

    sigma_s: float
    sigma_r: float

    def __post_init__(self):
        """Check that both scales are finite and non-negative."""
        for name in ("sigma_s", "sigma_r"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ParamError(f"{name} must be finite and >= 0, got {value}.")

    @classmethod
    def from_level(cls, level: str) -> "NoiseParams":
        """Get the canonical evaluation setting for the "low" or "high" level."""
        try:
            return NOISE_LEVELS[level.lower()]
        except KeyError:
            raise ParamError(
                f'Unknown noise level "{level}"; expected one of '
                f"{sorted(NOISE_LEVELS)}."
            )

    def as_tuple(self) -> Tuple[float, float]:
        """Return (sigma_s, sigma_r)."""
        return self.sigma_s, self.sigma_r


NOISE_LEVELS = {
    "low": NoiseParams(sigma_s=2.5e-3, sigma_r=1e-2),
    "high": NoiseParams(sigma_s=6.4e-3, sigma_r=2e-2),
}
NOISELESS = NoiseParams(0.0, 0.0)


@dataclass
class RawFrame:
    """Noisy Bayer CFA frame(s), shape (..., H, W), with its noise parameters."""

    cfa: torch.Tensor
    noise_params: NoiseParams
    pattern: BayerPattern = BayerPattern.RGGB

    def __post_init__(self):
        """Check the tiling and finiteness of the CFA."""
        if self.cfa.dim() < 2:
            raise ShapeError("A CFA frame needs at least two dimensions.")
        check_even(*self.cfa.shape[-2:], what="CFA")
        if not torch.isfinite(self.cfa).all():
            raise ShapeError("CFA values must be finite.")
        self.pattern = BayerPattern(self.pattern)


@dataclass
class NoiseMap:
    """Per-pixel noise standard deviation, same shape as the CFA."""

    std: torch.Tensor


def _check_frame(x: torch.Tensor) -> torch.Tensor:
    if x.dim() < 3 or x.shape[-3] != 3:
        raise ShapeError(
            f"Expected frames of shape (..., 3, H, W), got {tuple(x.shape)}."
        )
    check_even(*x.shape[-2:])
    return x


def pack_cfa(cfa: torch.Tensor) -> torch.Tensor:
    """Pack a CFA (..., H, W) into (..., 4, H/2, W/2), one channel per tile slot."""
    if cfa.dim() < 2:
        raise ShapeError("A CFA frame needs at least two dimensions.")
    check_even(*cfa.shape[-2:], what="CFA")
    return F.pixel_unshuffle(cfa.unsqueeze(-3), 2)


def unpack_cfa(packed: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`pack_cfa`."""
    if packed.dim() < 3 or packed.shape[-3] != 4:
        raise ShapeError(
            f"Expected packed CFA of shape (..., 4, h, w), got {tuple(packed.shape)}."
        )
    return F.pixel_shuffle(packed, 2).squeeze(-3)


def mosaic(x: torch.Tensor, pattern: Union[BayerPattern, str] = "RGGB") -> torch.Tensor:
    """Sample frames (..., 3, H, W) through a Bayer filter into a CFA (..., H, W)."""
    _check_frame(x)
    channels = BayerPattern(pattern).channels
    packed = torch.stack(
        [x[..., c, dy::2, dx::2] for c, (dy, dx) in zip(channels, TILE_POSITIONS)],
        dim=-3,
    )
    return unpack_cfa(packed)


def noise_std(signal: torch.Tensor, sigma_s: Sigma, sigma_r: Sigma) -> torch.Tensor:
    """Standard deviation sqrt(sigma_s * max(signal, 0) + sigma_r**2) per element.

    The scales may be floats or tensors broadcastable against ``signal``.
    """
    return torch.sqrt(sigma_s * signal.clamp(min=0) + sigma_r**2)


def add_noise(
    signal: torch.Tensor,
    params: NoiseParams,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Add zero-mean Gaussian noise with variance sigma_s * x + sigma_r**2.

    The output is not clipped. Without noise the input is returned unchanged
    (as a copy).
    """
    if not torch.isfinite(signal).all():
        raise ParamError("The signal must be finite.")
    if params.sigma_s == 0 and params.sigma_r == 0:
        return signal.clone()
    std = noise_std(signal, params.sigma_s, params.sigma_r)
    z = torch.randn(
        signal.shape, generator=generator, dtype=signal.dtype, device=signal.device
    )
    return signal + std * z


def noise_map(y: RawFrame) -> NoiseMap:
    """Noise map of a raw frame, evaluated on the noisy observation."""
    return NoiseMap(std=noise_std(y.cfa, *y.noise_params.as_tuple()))


def degrade_frame(
    x: torch.Tensor,
    params: NoiseParams,
    generator: Optional[torch.Generator] = None,
    pattern: Union[BayerPattern, str] = "RGGB",
) -> RawFrame:
    """Degrade clean linear frames (..., 3, H, W) into a noisy raw frame."""
    cfa = add_noise(mosaic(x, pattern), params, generator)
    return RawFrame(cfa=cfa, noise_params=params, pattern=BayerPattern(pattern))


def srgb_gamma(x: torch.Tensor) -> torch.Tensor:
    """Standard sRGB transfer curve for values in [0, 1]."""
    # clamp keeps the pow branch finite where the linear branch is selected
    curve = 1.055 * x.clamp(min=SRGB_THRESHOLD) ** (1 / 2.4) - 0.055
    return torch.where(x <= SRGB_THRESHOLD, 12.92 * x, curve)


def isp(
    x: torch.Tensor,
    wb_gains: Optional[Sequence[float]] = None,
    ccm: Optional[Sequence[Sequence[float]]] = None,
) -> torch.Tensor:
    """Fixed ISP mapping linear RGB (..., 3, H, W) to sRGB.

    Clip, white balance, clip, colour correction, clip, sRGB curve. The
    default gains and matrix can be overridden.
    """
    if x.dim() < 3 or x.shape[-3] != 3:
        raise ShapeError(
            f"Expected frames of shape (..., 3, H, W), got {tuple(x.shape)}."
        )
    wb_gains = WB_GAINS if wb_gains is None else wb_gains
    ccm = CCM if ccm is None else ccm
    gains = torch.as_tensor(wb_gains, dtype=x.dtype, device=x.device)
    matrix = torch.as_tensor(ccm, dtype=x.dtype, device=x.device)
    out = x.clamp(0, 1) * gains.view(3, 1, 1)
    out = out.clamp(0, 1)
    out = torch.einsum("ij,...jhw->...ihw", matrix, out).clamp(0, 1)
    return srgb_gamma(out)
