"""Warping, flow composition and synthetic-motion clip generation.

Flows are (..., 2, H, W) tensors in pixels, channel 0 horizontal (u) and
channel 1 vertical (v). ``warp(I, f)`` samples ``I`` at ``(x + u, y + v)``, so
``f`` maps the grid of the warped frame into the source frame.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from monty.serialization import dumpfn, loadfn

from vjdd.core.base import ShapeError, as_batch, check_even, unbatch
from vjdd.core.dataio import TENSOR_EXT, load_tensor, save_tensor
from vjdd.core.degrade import BayerPattern, NoiseParams, degrade_frame, noise_std

logger = logging.getLogger(__name__)

MANIFEST_FILENAME = "manifest.yaml"
_CLIP_TENSORS = ("clean", "raw", "step_flows", "composed", "masks")


def bilinear_sample(
    img: torch.Tensor, px: torch.Tensor, py: torch.Tensor
) -> torch.Tensor:
    """Sample ``img`` (B, C, H, W) at pixel coordinates ``px``, ``py`` (B, h, w).

    Coordinates are clamped to the frame (replicate border). Integer
    coordinates return the stored values exactly.
    """
    b, c, height, width = img.shape
    x = px.clamp(0, width - 1)
    y = py.clamp(0, height - 1)
    x0 = x.detach().floor()
    y0 = y.detach().floor()
    wx = (x - x0).unsqueeze(1)
    wy = (y - y0).unsqueeze(1)
    x0i = x0.long()
    y0i = y0.long()
    x1i = (x0i + 1).clamp(max=width - 1)
    y1i = (y0i + 1).clamp(max=height - 1)

    flat = img.reshape(b, c, height * width)

    def gather(yi, xi):
        idx = (yi * width + xi).reshape(b, 1, -1).expand(-1, c, -1)
        return flat.gather(2, idx).reshape(b, c, *px.shape[1:])

    return (
        (1 - wx) * (1 - wy) * gather(y0i, x0i)
        + wx * (1 - wy) * gather(y0i, x1i)
        + (1 - wx) * wy * gather(y1i, x0i)
        + wx * wy * gather(y1i, x1i)
    )


def _grid(height: int, width: int, like: torch.Tensor) -> Tuple[torch.Tensor, ...]:
    ys = torch.arange(height, dtype=like.dtype, device=like.device).view(1, height, 1)
    xs = torch.arange(width, dtype=like.dtype, device=like.device).view(1, 1, width)
    return xs, ys


def _check_flow(flow: torch.Tensor, height: int, width: int):
    if flow.shape[-3] != 2 or tuple(flow.shape[-2:]) != (height, width):
        raise ShapeError(
            f"Flow of shape {tuple(flow.shape)} does not match a "
            f"{height}x{width} frame."
        )


def warp(img: torch.Tensor, flow: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Backward-warp ``img`` (..., C, H, W) along ``flow`` (..., 2, H, W).

    Returns:
        The warped image and a (..., 1, H, W) validity mask that is 0 wherever
        the sample point falls outside the source frame.
    """
    img_b, squeeze = as_batch(img, 4)
    flow_b, _ = as_batch(flow, 4)
    b, _, height, width = img_b.shape
    _check_flow(flow_b, height, width)
    if flow_b.shape[0] != b:
        if flow_b.shape[0] != 1:
            raise ShapeError(
                f"Flow batch {flow_b.shape[0]} does not match image batch {b}."
            )
        flow_b = flow_b.expand(b, -1, -1, -1)
    if not torch.any(flow_b != 0):
        ones = torch.ones(b, 1, height, width, dtype=img_b.dtype, device=img_b.device)
        return unbatch(img_b.clone(), squeeze), unbatch(ones, squeeze)

    xs, ys = _grid(height, width, flow_b)
    px = xs + flow_b[:, 0]
    py = ys + flow_b[:, 1]
    out = bilinear_sample(img_b, px, py)
    valid = (px >= 0) & (px <= width - 1) & (py >= 0) & (py <= height - 1)
    mask = valid.unsqueeze(1).to(img_b.dtype)
    return unbatch(out, squeeze), unbatch(mask, squeeze)


def _is_constant(flow: torch.Tensor) -> torch.Tensor:
    return (flow == flow[..., :1, :1]).flatten(1).all(dim=1)


def compose_flows(f_0t: torch.Tensor, f_t_t1: torch.Tensor) -> torch.Tensor:
    """Compose ``f_0t`` followed by ``f_t_t1`` into ``f_0(t+1)``.

    ``f(p) = f_t_t1(p) + f_0t(p + f_t_t1(p))`` with bilinear lookup, so that
    one warp along the result matches two successive warps. Spatially
    constant flows add exactly.
    """
    if f_0t.shape != f_t_t1.shape:
        raise ShapeError(
            f"Cannot compose flows of shapes {tuple(f_0t.shape)} and "
            f"{tuple(f_t_t1.shape)}."
        )
    a, squeeze = as_batch(f_0t, 4)
    b, _ = as_batch(f_t_t1, 4)
    dense = b + warp(a, b)[0]
    constant = (_is_constant(a) & _is_constant(b)).view(-1, 1, 1, 1)
    return unbatch(torch.where(constant, a + b, dense), squeeze)


def gap_flows(step_flows: torch.Tensor, gap: int) -> torch.Tensor:
    """Compose consecutive step flows (..., N-1, 2, H, W) into f_{t -> t+gap}.

    Returns:
        Tensor (..., N-gap, 2, H, W). ``gap == 1`` returns the steps unchanged.
    """
    n_steps = step_flows.shape[-4]
    if gap < 1 or gap > n_steps:
        raise ShapeError(f"Gap {gap} is not available for {n_steps} step flows.")
    count = n_steps - gap + 1
    lead = step_flows.shape[:-4]
    spatial = step_flows.shape[-3:]

    def window(k):
        return step_flows[..., k : k + count, :, :, :].reshape(-1, *spatial)

    out = window(0)
    for k in range(1, gap):
        out = compose_flows(out, window(k))
    return out.reshape(*lead, count, *spatial)


def affine_flow(
    height: int,
    width: int,
    translation: Tuple[float, float] = (0.0, 0.0),
    rotation: float = 0.0,
    scale: float = 1.0,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Dense (2, H, W) flow of a similarity transform about the frame center.

    ``f(p) = (s * R(rotation) - I)(p - c) + t``, rotation in degrees.
    """
    theta = math.radians(rotation)
    cos, sin = math.cos(theta), math.sin(theta)
    a11, a12 = scale * cos - 1.0, -scale * sin
    a21, a22 = scale * sin, scale * cos - 1.0
    ys = torch.arange(height, dtype=torch.float64).view(height, 1) - (height - 1) / 2
    xs = torch.arange(width, dtype=torch.float64).view(1, width) - (width - 1) / 2
    u = a11 * xs + a12 * ys + translation[0]
    v = a21 * xs + a22 * ys + translation[1]
    return torch.stack([u, v]).to(dtype)


@dataclass
class MotionParams:
    """Bounds of the random per-step similarity motion."""

    max_translation: float = 8.0
    max_rotation: float = 2.0
    scale_min: float = 0.98
    scale_max: float = 1.02

    @classmethod
    def from_config(cls, config) -> "MotionParams":
        """Build from a :class:`~vjdd.core.config.MotionConfig`."""
        return cls(
            max_translation=config.max_translation,
            max_rotation=config.max_rotation,
            scale_min=config.scale_min,
            scale_max=config.scale_max,
        )

    @classmethod
    def still(cls) -> "MotionParams":
        """Parameters producing zero motion."""
        return cls(0.0, 0.0, 1.0, 1.0)


def sample_affine(
    generator: Optional[torch.Generator], params: MotionParams
) -> Dict[str, Any]:
    """Draw one similarity transform uniformly within ``params``."""
    r = torch.rand(4, generator=generator, dtype=torch.float64).tolist()
    return {
        "translation": (
            (2 * r[0] - 1) * params.max_translation,
            (2 * r[1] - 1) * params.max_translation,
        ),
        "rotation": (2 * r[2] - 1) * params.max_rotation,
        "scale": params.scale_min + r[3] * (params.scale_max - params.scale_min),
    }


def sample_step_flow(
    height: int,
    width: int,
    generator: Optional[torch.Generator] = None,
    params: Optional[MotionParams] = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Random dense step flow realized from a random similarity transform."""
    motion = sample_affine(generator, params or MotionParams())
    return affine_flow(height, width, dtype=dtype, **motion)


def random_texture(
    height: int,
    width: int,
    generator: Optional[torch.Generator] = None,
    min_wavelength: float = 12.0,
    rectangles: int = 4,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Procedural clean linear frame (3, H, W) with values in [0.05, 0.95].

    Oriented sinusoids plus smoothed noise plus a few soft-edged rectangles.
    """

    def rand(*shape):
        return torch.rand(*shape, generator=generator, dtype=torch.float64)

    ys = torch.arange(height, dtype=torch.float64).view(height, 1)
    xs = torch.arange(width, dtype=torch.float64).view(1, width)
    img = torch.zeros(3, height, width, dtype=torch.float64)
    base = 0.3 + 0.4 * rand(3, 1, 1)
    for _ in range(3):
        angle = math.pi * rand(1).item()
        wavelength = min_wavelength * (1 + 3 * rand(1).item())
        phase = 2 * math.pi * rand(1).item()
        proj = math.cos(angle) * xs + math.sin(angle) * ys
        wave = torch.sin(2 * math.pi * proj / wavelength + phase)
        img = img + 0.08 * (0.5 + rand(3, 1, 1)) * wave

    cell = max(int(min_wavelength // 2), 1)
    coarse = rand(1, 3, height // cell + 2, width // cell + 2) - 0.5
    smooth = F.interpolate(coarse, scale_factor=cell, mode="bicubic")
    img = img + 0.15 * smooth[0, :, :height, :width]

    if rectangles:
        rects = torch.zeros(1, 3, height, width, dtype=torch.float64)
        for _ in range(rectangles):
            r = rand(4).tolist()
            y0, x0 = int(r[0] * height), int(r[1] * width)
            h, w = int(height * (0.1 + 0.3 * r[2])), int(width * (0.1 + 0.3 * r[3]))
            rects[..., y0 : y0 + h, x0 : x0 + w] += 0.2 * (rand(3, 1, 1) - 0.5)
        # soften edges so that bilinear resampling stays accurate
        for _ in range(2):
            rects = F.avg_pool2d(F.pad(rects, (1, 1, 1, 1), mode="replicate"), 3, 1)
        img = img + rects[0]
    return (base + img).clamp(0.05, 0.95).to(dtype)


@dataclass
class SyntheticClip:
    """Clip made by warping one clean frame along random motion, then degrading.

    Attributes:
        clean: Warped clean frames x_t = warp(x, f_{0->t}), (N, 3, H, W).
        raw: Noisy CFA frames, (N, H, W).
        step_flows: f_{t->t+1}, (N-1, 2, H, W).
        composed: f_{0->t}, (N, 2, H, W); the first is zero.
        masks: (N, 1, H, W), 1 where x_t shows genuine content of x.
        noise_params: Noise of the raw frames.
        pattern: Bayer pattern of the raw frames.
        seed: Seed the clip was generated from, if any.
        motion: Per-step similarity parameters.
    """

    clean: torch.Tensor
    raw: torch.Tensor
    step_flows: torch.Tensor
    composed: torch.Tensor
    masks: torch.Tensor
    noise_params: NoiseParams
    pattern: BayerPattern = BayerPattern.RGGB
    seed: Optional[int] = None
    motion: List[Dict[str, Any]] = field(default_factory=list)

    def __len__(self):
        """Return the number of frames."""
        return self.clean.shape[0]

    @property
    def noise_maps(self) -> torch.Tensor:
        """Per-pixel noise standard deviation of the raw frames, (N, H, W)."""
        return noise_std(self.raw, *self.noise_params.as_tuple())


def _center_crop(t: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    height, width = t.shape[-2:]
    top = (height - size[0]) // 2
    left = (width - size[1]) // 2
    return t[..., top : top + size[0], left : left + size[1]]


def synth_clip(
    x: torch.Tensor,
    n_frames: int,
    params: NoiseParams,
    generator: Optional[torch.Generator] = None,
    motion: Optional[MotionParams] = None,
    out_size: Optional[Union[int, Tuple[int, int]]] = None,
    pattern: Union[BayerPattern, str] = "RGGB",
    noise_generator: Optional[torch.Generator] = None,
    seed: Optional[int] = None,
) -> SyntheticClip:
    """Build a synthetic clip from one clean frame ``x`` (3, H, W).

    Motion is generated on the full frame; with ``out_size`` every stored
    tensor is then center-cropped so that accumulated motion still shows
    genuine content. When ``seed`` is given and no generators are, the flow
    and noise streams are seeded from it.
    """
    if n_frames < 2:
        raise ShapeError(f"A synthetic clip needs at least 2 frames, got {n_frames}.")
    if x.dim() != 3 or x.shape[0] != 3:
        raise ShapeError(f"Expected a (3, H, W) frame, got {tuple(x.shape)}.")
    height, width = x.shape[-2:]
    if seed is not None:
        generator = generator or torch.Generator().manual_seed(seed)
        noise_generator = noise_generator or torch.Generator().manual_seed(seed + 1)
    noise_generator = noise_generator or generator
    motion = motion or MotionParams()

    size = (height, width)
    if out_size is not None:
        size = (out_size, out_size) if isinstance(out_size, int) else tuple(out_size)
        if size[0] > height or size[1] > width:
            raise ShapeError(f"Crop {size} is larger than the {height}x{width} frame.")
    check_even(*size)

    composed = [torch.zeros(2, height, width, dtype=x.dtype)]
    clean = [x.clone()]
    masks = [torch.ones(1, height, width, dtype=x.dtype)]
    steps, affines = [], []
    for _ in range(n_frames - 1):
        affine = sample_affine(generator, motion)
        step = affine_flow(height, width, dtype=x.dtype, **affine)
        f_next = compose_flows(composed[-1], step)
        frame, content_valid = warp(x, f_next)
        carried, step_valid = warp(masks[-1], step)
        mask = step_valid * (carried >= 1 - 1e-6).to(x.dtype) * content_valid
        steps.append(step)
        affines.append(affine)
        composed.append(f_next)
        clean.append(frame)
        masks.append(mask)

    clean_t = _center_crop(torch.stack(clean), size).contiguous()
    raw = torch.stack(
        [degrade_frame(f, params, noise_generator, pattern).cfa for f in clean_t]
    )
    logger.debug("Synthesized a %d-frame %dx%d clip", n_frames, *size)
    return SyntheticClip(
        clean=clean_t,
        raw=raw,
        step_flows=_center_crop(torch.stack(steps), size).contiguous(),
        composed=_center_crop(torch.stack(composed), size).contiguous(),
        masks=_center_crop(torch.stack(masks), size).contiguous(),
        noise_params=params,
        pattern=BayerPattern(pattern),
        seed=seed,
        motion=affines,
    )


def save_synthetic_clip(clip: SyntheticClip, directory: Union[str, Path]) -> Path:
    """Write a synthetic clip as portable tensors plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in _CLIP_TENSORS:
        save_tensor(getattr(clip, name), directory / f"{name}{TENSOR_EXT}")
    manifest = {
        "n_frames": len(clip),
        "sigma_s": clip.noise_params.sigma_s,
        "sigma_r": clip.noise_params.sigma_r,
        "pattern": clip.pattern.value,
        "seed": clip.seed,
        "motion": [
            {**m, "translation": list(m["translation"])} for m in clip.motion
        ],
    }
    dumpfn(manifest, directory / MANIFEST_FILENAME)
    return directory


def load_synthetic_clip(directory: Union[str, Path]) -> SyntheticClip:
    """Read a synthetic clip written by :func:`save_synthetic_clip`."""
    directory = Path(directory)
    manifest = loadfn(directory / MANIFEST_FILENAME)
    tensors = {
        name: load_tensor(directory / f"{name}{TENSOR_EXT}") for name in _CLIP_TENSORS
    }
    return SyntheticClip(
        noise_params=NoiseParams(manifest["sigma_s"], manifest["sigma_r"]),
        pattern=BayerPattern(manifest["pattern"]),
        seed=manifest.get("seed"),
        motion=manifest.get("motion") or [],
        **tensors,
    )
