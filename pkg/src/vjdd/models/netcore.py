"""Restoration network: feature extraction, recurrent propagation and reconstruction.

Every raw frame is packed to half resolution with its noise map and turned
into a shallow feature once. A buffer of ``n`` features centered on the
current frame is aligned to the center with :class:`~vjdd.models.glam.GLAM`,
concatenated with the hidden state of the previous frame and reconstructed by
a five-scale UNet with channel and spatial attention. The reconstruction
feature becomes the next hidden state and is converted to linear RGB by a
3x3 convolution followed by depth-to-space.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from vjdd.core.base import ShapeError, as_batch, unbatch
from vjdd.core.degrade import pack_cfa
from vjdd.core.motionsynth import warp
from vjdd.models.glam import GLAM, shift_flow

logger = logging.getLogger(__name__)

NEGATIVE_SLOPE = 0.1
UNET_SCALES = 5
HIDDEN_MODES = ("latent", "none", "shallow")
HIDDEN_ALIGNMENTS = ("none", "global")


def _zero_biases(module: nn.Module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)) and m.bias is not None:
            nn.init.zeros_(m.bias)


def _conv_lrelu(c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
        nn.LeakyReLU(NEGATIVE_SLOPE),
    )


class FeatureExtractor(nn.Module):
    """Shallow features of a packed CFA frame and its packed noise map."""

    def __init__(self, channels: int = 32):
        """Create the two conv layers; biases start at zero."""
        super().__init__()
        self.channels = channels
        self.body = nn.Sequential(
            _conv_lrelu(8, channels), _conv_lrelu(channels, channels)
        )
        _zero_biases(self)
        self.calls = 0

    def forward(self, cfa: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
        """Features (B, C, H/2, W/2) of CFA frames and noise maps (B, H, W)."""
        if cfa.shape != std.shape:
            raise ShapeError(
                f"CFA {tuple(cfa.shape)} and noise map {tuple(std.shape)} differ."
            )
        cfa, squeeze = as_batch(cfa, 3)
        std, _ = as_batch(std, 3)
        self.calls += 1
        packed = torch.cat([pack_cfa(cfa), pack_cfa(std)], dim=1)
        return unbatch(self.body(packed), squeeze)


@dataclass(frozen=True)
class FrameBuffer:
    """Features of the ``n`` frames centered on the current one, oldest first."""

    slots: Tuple[torch.Tensor, ...]

    def __post_init__(self):
        """Check that the buffer has a center."""
        if len(self.slots) % 2 == 0:
            raise ShapeError(
                f"A frame buffer needs an odd size, got {len(self.slots)}."
            )

    @classmethod
    def initial(cls, size: int, features: Sequence[torch.Tensor]) -> "FrameBuffer":
        """Buffer of the first frame; slots outside the clip replicate its edge.

        Args:
            size: Buffer size ``n``.
            features: Features of frames ``0 .. min(n // 2, N - 1)``.
        """
        if not features:
            raise ShapeError("The initial buffer needs at least one feature.")
        half = size // 2
        last = len(features) - 1
        slots = [features[0]] * half + [features[min(k, last)] for k in range(half + 1)]
        return cls(tuple(slots))

    def __len__(self):
        """Buffer size n."""
        return len(self.slots)

    @property
    def center(self) -> torch.Tensor:
        """Feature of the current frame."""
        return self.slots[len(self.slots) // 2]

    def push(self, feature: torch.Tensor) -> "FrameBuffer":
        """Drop the oldest feature and append ``feature``, reusing the others."""
        return FrameBuffer(self.slots[1:] + (feature,))


def update_buffer(buf: FrameBuffer, next_feat: torch.Tensor) -> FrameBuffer:
    """Advance the buffer by one frame."""
    return buf.push(next_feat)


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation channel gates."""

    def __init__(self, channels: int, reduction: int = 4):
        """Create the two 1x1 bottleneck layers."""
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)
        self.last_gate: Optional[torch.Tensor] = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Gate the channels of x."""
        gate = torch.sigmoid(self.fc2(F.relu(self.fc1(x.mean((-2, -1), keepdim=True)))))
        self.last_gate = gate.detach()
        return x * gate


class SpatialAttention(nn.Module):
    """Spatial gate from channel-wise mean and max pooling."""

    def __init__(self, kernel_size: int = 7):
        """Create the gate convolution."""
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Gate the pixels of x."""
        pooled = torch.cat([x.mean(1, keepdim=True), x.amax(1, keepdim=True)], dim=1)
        return x * torch.sigmoid(self.conv(pooled))


class RCM(nn.Module):
    """Reconstruction module: entry convs and a five-scale attention UNet.

    Downscaling uses stride-2 convolutions, upscaling transposed convolutions,
    and every decoder scale fuses the matching encoder skip. Widths double per
    scale up to ``max_channels``.
    """

    def __init__(
        self,
        in_channels: int,
        channels: int = 64,
        max_channels: int = 256,
        scales: int = UNET_SCALES,
    ):
        """Create the layers."""
        super().__init__()
        self.scales = scales
        self.out_channels = channels
        widths = [min(channels * 2**i, max_channels) for i in range(scales)]
        self.entry = nn.Sequential(
            _conv_lrelu(in_channels, channels), _conv_lrelu(channels, channels)
        )
        self.encoders = nn.ModuleList(_conv_lrelu(w, w) for w in widths[:-1])
        self.downs = nn.ModuleList(
            _conv_lrelu(widths[i], widths[i + 1], stride=2) for i in range(scales - 1)
        )
        self.bottleneck = _conv_lrelu(widths[-1], widths[-1])
        self.cam = ChannelAttention(widths[-1])
        self.sam = SpatialAttention()
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2)
            for i in range(scales - 1)
        )
        self.decoders = nn.ModuleList(_conv_lrelu(2 * w, w) for w in widths[:-1])
        _zero_biases(self)

    @property
    def factor(self) -> int:
        """Required divisibility of the input size."""
        return 2 ** (self.scales - 1)

    def forward(self, aligned: torch.Tensor, h_prev: torch.Tensor) -> torch.Tensor:
        """Reconstruction feature H_t from aligned features and the hidden input.

        Args:
            aligned: Concatenated aligned buffer features (B, n*C, h, w).
            h_prev: Hidden input (B, C_h, h, w).

        Returns:
            H_t, (B, channels, h, w): both the next hidden state and the
            reconstruction feature.
        """
        height, width = aligned.shape[-2:]
        if height % self.factor or width % self.factor:
            raise ShapeError(
                f"Packed size {height}x{width} must be divisible by {self.factor}."
            )
        if h_prev.shape[-2:] != aligned.shape[-2:]:
            raise ShapeError(
                f"Hidden input {tuple(h_prev.shape)} does not match the aligned "
                f"features {tuple(aligned.shape)}."
            )
        x = self.entry(torch.cat([aligned, h_prev], dim=1))
        skips: List[torch.Tensor] = []
        for encode, down in zip(self.encoders, self.downs):
            x = encode(x)
            skips.append(x)
            x = down(x)
        x = self.sam(self.cam(self.bottleneck(x)))
        for i in reversed(range(self.scales - 1)):
            x = self.decoders[i](torch.cat([self.ups[i](x), skips[i]], dim=1))
        return x


class ToRGB(nn.Module):
    """3x3 convolution to 12 channels and depth-to-space to full-resolution RGB."""

    def __init__(self, channels: int = 64):
        """Create the output convolution with zero bias."""
        super().__init__()
        self.conv = nn.Conv2d(channels, 12, 3, padding=1)
        nn.init.zeros_(self.conv.bias)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        """Linear RGB (B, 3, 2h, 2w) from H_t (B, C_h, h, w)."""
        return F.pixel_shuffle(self.conv(hidden), 2)


@dataclass
class PropagationState:
    """Recurrent state between frames.

    Attributes:
        buffer: Features of the frames around the current one.
        hidden: Reconstruction feature of the previous frame (zeros at start).
        previous: Shallow feature of the previous frame, None at the first one.
    """

    buffer: FrameBuffer
    hidden: torch.Tensor
    previous: Optional[torch.Tensor] = None


class RestorationNet(nn.Module):
    """Recurrent joint denoising and demosaicking network."""

    def __init__(
        self,
        buffer_size: int = 5,
        feat_channels: int = 32,
        hidden_channels: int = 64,
        max_channels: int = 256,
        f_max: int = 16,
        hidden_mode: str = "latent",
        hidden_alignment: str = "none",
    ):
        """Create the network.

        Args:
            buffer_size: Number ``n`` of buffered frames (odd).
            feat_channels: Shallow feature channels C.
            hidden_channels: Hidden state channels C_h.
            max_channels: Cap on UNet widths.
            f_max: Global alignment search radius at quarter resolution.
            hidden_mode: "latent" feeds H_{t-1}, "none" feeds zeros and
                "shallow" feeds the previous shallow feature I_{t-1}.
            hidden_alignment: "global" shifts the hidden input by the global
                shift between the previous and the current frame.
        """
        super().__init__()
        if buffer_size < 1 or buffer_size % 2 == 0:
            raise ShapeError(
                f"buffer_size must be odd and positive, got {buffer_size}."
            )
        if hidden_mode not in HIDDEN_MODES:
            raise ValueError(f'Unknown hidden_mode "{hidden_mode}".')
        if hidden_alignment not in HIDDEN_ALIGNMENTS:
            raise ValueError(f'Unknown hidden_alignment "{hidden_alignment}".')
        self.buffer_size = buffer_size
        self.hidden_channels = hidden_channels
        self.hidden_mode = hidden_mode
        self.hidden_alignment = hidden_alignment
        hidden_in = feat_channels if hidden_mode == "shallow" else hidden_channels
        self.extractor = FeatureExtractor(feat_channels)
        self.glam = GLAM(feat_channels, f_max)
        rcm_in = buffer_size * feat_channels + hidden_in
        self.rcm = RCM(rcm_in, hidden_channels, max_channels)
        self.to_rgb = ToRGB(hidden_channels)

    @classmethod
    def from_config(cls, config) -> "RestorationNet":
        """Build from a :class:`~vjdd.core.config.ModelConfig`."""
        return cls(
            buffer_size=config.buffer_size,
            feat_channels=config.feat_channels,
            hidden_channels=config.hidden_channels,
            max_channels=config.max_channels,
            f_max=config.f_max,
            hidden_mode=config.hidden_mode,
            hidden_alignment=config.hidden_alignment,
        )

    def extract_features(self, cfa: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
        """Shallow feature of one (batched) frame."""
        return self.extractor(cfa, std)

    def initial_state(self, buffer: FrameBuffer) -> PropagationState:
        """State of the first frame: zero hidden state."""
        center = buffer.center
        hidden = center.new_zeros(
            center.shape[0], self.hidden_channels, *center.shape[-2:]
        )
        return PropagationState(buffer=buffer, hidden=hidden)

    def align_buffer(self, buffer: FrameBuffer) -> torch.Tensor:
        """Align every buffer feature to the center, concatenated to (B, n*C, h, w)."""
        n = len(buffer)
        center = buffer.center
        b, c, height, width = center.shape
        ref = center.repeat(n, 1, 1, 1)
        tgt = torch.cat(buffer.slots, dim=0)
        aligned = self.glam(ref, tgt).aligned
        return aligned.view(n, b, c, height, width).transpose(0, 1).reshape(
            b, n * c, height, width
        )

    def hidden_input(self, state: PropagationState) -> torch.Tensor:
        """Tensor fed to the RCM in place of H_{t-1}."""
        center = state.buffer.center
        if self.hidden_mode == "none":
            return torch.zeros_like(state.hidden)
        if self.hidden_mode == "shallow":
            hidden = center if state.previous is None else state.previous
        else:
            hidden = state.hidden
        if self.hidden_alignment == "global" and state.previous is not None:
            shift = self.glam.global_shift(center, state.previous)
            hidden = warp(hidden, shift_flow(shift, *hidden.shape[-2:], 4, hidden))[0]
        return hidden

    def restore_frame(
        self, state: PropagationState, next_feature: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, PropagationState]:
        """Restore the current frame and advance the state.

        Args:
            state: Buffer centered on the current frame and the hidden state.
            next_feature: Feature entering the buffer for the next frame.

        Returns:
            The restored linear RGB frames (B, 3, H, W) and the next state.
        """
        aligned = self.align_buffer(state.buffer)
        h_t = self.rcm(aligned, self.hidden_input(state))
        frame = self.to_rgb(h_t)
        buffer = state.buffer
        if next_feature is not None:
            buffer = buffer.push(next_feature)
        return frame, PropagationState(
            buffer=buffer, hidden=h_t, previous=state.buffer.center
        )

    def run_clip(self, cfa: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
        """Restore a raw clip frame by frame.

        Args:
            cfa: Noisy CFA clip (N, H, W) or batch (B, N, H, W).
            std: Noise maps of the same shape.

        Returns:
            Restored linear RGB clip (N, 3, H, W) or (B, N, 3, H, W).
        """
        if cfa.shape != std.shape:
            raise ShapeError(
                f"CFA {tuple(cfa.shape)} and noise maps {tuple(std.shape)} differ."
            )
        cfa, squeeze = as_batch(cfa, 4)
        std, _ = as_batch(std, 4)
        n_frames = cfa.shape[1]
        if n_frames < 1:
            raise ShapeError("A clip needs at least one frame.")
        half = self.buffer_size // 2

        def extract(t: int) -> torch.Tensor:
            return self.extract_features(cfa[:, t], std[:, t])

        first = [extract(t) for t in range(min(half, n_frames - 1) + 1)]
        state = self.initial_state(FrameBuffer.initial(self.buffer_size, first))
        outputs = []
        for t in range(n_frames):
            next_feature = None
            if t < n_frames - 1:
                entering = t + half + 1
                if entering < n_frames:
                    next_feature = extract(entering)
                else:
                    next_feature = state.buffer.slots[-1]
            frame, state = self.restore_frame(state, next_feature)
            outputs.append(frame)
        return unbatch(torch.stack(outputs, dim=1), squeeze)

    def forward(self, cfa: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
        """Same as :meth:`run_clip`."""
        return self.run_clip(cfa, std)

    @torch.no_grad()
    def restore(self, cfa: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
        """Inference-mode :meth:`run_clip`."""
        was_training = self.training
        self.eval()
        try:
            return self.run_clip(cfa, std)
        finally:
            self.train(was_training)
