"""Shared exceptions and tensor-shape helpers for vjdd."""
from typing import Tuple

import torch


class VJDDError(Exception):
    """Base exception for vjdd."""


class ShapeError(VJDDError, ValueError):
    """Exception raised when tensor shapes violate an operation's contract."""


class VJDDWarning(Warning):
    """Base warning for vjdd."""


def as_batch(t: torch.Tensor, ndim: int) -> Tuple[torch.Tensor, bool]:
    """Add a leading batch dimension when the tensor has ``ndim - 1`` dimensions.

    Args:
        t: Input tensor, either batched (``ndim`` dims) or not (``ndim - 1``).
        ndim: Number of dimensions of the batched layout.

    Returns:
        The batched tensor and a flag telling whether a dimension was added.
    """
    if t.dim() == ndim:
        return t, False
    if t.dim() == ndim - 1:
        return t.unsqueeze(0), True
    raise ShapeError(
        f"Expected a tensor with {ndim - 1} or {ndim} dimensions, got shape "
        f"{tuple(t.shape)}."
    )


def unbatch(t: torch.Tensor, squeeze: bool) -> torch.Tensor:
    """Undo :func:`as_batch`."""
    return t.squeeze(0) if squeeze else t


def check_even(height: int, width: int, what: str = "frame"):
    """Raise ShapeError unless both spatial dimensions are even (Bayer tiling)."""
    if height % 2 or width % 2:
        raise ShapeError(
            f"The {what} dimensions must be even for Bayer tiling, got "
            f"{height}x{width}."
        )
