"""Clip and tensor ingestion/persistence and checkpointing.

The portable tensor format (``.vjdt``) is little-endian and row-major::

    magic (4 bytes, b"VJDT") | version (uint16) | dtype code (uint8) |
    rank (uint8) | shape (rank x uint64) | payload

Checkpoints are directories holding two portable tensors (model parameters
and optimizer state, both flattened) and a ``header.yaml`` record.
"""
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import cv2
import numpy as np
import torch
import yaml  # type: ignore

from vjdd.core.base import VJDDError

logger = logging.getLogger(__name__)

MAGIC = b"VJDT"
FORMAT_VERSION = 1
MAX_RANK = 5
TENSOR_EXT = ".vjdt"
_HEADER = struct.Struct("<4sHBB")
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES_BY_DTYPE = {np.dtype("float32"): 1, np.dtype("float64"): 2}

CHECKPOINT_VERSION = 1
PARAMS_FILENAME = "params" + TENSOR_EXT
OPTIMIZER_FILENAME = "optimizer" + TENSOR_EXT
HEADER_FILENAME = "header.yaml"

PathLike = Union[str, Path]


class DataIOError(VJDDError):
    """Base exception for data input/output."""


class IngestError(DataIOError):
    """Exception raised when clip data cannot be ingested or violates Clip rules."""


class FormatError(DataIOError):
    """Exception raised when a portable tensor or checkpoint file is malformed."""


class CheckpointVersionError(FormatError):
    """Exception raised when a checkpoint was written with another format version."""


@dataclass
class Clip:
    """Clean linear-RGB video clip.

    Attributes:
        frames: Tensor of shape (N, 3, H, W), finite values in [0, 1].
        id: Identifier of the clip (directory or file stem by default).
        frame_rate: Optional frame rate, informational only.
    """

    frames: torch.Tensor
    id: str = "clip"
    frame_rate: Optional[float] = None

    def __post_init__(self):
        """Check the Clip invariants."""
        frames = self.frames
        if frames.dim() != 4 or frames.shape[1] != 3:
            raise IngestError(
                f"Clip frames must have shape (N, 3, H, W), got {tuple(frames.shape)}."
            )
        if frames.shape[0] < 1:
            raise IngestError("A clip needs at least one frame.")
        height, width = frames.shape[-2:]
        if height % 2 or width % 2:
            raise IngestError(
                f"Clip frame size must be even for Bayer tiling, got {height}x{width}."
            )
        if not torch.isfinite(frames).all():
            raise IngestError("Clip frames contain non-finite values.")
        if frames.min() < 0 or frames.max() > 1:
            raise IngestError("Clip frame values must lie in [0, 1].")

    def __len__(self):
        """Return the number of frames."""
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        """Frame height in pixels."""
        return self.frames.shape[-2]

    @property
    def width(self) -> int:
        """Frame width in pixels."""
        return self.frames.shape[-1]


def save_tensor(t: Union[torch.Tensor, np.ndarray], path: PathLike):
    """Write a float32/float64 tensor of rank <= 5 in the portable format."""
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    code = _CODES_BY_DTYPE.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"Unsupported dtype {arr.dtype}; use float32 or float64.")
    if arr.ndim > MAX_RANK:
        raise FormatError(f"Tensor rank {arr.ndim} exceeds the maximum of {MAX_RANK}.")
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes(order="C")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(payload)


def load_tensor(path: PathLike) -> torch.Tensor:
    """Read a portable tensor file written by :func:`save_tensor`."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: file too short for a tensor header.")
    magic, version, code, rank = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic bytes {magic!r}.")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}.")
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}.")
    if rank > MAX_RANK:
        raise FormatError(f"{path}: rank {rank} exceeds the maximum of {MAX_RANK}.")
    offset = _HEADER.size
    if len(data) < offset + 8 * rank:
        raise FormatError(f"{path}: truncated shape record.")
    shape = struct.unpack_from(f"<{rank}Q", data, offset)
    offset += 8 * rank
    dtype = _DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) - offset != expected:
        raise FormatError(
            f"{path}: payload has {len(data) - offset} bytes, expected {expected}."
        )
    arr = np.frombuffer(data, dtype=dtype, offset=offset).reshape(shape)
    return torch.from_numpy(arr.astype(dtype.newbyteorder("="), copy=True))


def _frame_index(path: Path) -> int:
    match = re.search(r"(\d+)$", path.stem)
    if match is None:
        raise IngestError(f"Frame file {path.name} has no trailing frame number.")
    return int(match.group(1))


def _read_png(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise IngestError(f"Could not read image {path}.")
    if img.dtype == np.uint8:
        scale = 255.0
    elif img.dtype == np.uint16:
        scale = 65535.0
    else:
        raise IngestError(f"{path}: only 8- or 16-bit PNG frames are supported.")
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    elif img.shape[2] == 4:
        img = img[..., :3]
    # cv2 decodes to BGR
    img = img[..., ::-1]
    return img.astype(np.float64) / scale


def load_clip(path: PathLike, clip_id: Optional[str] = None) -> Clip:
    """Load a clip from a directory of numbered PNG frames or a portable tensor file.

    PNG values are linearized by dividing integer codes by the maximum code
    value; no gamma is removed since inputs are declared linear. A tensor file
    holds (N, H, W, 3) or a single (H, W, 3) frame.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError(f"Clip path {path} does not exist.")
    clip_id = clip_id or path.stem
    if path.is_file():
        try:
            arr = load_tensor(path)
        except FormatError as exc:
            raise IngestError(f"Could not read clip tensor {path}: {exc}") from exc
        if arr.dim() == 3:
            arr = arr.unsqueeze(0)
        if arr.dim() != 4 or arr.shape[-1] != 3:
            raise IngestError(
                f"Clip tensor must have shape (N, H, W, 3), got {tuple(arr.shape)}."
            )
        return Clip(frames=arr.permute(0, 3, 1, 2).contiguous(), id=clip_id)

    files = sorted(path.glob("*.png"), key=_frame_index)
    if not files:
        raise IngestError(f"No PNG frames found in {path}.")
    indices = [_frame_index(f) for f in files]
    if indices != list(range(indices[0], indices[0] + len(indices))):
        raise IngestError(f"Frame numbering in {path} is not contiguous: {indices}.")
    frames = [_read_png(f) for f in files]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise IngestError(f"Frames in {path} have different sizes: {sorted(shapes)}.")
    stacked = torch.from_numpy(np.stack(frames).astype(np.float32))
    logger.debug("Loaded %d frames of %s from %s", len(frames), shapes.pop(), path)
    return Clip(frames=stacked.permute(0, 3, 1, 2).contiguous(), id=clip_id)


def save_clip(
    frames: Union[Clip, torch.Tensor], path: PathLike, fmt: str = "png", bits: int = 16
):
    """Write frames (N, 3, H, W) as numbered PNGs in a directory or one tensor file.

    PNG output is clipped to [0, 1] and quantized to ``bits`` (8 or 16); the
    tensor format keeps values exactly.
    """
    if isinstance(frames, Clip):
        frames = frames.frames
    frames = frames.detach().cpu()
    path = Path(path)
    if fmt == "vjdt":
        save_tensor(frames.permute(0, 2, 3, 1).contiguous(), path)
        return
    if fmt != "png":
        raise ValueError(f'Unknown clip format "{fmt}".')
    if bits not in (8, 16):
        raise ValueError("PNG bit depth must be 8 or 16.")
    path.mkdir(parents=True, exist_ok=True)
    maxval = 255 if bits == 8 else 65535
    dtype = np.uint8 if bits == 8 else np.uint16
    for i, frame in enumerate(frames):
        img = frame.clamp(0, 1).permute(1, 2, 0).numpy()[..., ::-1]
        codes = np.round(img * maxval).astype(dtype)
        cv2.imwrite(str(path / f"frame_{i:04d}.png"), codes)


@dataclass
class Checkpoint:
    """Model and optimizer state with the run metadata needed to resume.

    Attributes:
        params: Model parameters by name (a ``state_dict``).
        optimizer_state: Torch optimizer ``state_dict`` or None.
        step: Global step counter.
        config: Snapshot of the run configuration as a plain dict.
        stage: Training stage ("pretrain" or "full").
        extra: Additional YAML-serializable metadata (e.g. RNG stream states).
        version: Checkpoint format version.
    """

    params: Dict[str, torch.Tensor]
    optimizer_state: Optional[Dict[str, Any]] = None
    step: int = 0
    config: Dict[str, Any] = field(default_factory=dict)
    stage: str = "pretrain"
    extra: Dict[str, Any] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _dtype_name(dtype: torch.dtype) -> str:
    return str(dtype).replace("torch.", "")


def _pack(tensors: List[torch.Tensor]) -> torch.Tensor:
    if not tensors:
        return torch.zeros(0, dtype=torch.float64)
    # float32 -> float64 is exact, so a single float64 blob round-trips both
    return torch.cat([t.detach().cpu().reshape(-1).to(torch.float64) for t in tensors])


def _unpack(blob: torch.Tensor, index: List[Dict[str, Any]]) -> List[torch.Tensor]:
    out, offset = [], 0
    for entry in index:
        shape = tuple(entry["shape"])
        numel = int(np.prod(shape, dtype=np.int64))
        if offset + numel > blob.numel():
            raise FormatError("Checkpoint tensor blob is shorter than its index.")
        chunk = blob[offset : offset + numel].reshape(shape)
        out.append(chunk.to(getattr(torch, entry["dtype"])).clone())
        offset += numel
    if offset != blob.numel():
        raise FormatError("Checkpoint tensor blob is longer than its index.")
    return out


def save_checkpoint(ckpt: Checkpoint, directory: PathLike) -> Path:
    """Write a checkpoint directory (params, optimizer state and header)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params_index = [
        {"name": name, "shape": list(t.shape), "dtype": _dtype_name(t.dtype)}
        for name, t in ckpt.params.items()
    ]
    save_tensor(_pack(list(ckpt.params.values())), directory / PARAMS_FILENAME)

    optimizer_header = None
    if ckpt.optimizer_state is not None:
        entries, tensors = [], []
        state = ckpt.optimizer_state["state"]
        for pid in sorted(state):
            for key in sorted(state[pid]):
                value = state[pid][key]
                if isinstance(value, torch.Tensor):
                    entries.append(
                        {
                            "param": pid,
                            "key": key,
                            "shape": list(value.shape),
                            "dtype": _dtype_name(value.dtype),
                        }
                    )
                    tensors.append(value)
                else:
                    entries.append({"param": pid, "key": key, "value": value})
        tensor_entries = [e for e in entries if "shape" in e]
        save_tensor(_pack(tensors), directory / OPTIMIZER_FILENAME)
        param_groups = [
            {k: list(v) if isinstance(v, tuple) else v for k, v in group.items()}
            for group in ckpt.optimizer_state["param_groups"]
        ]
        optimizer_header = {
            "entries": entries,
            "n_tensors": len(tensor_entries),
            "param_groups": param_groups,
        }

    header = {
        "format_version": ckpt.version,
        "step": int(ckpt.step),
        "stage": ckpt.stage,
        "config": ckpt.config,
        "params_index": params_index,
        "optimizer": optimizer_header,
        "extra": ckpt.extra,
    }
    with open(directory / HEADER_FILENAME, "w") as f:
        yaml.safe_dump(header, f, default_flow_style=False, sort_keys=False)
    logger.info("Saved checkpoint at step %d to %s", ckpt.step, directory)
    return directory


def load_checkpoint(directory: PathLike) -> Checkpoint:
    """Read a checkpoint directory written by :func:`save_checkpoint`."""
    directory = Path(directory)
    header_path = directory / HEADER_FILENAME
    if not header_path.exists():
        raise FormatError(f"No checkpoint header found in {directory}.")
    with open(header_path, "r") as f:
        header = yaml.safe_load(f)
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"Checkpoint {directory} has format version {version}, expected "
            f"{CHECKPOINT_VERSION}."
        )
    index = header["params_index"]
    values = _unpack(load_tensor(directory / PARAMS_FILENAME), index)
    params = {entry["name"]: value for entry, value in zip(index, values)}

    optimizer_state = None
    opt_header = header.get("optimizer")
    if opt_header is not None:
        entries = opt_header["entries"]
        tensor_entries = [e for e in entries if "shape" in e]
        blob = load_tensor(directory / OPTIMIZER_FILENAME)
        tensors = iter(_unpack(blob, tensor_entries))
        state: Dict[int, Dict[str, Any]] = {}
        for entry in entries:
            slot = state.setdefault(entry["param"], {})
            slot[entry["key"]] = next(tensors) if "shape" in entry else entry["value"]
        param_groups = []
        for group in opt_header["param_groups"]:
            group = dict(group)
            if isinstance(group.get("betas"), list):
                group["betas"] = tuple(group["betas"])
            param_groups.append(group)
        optimizer_state = {"state": state, "param_groups": param_groups}

    return Checkpoint(
        params=params,
        optimizer_state=optimizer_state,
        step=header["step"],
        config=header.get("config") or {},
        stage=header.get("stage", "pretrain"),
        extra=header.get("extra") or {},
        version=version,
    )
