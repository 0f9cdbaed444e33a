"""Shared domain types, coordinate conventions, intensity normalization and file IO.

Conventions used everywhere in this package:

* Images are single-channel ``(H, W)`` float tensors with intensities in [0, 1].
* Coordinates are pixel-center, origin at pixel (0, 0), ``(row, col)`` ordering.
* Deformation fields are ``(2, H, W)`` tensors storing, for every output pixel,
  the absolute sampling coordinate in the input image (channel 0 = row,
  channel 1 = col). Displacements are derived as ``field - identity_grid``.
* Velocity fields are ``(2, h, w)`` tensors at half resolution of the image
  they deform, with ``h = ceil(H / 2)`` and ``w = ceil(W / 2)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

# Label sets for segmentations: 0 = background, then four coarse tissue classes.
BACKGROUND_LABEL = 0
TISSUE_LABELS = (1, 2, 3, 4)
NUM_LABELS = 5

MIN_IMAGE_SIZE = 16

FIELD_MAGIC = b"SBRF"


class CoreError(ValueError):
    """Raised when an input violates a documented precondition."""


def _to_tensor(values, dtype=torch.float32) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values.to(dtype)
    return torch.as_tensor(np.asarray(values), dtype=dtype)


def normalize_intensities(raw) -> torch.Tensor:
    """Affinely rescale a dense grid so min -> 0 and max -> 1.

    Constant grids map to all zeros rather than erroring, so degenerate
    synthetic inputs do not abort batch pipelines.
    """
    values = _to_tensor(raw)
    if values.numel() == 0:
        raise CoreError("normalize_intensities: empty input grid")
    if not torch.isfinite(values).all():
        raise CoreError("normalize_intensities: input contains non-finite values")
    lo = values.min()
    hi = values.max()
    if hi == lo:
        return torch.zeros_like(values)
    return (values - lo) / (hi - lo)


def identity_grid(height: int, width: int, dtype=torch.float32,
                  device=None) -> torch.Tensor:
    """Return the (2, H, W) field with map(x) = x for every pixel."""
    if height < 1 or width < 1:
        raise CoreError(f"identity_grid: dimensions must be >= 1, got {height}x{width}")
    rows = torch.arange(height, dtype=dtype, device=device)
    cols = torch.arange(width, dtype=dtype, device=device)
    grid_r, grid_c = torch.meshgrid(rows, cols, indexing="ij")
    return torch.stack([grid_r, grid_c], dim=0)


def half_shape(height: int, width: int) -> tuple[int, int]:
    """Half resolution with ceiling division, so odd sizes need no cropping."""
    return (height + 1) // 2, (width + 1) // 2


def check_image(img: torch.Tensor, what: str = "image") -> torch.Tensor:
    """Validate the Image2D contract: finite, in [0, 1], at least 16x16."""
    if img.ndim != 2:
        raise CoreError(f"{what}: expected a (H, W) tensor, got shape {tuple(img.shape)}")
    h, w = img.shape
    if h < MIN_IMAGE_SIZE or w < MIN_IMAGE_SIZE:
        raise CoreError(f"{what}: {h}x{w} below the {MIN_IMAGE_SIZE} px network floor")
    if not torch.isfinite(img).all():
        raise CoreError(f"{what}: contains non-finite values")
    if img.min() < 0 or img.max() > 1:
        raise CoreError(f"{what}: intensities outside [0, 1]; normalize first")
    return img


def check_mask(mask: torch.Tensor, like: Optional[torch.Tensor] = None,
               require_foreground: bool = False) -> torch.Tensor:
    if mask.ndim != 2:
        raise CoreError(f"mask: expected a (H, W) tensor, got shape {tuple(mask.shape)}")
    if like is not None and mask.shape != like.shape:
        raise CoreError(f"mask shape {tuple(mask.shape)} does not match image "
                        f"shape {tuple(like.shape)}")
    if require_foreground and not bool(mask.any()):
        raise CoreError("mask has no foreground pixels")
    return mask


def check_labels(seg: torch.Tensor) -> torch.Tensor:
    if seg.ndim != 2:
        raise CoreError(f"segmentation: expected a (H, W) tensor, got {tuple(seg.shape)}")
    bad = (seg < 0) | (seg >= NUM_LABELS)
    if bool(bad.any()):
        raise CoreError(f"segmentation: labels outside 0..{NUM_LABELS - 1}")
    return seg


@dataclass
class PairedSample:
    """One (source, target) pair plus whatever annotations exist for it.

    ``landmarks_src`` / ``landmarks_tgt`` are (K, 2) float tensors in
    (row, col) pixel coordinates of their respective images; row k of one
    corresponds to row k of the other. ``ground_truth_field`` maps target
    coordinates to source coordinates (synthetic data only).
    """

    source: torch.Tensor
    target: torch.Tensor
    tissue_mask: Optional[torch.Tensor] = None
    source_seg: Optional[torch.Tensor] = None
    target_seg: Optional[torch.Tensor] = None
    landmarks_src: Optional[torch.Tensor] = None
    landmarks_tgt: Optional[torch.Tensor] = None
    ground_truth_field: Optional[torch.Tensor] = None
    index: int = 0

    def __post_init__(self):
        if self.source.shape != self.target.shape:
            raise CoreError(
                f"sample {self.index}: source {tuple(self.source.shape)} and target "
                f"{tuple(self.target.shape)} must share a common grid")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.target.shape)

    def has_landmarks(self) -> bool:
        return self.landmarks_src is not None and len(self.landmarks_src) > 0

    def has_segmentations(self) -> bool:
        return self.source_seg is not None and self.target_seg is not None


# --------------------------------------------------------------------------- #
# File IO
# --------------------------------------------------------------------------- #

def load_image(path) -> torch.Tensor:
    """Load a grayscale PNG (8 or 16 bit) and normalize intensities to [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "I", "I;16"):
            im = im.convert("L")
        arr = np.asarray(im, dtype=np.float64)
    return normalize_intensities(arr)


def save_image(path, img: torch.Tensor, bits: int = 16) -> None:
    """Write an image in [0, 1] as an 8- or 16-bit grayscale PNG."""
    arr = img.detach().cpu().numpy()
    if bits == 16:
        data = np.round(np.clip(arr, 0.0, 1.0) * 65535.0).astype(np.uint16)
        Image.fromarray(data).save(path)
    elif bits == 8:
        data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(data, mode="L").save(path)
    else:
        raise CoreError(f"save_image: unsupported bit depth {bits}")


def load_mask(path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return torch.from_numpy((arr != 0))


def save_mask(path, mask: torch.Tensor) -> None:
    data = (mask.detach().cpu().numpy() != 0).astype(np.uint8) * 255
    Image.fromarray(data, mode="L").save(path)


def load_labels(path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L")).astype(np.int64)
    return check_labels(torch.from_numpy(arr))


def save_labels(path, seg: torch.Tensor) -> None:
    check_labels(seg)
    data = seg.detach().cpu().numpy().astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def load_landmarks(path) -> tuple[torch.Tensor, torch.Tensor]:
    """Parse a landmark file: ``x_src,y_src,x_tgt,y_tgt`` per line.

    x is the column and y the row; returns (src, tgt) as (K, 2) float tensors
    in internal (row, col) order. Lines starting with ``#`` and blank lines
    are ignored.
    """
    src, tgt = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise CoreError(f"{path}:{lineno}: expected 4 comma-separated values")
        try:
            x_s, y_s, x_t, y_t = (float(p) for p in parts)
        except ValueError as exc:
            raise CoreError(f"{path}:{lineno}: non-numeric landmark entry") from exc
        src.append((y_s, x_s))
        tgt.append((y_t, x_t))
    return (torch.tensor(src, dtype=torch.float32).reshape(-1, 2),
            torch.tensor(tgt, dtype=torch.float32).reshape(-1, 2))


def save_landmarks(path, src: torch.Tensor, tgt: torch.Tensor) -> None:
    if len(src) != len(tgt):
        raise CoreError("save_landmarks: source/target landmark counts differ")
    lines = ["# x_src,y_src,x_tgt,y_tgt (pixel units, x = column, y = row)"]
    for (r_s, c_s), (r_t, c_t) in zip(src.tolist(), tgt.tolist()):
        # repr round-trips exactly, so saved landmarks reload bit-identical
        lines.append(f"{c_s!r},{r_s!r},{c_t!r},{r_t!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def save_field(path, field_t: torch.Tensor) -> None:
    """Write a dense field as SBRF: 16-byte header then float32 LE, row-major,
    channel-interleaved."""
    if field_t.ndim != 3:
        raise CoreError(f"save_field: expected (C, H, W), got {tuple(field_t.shape)}")
    c, h, w = field_t.shape
    header = FIELD_MAGIC + struct.pack("<III", h, w, c)
    # (C, H, W) -> (H, W, C) interleaves channels per pixel
    data = field_t.detach().cpu().numpy().astype("<f4").transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(header)
        f.write(data.tobytes())


def load_field(path) -> torch.Tensor:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != FIELD_MAGIC:
        raise CoreError(f"{path}: not an SBRF field file")
    h, w, c = struct.unpack("<III", raw[4:16])
    expected = 16 + 4 * h * w * c
    if len(raw) != expected:
        raise CoreError(f"{path}: expected {expected} bytes for {h}x{w}x{c}, "
                        f"got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w, c)
    return torch.from_numpy(data.transpose(2, 0, 1).copy())
