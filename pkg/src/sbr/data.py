"""Synthetic paired-modality stacks with ground-truth deformations, on-disk
stack loading/saving, neighbor-pair sampling, and spatial augmentation.

The synthetic generator stands in for full-scale histology/MRI data at desk
scale: a coherent stack of tissue-like target slices, and sources derived
from them by a known diffeomorphic warp, a contrast transform, and optional
acquisition artifacts (cracks, multiplicative bias).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from . import core, warp
from .core import CoreError, PairedSample

CONTRAST_MODES = ("inverted", "nonmonotonic")
LANDMARK_BORDER_MARGIN = 8

# base intensity per label: background, then four tissue classes
_LABEL_INTENSITY = np.array([0.0, 0.35, 0.58, 0.78, 0.95])


@dataclass
class SyntheticConfig:
    num_slices: int = 40
    height: int = 96
    width: int = 96
    warp_magnitude: float = 6.0
    warp_smoothness: float = 8.0
    contrast_mode: str = "inverted"
    artifact_level: float = 0.0
    seed: int = 0
    num_landmarks: int = 12

    def __post_init__(self):
        if self.num_slices < 1:
            raise CoreError("SyntheticConfig: num_slices must be >= 1")
        if self.height < 32 or self.width < 32:
            raise CoreError("SyntheticConfig: dimensions must be >= 32")
        if self.warp_magnitude < 0:
            raise CoreError("SyntheticConfig: warp_magnitude must be >= 0")
        if self.contrast_mode not in CONTRAST_MODES:
            raise CoreError(f"SyntheticConfig: unknown contrast_mode "
                            f"'{self.contrast_mode}'")
        if not 0.0 <= self.artifact_level <= 1.0:
            raise CoreError("SyntheticConfig: artifact_level must be in [0, 1]")
        if self.num_landmarks < 10:
            raise CoreError("SyntheticConfig: need at least 10 landmarks")


@dataclass
class AugmentationConfig:
    max_rotation: float = 5.0
    max_scale_dev: float = 0.05
    max_shift: float = 5.0
    nonlinear_grid: tuple = (9, 9, 2)
    nonlinear_sigma: float = 2.0

    def __post_init__(self):
        if tuple(self.nonlinear_grid) != (9, 9, 2):
            raise CoreError("AugmentationConfig: nonlinear control grid is fixed "
                            "at 9x9x2")


def _smooth_stack_noise(rng, shape, sigma) -> np.ndarray:
    """Zero-mean smooth noise over (slices, H, W), unit-ish amplitude."""
    noise = gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    peak = np.abs(noise).max()
    return noise / peak if peak > 0 else noise


def apply_contrast(image: torch.Tensor, mode: str) -> torch.Tensor:
    """Map target-modality intensities to the synthetic source modality."""
    if mode == "inverted":
        return 1.0 - image
    if mode == "nonmonotonic":
        # mid-gray maps bright, both extremes dark: not undoable by any
        # monotonic intensity remapping, so translation must be learned
        return 1.0 - (2.0 * image - 1.0).abs()
    raise CoreError(f"apply_contrast: unknown mode '{mode}'")


def _make_gt_svf(rng, cfg: SyntheticConfig) -> torch.Tensor:
    """Half-resolution SVF whose upsampled flow moves about warp_magnitude px."""
    hh, hw = core.half_shape(cfg.height, cfg.width)
    if cfg.warp_magnitude == 0:
        return torch.zeros(2, hh, hw)
    sigma = max(cfg.warp_smoothness / 2.0, 1.0)
    field = gaussian_filter(rng.standard_normal((2, hh, hw)),
                            (0, sigma, sigma), mode="reflect")
    peak = np.abs(field).max()
    if peak > 0:
        field = field / peak * (cfg.warp_magnitude / 2.0)
    return torch.from_numpy(field.astype(np.float32))


def _add_cracks(img: np.ndarray, fg: np.ndarray, rng, count: int) -> np.ndarray:
    """Draw thin zero-intensity curves through the foreground."""
    h, w = img.shape
    fg_idx = np.argwhere(fg)
    if len(fg_idx) < 2:
        return img
    for _ in range(count):
        a = fg_idx[rng.integers(len(fg_idx))].astype(np.float64)
        b = fg_idx[rng.integers(len(fg_idx))].astype(np.float64)
        mid = (a + b) / 2 + rng.uniform(-0.15, 0.15, size=2) * [h, w]
        steps = int(2 * max(h, w))
        t = np.linspace(0.0, 1.0, steps)[:, None]
        # quadratic Bezier through the jittered midpoint
        path = ((1 - t) ** 2) * a + 2 * t * (1 - t) * mid + (t ** 2) * b
        rr = np.clip(np.round(path[:, 0]).astype(int), 0, h - 1)
        cc = np.clip(np.round(path[:, 1]).astype(int), 0, w - 1)
        img[rr, cc] = 0.0
        if rng.random() < 0.5:
            img[np.clip(rr + 1, 0, h - 1), cc] = 0.0
    return img


def _slice_landmarks(fg: np.ndarray, gt_field: torch.Tensor, rng,
                     num: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Seeded target-side points on the foreground, >= 8 px from borders,
    mapped through the ground-truth field to source space."""
    h, w = fg.shape
    margin = LANDMARK_BORDER_MARGIN
    eligible = fg.copy()
    eligible[:margin, :] = False
    eligible[-margin:, :] = False
    eligible[:, :margin] = False
    eligible[:, -margin:] = False
    candidates = np.argwhere(eligible)
    if len(candidates) < num:
        raise CoreError("synthetic slice too small to place landmarks away "
                        "from the border")
    pick = rng.choice(len(candidates), size=num, replace=False)
    tgt = torch.from_numpy(candidates[pick].astype(np.float32))
    src = warp.transport_landmarks(tgt, gt_field)
    inside = ((src[:, 0] >= 0) & (src[:, 0] <= h - 1)
              & (src[:, 1] >= 0) & (src[:, 1] <= w - 1))
    return src[inside], tgt[inside]


def generate_synthetic_stack(cfg: SyntheticConfig) -> list[PairedSample]:
    """Build a coherent stack of paired samples with full ground truth.

    One base anatomy is evolved through the stack by smooth index-dependent
    deformations (plus slow shading drift), so neighbor slices relate by a
    small diffeomorphic warp the way serial sections do. Each slice then gets
    its own ground-truth source warp, contrast transform, and artifacts.
    """
    rng = np.random.default_rng(cfg.seed)
    n, h, w = cfg.num_slices, cfg.height, cfg.width

    # base anatomy: noisy ellipse outline, four tissue classes from texture
    # quantiles, softened so intensities stay band-limited under warping
    boundary = _smooth_stack_noise(rng, (h, w), (h / 8.0, w / 8.0))
    tissue = _smooth_stack_noise(rng, (h, w), (6.0, 6.0))
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    q = ((rows - cr) / (0.40 * h)) ** 2 + ((cols - cc) / (0.42 * w)) ** 2
    fg0 = (q + 0.25 * boundary) < 1.0
    labels0 = np.zeros((h, w), dtype=np.int64)
    inside = tissue[fg0]
    if inside.size:
        cuts = np.quantile(inside, [0.25, 0.5, 0.75])
        labels0[fg0] = 1 + np.searchsorted(cuts, tissue[fg0])
    base = gaussian_filter(_LABEL_INTENSITY[labels0], 0.9, mode="nearest")
    # fine anatomy-attached texture: it rides along under every warp, so
    # alignment (not appearance averaging) is what correlation rewards
    fine = _smooth_stack_noise(rng, (h, w), (1.2, 1.2)) * 0.08
    apod = gaussian_filter(fg0.astype(np.float64), 1.2, mode="constant")
    base_img = torch.from_numpy((base + fine) * apod).float()
    labels0_t = torch.from_numpy(labels0)

    # geometric evolution along the index: a bounded smooth displacement walk
    # (global drift plus nonlinear motion), so consecutive slices differ by
    # roughly a pixel or two of smooth warp rather than by fresh texture
    evo = gaussian_filter(rng.standard_normal((2, n, h, w)),
                          (0, 2.5, 12.0, 12.0), mode="reflect")
    peak = np.abs(evo).max()
    if peak > 0:
        evo = evo / peak * 5.0
    drift = gaussian_filter(rng.standard_normal((2, n)), (0, 2.5),
                            mode="reflect") * 2.0
    evo = evo + drift[:, :, None, None]

    shading = _smooth_stack_noise(rng, (n, h, w), (2.0, h / 6.0, w / 6.0))
    # small per-slice residual texture on top of the anatomy-attached detail
    grain = _smooth_stack_noise(rng, (n, h, w), (2.5, 1.2, 1.2)) * 0.02

    ident = core.identity_grid(h, w)
    samples = []
    for k in range(n):
        evolution = ident + torch.from_numpy(evo[:, k].astype(np.float32))
        slice_img = warp.resample(base_img, evolution)
        labels_t = warp.resample_labels(labels0_t, evolution)
        labels = labels_t.numpy()
        fg = labels > 0

        soft_fg = gaussian_filter(fg.astype(np.float64), 1.2, mode="constant")
        target_np = slice_img.numpy() + (0.08 * shading[k] + grain[k]) * soft_fg
        target = core.normalize_intensities(np.clip(target_np, 0.0, None))

        psi = _make_gt_svf(rng, cfg)
        phi_fwd = warp.upsample_field(warp.integrate_svf(psi), h, w)
        gt_field = warp.upsample_field(warp.integrate_svf(-psi), h, w)

        src_pre = apply_contrast(target, cfg.contrast_mode)
        source_np = warp.resample(src_pre, phi_fwd, padding="border").numpy()
        source_seg = warp.resample_labels(labels_t, phi_fwd)

        if cfg.artifact_level > 0:
            bias = _smooth_stack_noise(rng, (h, w), (h / 6.0, w / 6.0))
            source_np = source_np * (1.0 + 0.5 * cfg.artifact_level * bias)
            source_fg = (source_seg.numpy() > 0)
            cracks = int(round(4 * cfg.artifact_level))
            source_np = _add_cracks(source_np, source_fg, rng, cracks)
        source = core.normalize_intensities(np.clip(source_np, 0.0, 1.0))

        lm_src, lm_tgt = _slice_landmarks(fg, gt_field, rng, cfg.num_landmarks)
        samples.append(PairedSample(
            source=source.float(), target=target.float(),
            tissue_mask=torch.from_numpy(fg),
            source_seg=source_seg, target_seg=labels_t,
            landmarks_src=lm_src, landmarks_tgt=lm_tgt,
            ground_truth_field=gt_field, index=k))
    return samples


# --------------------------------------------------------------------------- #
# On-disk stacks
# --------------------------------------------------------------------------- #

def save_stack(samples: list[PairedSample], out_dir,
               manifest_entries: Optional[dict] = None) -> None:
    """Write a stack in the canonical directory layout.

    source/NNN.png, target/NNN.png plus mask/, seg_source/, seg_target/,
    landmarks/NNN.csv and gt_field/NNN.sbrf for whatever annotations exist,
    and a text `manifest` recording the provided entries.
    """
    out = Path(out_dir)
    for k, s in enumerate(samples):
        name = f"{k:03d}"
        (out / "source").mkdir(parents=True, exist_ok=True)
        (out / "target").mkdir(exist_ok=True)
        core.save_image(out / "source" / f"{name}.png", s.source)
        core.save_image(out / "target" / f"{name}.png", s.target)
        if s.tissue_mask is not None:
            (out / "mask").mkdir(exist_ok=True)
            core.save_mask(out / "mask" / f"{name}.png", s.tissue_mask)
        if s.source_seg is not None:
            (out / "seg_source").mkdir(exist_ok=True)
            core.save_labels(out / "seg_source" / f"{name}.png", s.source_seg)
        if s.target_seg is not None:
            (out / "seg_target").mkdir(exist_ok=True)
            core.save_labels(out / "seg_target" / f"{name}.png", s.target_seg)
        if s.has_landmarks():
            (out / "landmarks").mkdir(exist_ok=True)
            core.save_landmarks(out / "landmarks" / f"{name}.csv",
                                s.landmarks_src, s.landmarks_tgt)
        if s.ground_truth_field is not None:
            (out / "gt_field").mkdir(exist_ok=True)
            core.save_field(out / "gt_field" / f"{name}.sbrf",
                            s.ground_truth_field)
    lines = [f"num_slices = {len(samples)}"]
    for key, value in (manifest_entries or {}).items():
        lines.append(f"{key} = {value}")
    (out / "manifest").write_text("\n".join(lines) + "\n")


def _optional(loader, path):
    return loader(path) if path.exists() else None


def load_stack(stack_dir) -> list[PairedSample]:
    """Load a stack directory; samples are sorted by slice index and shapes
    validated pairwise."""
    root = Path(stack_dir)
    tgt_dir = root / "target"
    src_dir = root / "source"
    if not tgt_dir.is_dir() or not src_dir.is_dir():
        raise CoreError(f"{stack_dir}: missing source/ or target/ directory")
    names = sorted(p.stem for p in tgt_dir.glob("*.png"))
    if not names:
        raise CoreError(f"{stack_dir}: no target slices found")
    for p in src_dir.glob("*.png"):
        if p.stem not in names:
            raise CoreError(f"slice {p.stem}: missing target image")

    samples = []
    for k, name in enumerate(names):
        src_path = src_dir / f"{name}.png"
        if not src_path.exists():
            raise CoreError(f"slice {name}: missing source image")
        source = core.load_image(src_path).float()
        target = core.load_image(tgt_dir / f"{name}.png").float()
        if source.shape != target.shape:
            raise CoreError(f"slice {name}: source {tuple(source.shape)} vs target "
                            f"{tuple(target.shape)} shape mismatch")
        mask = _optional(core.load_mask, root / "mask" / f"{name}.png")
        seg_s = _optional(core.load_labels, root / "seg_source" / f"{name}.png")
        seg_t = _optional(core.load_labels, root / "seg_target" / f"{name}.png")
        gt = _optional(core.load_field, root / "gt_field" / f"{name}.sbrf")
        lm_path = root / "landmarks" / f"{name}.csv"
        lm_src = lm_tgt = None
        if lm_path.exists():
            lm_src, lm_tgt = core.load_landmarks(lm_path)
        samples.append(PairedSample(
            source=source, target=target, tissue_mask=mask,
            source_seg=seg_s, target_seg=seg_t,
            landmarks_src=lm_src, landmarks_tgt=lm_tgt,
            ground_truth_field=gt, index=k))
    return samples


# --------------------------------------------------------------------------- #
# Pair sampling and augmentation
# --------------------------------------------------------------------------- #

def sample_neighbor_indices(num_slices: int, max_offset: int,
                            rng: np.random.Generator) -> Iterator[tuple[int, int]]:
    """Endless stream of (i, i + d) with 1 <= |d| <= max_offset, both valid."""
    if num_slices < 2:
        raise CoreError("neighbor sampling needs a stack of length >= 2")
    while True:
        i = int(rng.integers(num_slices))
        offsets = [d for d in range(-max_offset, max_offset + 1)
                   if d != 0 and 0 <= i + d < num_slices]
        d = offsets[int(rng.integers(len(offsets)))]
        yield i, i + d


def sample_neighbor_pairs(stack: list[PairedSample], max_offset: int = 3,
                          rng: Optional[np.random.Generator] = None
                          ) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Stream of target-modality neighbor image pairs for intra-modality
    registration training."""
    rng = rng if rng is not None else np.random.default_rng()
    for i, j in sample_neighbor_indices(len(stack), max_offset, rng):
        yield stack[i].target, stack[j].target


def similarity_field(height: int, width: int, rotation_deg: float = 0.0,
                     scale: float = 1.0, shift=(0.0, 0.0)) -> torch.Tensor:
    """Sampling map of a similarity transform about the image center:
    phi(x) = scale * R(x - c) + c + shift."""
    if rotation_deg == 0.0 and scale == 1.0 and shift[0] == 0.0 and shift[1] == 0.0:
        return core.identity_grid(height, width)
    theta = math.radians(rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    grid = core.identity_grid(height, width)
    cr, cc = (height - 1) / 2.0, (width - 1) / 2.0
    dr = grid[0] - cr
    dc = grid[1] - cc
    out_r = scale * (cos_t * dr - sin_t * dc) + cr + shift[0]
    out_c = scale * (sin_t * dr + cos_t * dc) + cc + shift[1]
    return torch.stack([out_r, out_c], dim=0)


def nonlinear_field(height: int, width: int, control: torch.Tensor) -> torch.Tensor:
    """Dense field from a coarse (2, gh, gw) displacement control grid,
    bilinearly upsampled over the full image extent (borders included)."""
    if control.ndim != 3 or control.shape[0] != 2:
        raise CoreError("nonlinear_field: control grid must be (2, gh, gw)")
    dense = torch.nn.functional.interpolate(
        control.unsqueeze(0), size=(height, width), mode="bilinear",
        align_corners=True)[0]
    return core.identity_grid(height, width) + dense


def draw_augmentation_field(height: int, width: int, cfg: AugmentationConfig,
                            rng: np.random.Generator,
                            bound_scale: float = 1.0) -> torch.Tensor:
    """Draw one random augmentation field: a similarity transform composed
    with a smooth nonlinear warp from the coarse control grid.

    ``bound_scale`` shrinks every bound, for the small independent
    perturbations used on top of matched augmentation in paired training.
    All-zero bounds give the exact identity grid.
    """
    mr = cfg.max_rotation * bound_scale
    ms = cfg.max_scale_dev * bound_scale
    mt = cfg.max_shift * bound_scale
    sig = cfg.nonlinear_sigma * bound_scale

    rot = float(rng.uniform(-mr, mr)) if mr > 0 else 0.0
    scale = float(rng.uniform(1 - ms, 1 + ms)) if ms > 0 else 1.0
    shift = (float(rng.uniform(-mt, mt)), float(rng.uniform(-mt, mt))) \
        if mt > 0 else (0.0, 0.0)
    sim = similarity_field(height, width, rot, scale, shift)

    gh, gw, gc = cfg.nonlinear_grid
    if sig > 0:
        control = torch.from_numpy(
            rng.normal(0.0, sig, size=(gc, gh, gw)).astype(np.float32))
        nl = nonlinear_field(height, width, control)
        return warp.compose(nl, sim)
    return sim


def random_augmentation(img: torch.Tensor, cfg: AugmentationConfig,
                        rng: np.random.Generator,
                        bound_scale: float = 1.0
                        ) -> tuple[torch.Tensor, torch.Tensor]:
    """Randomly warp an image; returns the warped image and the applied
    sampling field so ground-truth bookkeeping stays exact."""
    h, w = img.shape[-2:]
    field = draw_augmentation_field(h, w, cfg, rng, bound_scale)
    return warp.resample(img, field, padding="zeros"), field
