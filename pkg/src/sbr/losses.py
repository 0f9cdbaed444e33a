"""Scalar objectives: LNCC, velocity-gradient regularizer, L1 registration
loss, patch-contrastive losses, the combined synthesis-through-registration
loss, and the NMI / Dice / LSGAN baseline and extension losses.

All functions are stateless and differentiable along the training paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .core import CoreError

EPS_VARIANCE = 1e-5
EPS_DICE = 1e-5


@dataclass
class LossWeights:
    lambda_geo: float = 0.02
    lambda_r: float = 1.0
    tau: float = 0.05
    lambda_gan: float = 0.0

    def __post_init__(self):
        if self.tau <= 0:
            raise CoreError(f"LossWeights: tau must be > 0, got {self.tau}")
        for name in ("lambda_geo", "lambda_r", "lambda_gan"):
            if getattr(self, name) < 0:
                raise CoreError(f"LossWeights: {name} must be >= 0")


@dataclass
class PatchDescriptorSet:
    """Per-layer feature vectors at sampled locations and their projected
    unit-norm embeddings.

    ``locations[l]`` is (N, 2) integer (row, col) in layer-l grid coordinates,
    ``features[l]`` is (N, C_l) raw features, ``embeddings[l]`` is (N, D)
    unit-norm projections. N is identical across layers.
    """

    locations: list = dc_field(default_factory=list)
    features: list = dc_field(default_factory=list)
    embeddings: list = dc_field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.embeddings)

    @property
    def num_patches(self) -> int:
        return 0 if not self.embeddings else self.embeddings[0].shape[0]

    def validate(self) -> "PatchDescriptorSet":
        n = self.num_patches
        for l, z in enumerate(self.embeddings):
            if z.shape[0] != n:
                raise CoreError(f"descriptor set: layer {l} has {z.shape[0]} patches, "
                                f"expected {n}")
            norms = z.norm(dim=1)
            if bool((norms - 1).abs().max() > 1e-5):
                raise CoreError(f"descriptor set: layer {l} embeddings not unit-norm")
        return self


def _pair_to_bchw(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise CoreError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 2:
        return a[None, None], b[None, None]
    if a.ndim == 4:
        return a, b
    raise CoreError(f"{what}: expected (H, W) or (B, 1, H, W) images")


def lncc(a: torch.Tensor, b: torch.Tensor, window: int = 9) -> torch.Tensor:
    """Local normalized cross-correlation in [-1, 1].

    Mean over all fully-contained window positions of the windowed Pearson
    correlation; per-window variances are floored at EPS_VARIANCE. The
    training term is the negation.
    """
    if window < 3 or window % 2 == 0:
        raise CoreError(f"lncc: window must be odd and >= 3, got {window}")
    x, y = _pair_to_bchw(a, b, "lncc")
    if x.shape[-2] < window or x.shape[-1] < window:
        raise CoreError(f"lncc: image smaller than the {window}px window")
    mu_x = F.avg_pool2d(x, window, stride=1)
    mu_y = F.avg_pool2d(y, window, stride=1)
    var_x = F.avg_pool2d(x * x, window, stride=1) - mu_x * mu_x
    var_y = F.avg_pool2d(y * y, window, stride=1) - mu_y * mu_y
    cov = F.avg_pool2d(x * y, window, stride=1) - mu_x * mu_y
    corr = cov / torch.sqrt(var_x.clamp_min(EPS_VARIANCE)
                            * var_y.clamp_min(EPS_VARIANCE))
    return corr.mean()


def svf_gradient_norm(psi: torch.Tensor) -> torch.Tensor:
    """Mean Euclidean norm of the spatial gradient of a velocity field.

    Forward differences; the mean runs over the positions where both
    forward differences exist. Enters registration training scaled by
    2 * lambda_r.
    """
    if psi.ndim == 3:
        v = psi.unsqueeze(0)
    elif psi.ndim == 4:
        v = psi
    else:
        raise CoreError(f"svf_gradient_norm: expected (2, h, w) or (B, 2, h, w), "
                        f"got {tuple(psi.shape)}")
    if not torch.isfinite(v).all():
        raise CoreError("svf_gradient_norm: non-finite velocity field")
    d_r = v[:, :, 1:, :-1] - v[:, :, :-1, :-1]
    d_c = v[:, :, :-1, 1:] - v[:, :, :-1, :-1]
    sq = (d_r * d_r).sum(dim=1) + (d_c * d_c).sum(dim=1)
    return torch.sqrt(sq + 1e-12).mean()


def registration_l1(target: torch.Tensor, warped_synth: torch.Tensor,
                    mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean absolute intensity difference over the image domain (or a mask)."""
    t, s = _pair_to_bchw(target, warped_synth, "registration_l1")
    diff = (t - s).abs()
    if mask is None:
        return diff.mean()
    m = mask.to(diff.dtype)
    if m.ndim == 2:
        m = m[None, None]
    if m.shape[-2:] != diff.shape[-2:]:
        raise CoreError("registration_l1: mask shape mismatch")
    total = m.expand_as(diff).sum()
    if total == 0:
        raise CoreError("registration_l1: empty mask")
    return (diff * m).sum() / total


def patch_nce(query: PatchDescriptorSet, reference: PatchDescriptorSet,
              tau: float) -> torch.Tensor:
    """Noise-contrastive loss over matched patch embeddings.

    For every layer and location, the positive is the reference embedding at
    the same location; negatives are the reference embeddings at the other
    sampled locations of the same image. The softmax denominator includes
    the positive, so a single location (N = 1) gives exactly zero.
    """
    if query.num_layers != reference.num_layers:
        raise CoreError("patch_nce: layer count mismatch between query and reference")
    n = query.num_patches
    if n == 0 or reference.num_patches != n:
        raise CoreError(f"patch_nce: need matching N >= 1, got {n} vs "
                        f"{reference.num_patches}")
    for l, (lq, lr) in enumerate(zip(query.locations, reference.locations)):
        if lq.shape != lr.shape or not torch.equal(lq, lr):
            raise CoreError(f"patch_nce: layer {l} locations differ between query "
                            f"and reference")
    total = None
    labels = torch.arange(n)
    for zq, zr in zip(query.embeddings, reference.embeddings):
        logits = (zq @ zr.t()) / tau
        term = F.cross_entropy(logits, labels.to(logits.device))
        total = term if total is None else total + term
    return total


def geometric_loss(extract: Callable[[torch.Tensor, int], PatchDescriptorSet],
                   source: torch.Tensor, translated: torch.Tensor,
                   translated_warped: torch.Tensor, target: torch.Tensor,
                   tau: float, seed: int = 0) -> torch.Tensor:
    """Structure-preservation term: one contrastive loss between source and
    translated images, another between the registered and target images.

    ``extract(image, seed)`` builds a descriptor set; the same seed draws the
    same locations, which pairs the positives of each term at shared sites.
    """
    q1 = extract(translated, seed)
    r1 = extract(source, seed)
    q2 = extract(translated_warped, seed + 1)
    r2 = extract(target, seed + 1)
    return patch_nce(q1, r1, tau) + patch_nce(q2, r2, tau)


def sbr_total_loss(extract, source, translated, translated_warped, target,
                   weights: LossWeights, mask: Optional[torch.Tensor] = None,
                   seed: int = 0) -> tuple[torch.Tensor, dict]:
    """Combined translation objective: L1 registration term plus the weighted
    geometric-consistency term. Returns (total, parts) with float parts for
    logging. When lambda_geo is 0 the contrastive term is skipped entirely
    and the total equals the L1 term.
    """
    l1 = registration_l1(target, translated_warped, mask=mask)
    if weights.lambda_geo == 0:
        geo = torch.zeros((), dtype=l1.dtype, device=l1.device)
        total = l1
    else:
        geo = geometric_loss(extract, source, translated, translated_warped,
                             target, weights.tau, seed=seed)
        total = l1 + weights.lambda_geo * geo
    return total, {"loss": float(total.detach()), "loss_l1": float(l1.detach()),
                   "loss_geo": float(geo.detach())}


def _bin_position(x: torch.Tensor, bins: int):
    """Continuous bin coordinate of values in [0, 1]: lower bin index (long)
    and the fractional weight of the upper neighbor."""
    t = x.reshape(-1).clamp(0.0, 1.0) * (bins - 1)
    i0 = t.floor().clamp(0, bins - 2).long()
    return i0, t - i0.to(t.dtype)


def _pv_joint(a: torch.Tensor, b: torch.Tensor, bins: int) -> torch.Tensor:
    """Soft joint histogram with linear partial-volume binning.

    Each pixel splits its unit mass over the 2x2 bin block around its pair
    of continuous bin coordinates. The split couples the two fractions so
    that equal fractions put all mass on the block diagonal: identical
    images then produce an exactly diagonal joint histogram (H(A, A) =
    H(A)), while the marginals stay the per-image linear assignments and
    the whole map remains piecewise-linear in the intensities.
    """
    ia, fa = _bin_position(a, bins)
    ib, fb = _bin_position(b, bins)
    w11 = torch.minimum(fa, fb)
    w00 = torch.minimum(1.0 - fa, 1.0 - fb)
    w10 = (fa - fb).clamp_min(0.0)   # mass at (ia + 1, ib)
    w01 = (fb - fa).clamp_min(0.0)   # mass at (ia, ib + 1)
    flat = torch.zeros(bins * bins, dtype=fa.dtype, device=fa.device)
    flat = flat.scatter_add(0, ia * bins + ib, w00)
    flat = flat.scatter_add(0, (ia + 1) * bins + ib, w10)
    flat = flat.scatter_add(0, ia * bins + ib + 1, w01)
    flat = flat.scatter_add(0, (ia + 1) * bins + ib + 1, w11)
    return flat.reshape(bins, bins) / fa.shape[0]


def _entropy(p: torch.Tensor) -> torch.Tensor:
    return -(p * torch.log(p.clamp_min(1e-12))).sum()


def nmi(a: torch.Tensor, b: torch.Tensor, bins: int = 20) -> torch.Tensor:
    """Normalized mutual information (H(A) + H(B)) / H(A, B) in (1, 2].

    Uses a soft joint histogram over [0, 1]^2 with linear partial-volume bin
    assignment so the measure is usable as a training loss. Constant inputs
    are defined as 1.
    """
    if a.shape != b.shape:
        raise CoreError(f"nmi: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if bins < 2:
        raise CoreError(f"nmi: need at least 2 bins, got {bins}")
    if float((a.max() - a.min()).detach()) == 0.0 \
            or float((b.max() - b.min()).detach()) == 0.0:
        return torch.ones((), dtype=a.dtype)
    joint = _pv_joint(a, b, bins)
    h_a = _entropy(joint.sum(dim=1))
    h_b = _entropy(joint.sum(dim=0))
    h_ab = _entropy(joint)
    return (h_a + h_b) / h_ab


def one_hot(seg: torch.Tensor, num_classes: int = 5) -> torch.Tensor:
    """Integer label map (H, W) -> float one-hot (C, H, W)."""
    return F.one_hot(seg.long(), num_classes).permute(2, 0, 1).float()


def dice_loss(pred_onehot: torch.Tensor, tgt_onehot: torch.Tensor) -> torch.Tensor:
    """1 - mean soft Dice over foreground classes (channel 0 is background
    and excluded). Accepts soft one-hot maps for differentiability; a class
    absent from both maps scores 1 through the smoothing term.
    """
    if pred_onehot.shape != tgt_onehot.shape:
        raise CoreError("dice_loss: shape mismatch")
    if pred_onehot.ndim == 3:
        p, t = pred_onehot.unsqueeze(0), tgt_onehot.unsqueeze(0)
    else:
        p, t = pred_onehot, tgt_onehot
    p = p[:, 1:]
    t = t[:, 1:]
    inter = (p * t).sum(dim=(0, 2, 3))
    sizes = p.sum(dim=(0, 2, 3)) + t.sum(dim=(0, 2, 3))
    dice = (2 * inter + EPS_DICE) / (sizes + EPS_DICE)
    return 1.0 - dice.mean()


def lsgan_losses(disc_real_out: torch.Tensor,
                 disc_fake_out: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Least-squares GAN objectives from the discriminator's patch maps.

    disc_loss = 0.5 mean[(D(real) - 1)^2] + 0.5 mean[D(fake)^2];
    gen_loss = mean[(D(fake) - 1)^2].
    """
    gen_loss = ((disc_fake_out - 1.0) ** 2).mean()
    disc_loss = 0.5 * ((disc_real_out - 1.0) ** 2).mean() \
        + 0.5 * (disc_fake_out ** 2).mean()
    return gen_loss, disc_loss
