"""Diffeomorphic deformation numerics.

Velocity-field integration by scaling and squaring, field composition and
upsampling, differentiable resampling, Jacobians, and landmark transport.
All operations are pure functions of torch tensors and differentiable where
the contract requires it (``resample``, ``integrate_svf``).

Interpolation is a hand-rolled gather-based bilinear kernel rather than
``grid_sample``: sampling at exactly integer coordinates then returns exact
pixel values, which makes identity warps bit-exact instead of
almost-identical after a normalized-coordinate roundtrip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import CoreError, identity_grid, half_shape


@dataclass
class IntegratorConfig:
    num_squarings: int = 8
    min_squarings: int = 4

    def __post_init__(self):
        if not (self.num_squarings >= self.min_squarings >= 1):
            raise CoreError(
                f"IntegratorConfig: need num_squarings >= min_squarings >= 1, "
                f"got {self.num_squarings} / {self.min_squarings}")


DEFAULT_INTEGRATOR = IntegratorConfig()


def _batched(t: torch.Tensor, channels: int, what: str) -> tuple[torch.Tensor, bool]:
    """Accept (C, H, W) or (B, C, H, W); return (B, C, H, W) plus a flag."""
    if t.ndim == 3:
        if t.shape[0] != channels:
            raise CoreError(f"{what}: expected {channels} channels, got {t.shape[0]}")
        return t.unsqueeze(0), True
    if t.ndim == 4:
        if t.shape[1] != channels:
            raise CoreError(f"{what}: expected {channels} channels, got {t.shape[1]}")
        return t, False
    raise CoreError(f"{what}: expected 3 or 4 dims, got shape {tuple(t.shape)}")


def bilinear_sample(values: torch.Tensor, coords: torch.Tensor,
                    padding: str = "zeros") -> torch.Tensor:
    """Sample ``values`` (B, C, H, W) at absolute (row, col) ``coords`` (B, 2, h, w).

    padding 'zeros': out-of-domain taps contribute zero. padding 'border':
    coordinates are clamped into the domain first. Differentiable w.r.t. both
    values and coordinates.
    """
    if padding not in ("zeros", "border"):
        raise CoreError(f"bilinear_sample: unknown padding '{padding}'")
    b, ch, h, w = values.shape
    rr = coords[:, 0]
    cc = coords[:, 1]
    if padding == "border":
        rr = rr.clamp(0, h - 1)
        cc = cc.clamp(0, w - 1)
    r0f = rr.floor()
    c0f = cc.floor()
    fr = (rr - r0f).unsqueeze(1)
    fc = (cc - c0f).unsqueeze(1)
    r0 = r0f.long()
    c0 = c0f.long()

    flat = values.reshape(b, ch, h * w)

    def tap(ri, ci):
        inside = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        idx = (ri.clamp(0, h - 1) * w + ci.clamp(0, w - 1)).reshape(b, 1, -1)
        got = flat.gather(2, idx.expand(b, ch, -1)).reshape(b, ch, *ri.shape[1:])
        if padding == "zeros":
            got = got * inside.unsqueeze(1).to(got.dtype)
        return got

    return (tap(r0, c0) * (1 - fr) * (1 - fc)
            + tap(r0, c0 + 1) * (1 - fr) * fc
            + tap(r0 + 1, c0) * fr * (1 - fc)
            + tap(r0 + 1, c0 + 1) * fr * fc)


def compose(phi_outer: torch.Tensor, phi_inner: torch.Tensor) -> torch.Tensor:
    """result(x) = phi_inner evaluated (bilinearly, border-clamped) at phi_outer(x).

    Used both for the squaring step of the integrator and for chaining
    augmentation warps.
    """
    outer, squeeze = _batched(phi_outer, 2, "compose: outer field")
    inner, _ = _batched(phi_inner, 2, "compose: inner field")
    if outer.shape != inner.shape:
        raise CoreError(f"compose: field shapes differ, {tuple(phi_outer.shape)} vs "
                        f"{tuple(phi_inner.shape)}")
    out = bilinear_sample(inner, outer, padding="border")
    return out.squeeze(0) if squeeze else out


def integrate_svf(psi: torch.Tensor,
                  cfg: IntegratorConfig = DEFAULT_INTEGRATOR) -> torch.Tensor:
    """Integrate a stationary velocity field into a deformation by scaling
    and squaring: scale to a small deformation, then square K times.

    K starts at ``cfg.num_squarings`` and is raised until the scaled field
    moves at most 0.5 px, which keeps the first step a small deformation.
    """
    field, squeeze = _batched(psi, 2, "integrate_svf: velocity field")
    if not torch.isfinite(field).all():
        raise CoreError("integrate_svf: velocity field contains non-finite values")
    _, _, h, w = field.shape
    peak = float(field.detach().abs().max())
    k = cfg.num_squarings
    if peak / (2.0 ** k) > 0.5:
        k = max(k, math.ceil(math.log2(peak / 0.5)))
    grid = identity_grid(h, w, dtype=field.dtype, device=field.device)
    phi = grid.unsqueeze(0) + field / (2.0 ** k)
    for _ in range(k):
        phi = bilinear_sample(phi, phi, padding="border")
    return phi.squeeze(0) if squeeze else phi


def upsample_field(phi_half: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Linearly upsample a half-resolution deformation to full resolution.

    The displacement part is interpolated and scaled by the resolution ratio,
    then re-added to the full-resolution identity grid.
    """
    field, squeeze = _batched(phi_half, 2, "upsample_field: field")
    _, _, h, w = field.shape
    if half_shape(out_h, out_w) != (h, w):
        raise CoreError(f"upsample_field: {h}x{w} field does not pair with a "
                        f"{out_h}x{out_w} full-resolution image")
    disp = field - identity_grid(h, w, dtype=field.dtype, device=field.device)
    disp = F.interpolate(disp, size=(out_h, out_w), mode="bilinear",
                         align_corners=True)
    scale = torch.tensor([out_h / h, out_w / w], dtype=field.dtype,
                         device=field.device).view(1, 2, 1, 1)
    out = disp * scale + identity_grid(out_h, out_w, dtype=field.dtype,
                                       device=field.device)
    return out.squeeze(0) if squeeze else out


def resample(image: torch.Tensor, phi: torch.Tensor,
             padding: str = "zeros") -> torch.Tensor:
    """Warp an image: output(x) = bilinear sample of image at phi(x)."""
    if image.ndim == 2:
        if phi.ndim != 3:
            raise CoreError("resample: unbatched image needs an unbatched field")
        if phi.shape[-2:] != image.shape:
            raise CoreError(f"resample: field {tuple(phi.shape[-2:])} vs image "
                            f"{tuple(image.shape)} shape mismatch")
        out = bilinear_sample(image[None, None], phi[None], padding=padding)
        return out[0, 0]
    if image.ndim == 4:
        field, _ = _batched(phi, 2, "resample: field")
        if field.shape[-2:] != image.shape[-2:] or field.shape[0] != image.shape[0]:
            raise CoreError("resample: batched field/image shape mismatch")
        return bilinear_sample(image, field, padding=padding)
    raise CoreError(f"resample: expected (H, W) or (B, C, H, W) image, got "
                    f"{tuple(image.shape)}")


def resample_labels(seg: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbor warp of an integer label map; out-of-domain pixels get
    background (0)."""
    if seg.ndim != 2 or phi.ndim != 3:
        raise CoreError("resample_labels: expected (H, W) labels and (2, H, W) field")
    if phi.shape[-2:] != seg.shape:
        raise CoreError(f"resample_labels: field {tuple(phi.shape[-2:])} vs labels "
                        f"{tuple(seg.shape)} shape mismatch")
    h, w = seg.shape
    rr = phi[0].round().long()
    cc = phi[1].round().long()
    inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    idx = rr.clamp(0, h - 1) * w + cc.clamp(0, w - 1)
    out = seg.reshape(-1)[idx.reshape(-1)].reshape(h, w)
    return torch.where(inside, out, torch.zeros_like(out))


def jacobian_determinant(phi: torch.Tensor) -> torch.Tensor:
    """Per-pixel Jacobian determinant of a deformation field.

    Central differences at interior pixels, one-sided at the boundary
    (torch.gradient does exactly this with unit spacing).
    """
    field, squeeze = _batched(phi, 2, "jacobian_determinant: field")
    if not torch.isfinite(field).all():
        raise CoreError("jacobian_determinant: field contains non-finite values")
    d_rr, d_rc = torch.gradient(field[:, 0], dim=(-2, -1))
    d_cr, d_cc = torch.gradient(field[:, 1], dim=(-2, -1))
    det = d_rr * d_cc - d_rc * d_cr
    return det.squeeze(0) if squeeze else det


def displacement(phi: torch.Tensor) -> torch.Tensor:
    """phi(x) - x, the displacement part of a deformation field."""
    field, squeeze = _batched(phi, 2, "displacement: field")
    grid = identity_grid(field.shape[-2], field.shape[-1], dtype=field.dtype,
                        device=field.device)
    out = field - grid.unsqueeze(0)
    return out.squeeze(0) if squeeze else out


def transport_landmarks(points: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
    """Map target-space points (K, 2) through a field by bilinear interpolation,
    giving their predicted locations in the moving/source image."""
    if points.ndim != 2 or points.shape[1] != 2:
        raise CoreError(f"transport_landmarks: expected (K, 2) points, got "
                        f"{tuple(points.shape)}")
    if phi.ndim != 3 or phi.shape[0] != 2:
        raise CoreError("transport_landmarks: expected an unbatched (2, H, W) field")
    h, w = phi.shape[-2:]
    pts = points.to(phi.dtype)
    if bool((pts[:, 0] < 0).any() or (pts[:, 0] > h - 1).any()
            or (pts[:, 1] < 0).any() or (pts[:, 1] > w - 1).any()):
        raise CoreError("transport_landmarks: point outside the image domain")
    coords = pts.t().reshape(1, 2, -1, 1)
    sampled = bilinear_sample(phi.unsqueeze(0), coords, padding="border")
    return sampled.reshape(2, -1).t()
