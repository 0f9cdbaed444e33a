"""Differentiable parametric pieces: the registration U-Net, the translation
generator with feature taps, per-layer projection heads, patch sampling, and
the optional patch discriminator.

Desk-scale sizes throughout; every net is a plain torch module so the
training loop owns all parameter mutation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import CoreError, half_shape
from .losses import PatchDescriptorSet


@dataclass
class RegNetConfig:
    levels: int = 4
    base_width: int = 16


@dataclass
class GeneratorConfig:
    base_width: int = 32
    num_resblocks: int = 4
    embed_dim: int = 256
    hidden_dim: int = 256

    @property
    def tap_channels(self) -> list:
        # input image, two downsampling convs, first and last residual blocks
        return [1, self.base_width, 2 * self.base_width,
                2 * self.base_width, 2 * self.base_width]


def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.LeakyReLU(0.2, inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.LeakyReLU(0.2, inplace=True),
    )


class RegistrationNet(nn.Module):
    """U-Net over the 2-channel concatenation of two same-shape images,
    emitting a 2-channel stationary velocity field at half input resolution.

    The final convolution is zero-initialized so an untrained network
    produces the identity deformation.
    """

    def __init__(self, config: RegNetConfig | None = None):
        super().__init__()
        self.config = config or RegNetConfig()
        widths = [self.config.base_width * (2 ** i) for i in range(self.config.levels)]
        self.downsample_factor = 2 ** (self.config.levels - 1)

        self.encoders = nn.ModuleList()
        cin = 2
        for w in widths:
            self.encoders.append(_conv_block(cin, w))
            cin = w
        self.decoders = nn.ModuleList()
        # decode back up to half resolution only (skip the full-res level)
        for i in range(self.config.levels - 2, 0, -1):
            self.decoders.append(_conv_block(widths[i + 1] + widths[i], widths[i]))
        # variance-preserving init: without normalization layers the default
        # init shrinks the input-dependent signal roughly tenfold per level,
        # leaving the head nothing but bias patterns to read
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, a=0.2,
                                        nonlinearity="leaky_relu")
                nn.init.zeros_(m.bias)
        self.head = nn.Conv2d(widths[1], 2, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.frozen = False

    def forward(self, fixed: torch.Tensor, moving: torch.Tensor) -> torch.Tensor:
        """Inverse-consistent velocity: the antisymmetrized two-pass field.

        Antisymmetrization gives swap-negation (psi(a, b) = -psi(b, a)) and
        an exactly zero field on identical inputs, so integrated forward and
        backward warps of a pair are exact inverses and a self-registration
        can never hallucinate a deformation. It also removes the degenerate
        optimum of an input-independent output: any constant component
        cancels between the two passes.
        """
        return 0.5 * (self._one_pass(fixed, moving)
                      - self._one_pass(moving, fixed))

    def _one_pass(self, fixed: torch.Tensor, moving: torch.Tensor) -> torch.Tensor:
        if fixed.shape != moving.shape:
            raise CoreError("RegistrationNet: fixed/moving shape mismatch")
        x = torch.cat([fixed, moving], dim=1)
        h, w = x.shape[-2:]
        f = self.downsample_factor
        pad_h = (f - h % f) % f
        pad_w = (f - w % f) % f
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h))

        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i < len(self.encoders) - 1:
                skips.append(x)
                x = F.avg_pool2d(x, 2)
        for dec in self.decoders:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear",
                              align_corners=True)
            x = dec(torch.cat([x, skip], dim=1))
        psi = self.head(x)
        hh, hw = half_shape(h, w)
        return psi[:, :, :hh, :hw]


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Translation network: two stride-2 downsampling convolutions, a chain
    of residual blocks, mirrored upsampling, sigmoid output.

    ``forward`` also returns the declared feature taps used for patch
    descriptors: the input image, both downsampling conv outputs, and the
    first and last residual block outputs.
    """

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = config or GeneratorConfig()
        bw = self.config.base_width
        self.down1 = nn.Sequential(
            nn.Conv2d(1, bw, 4, stride=2, padding=1),
            nn.InstanceNorm2d(bw),
            nn.ReLU(inplace=True),
        )
        self.down2 = nn.Sequential(
            nn.Conv2d(bw, 2 * bw, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * bw),
            nn.ReLU(inplace=True),
        )
        self.resblocks = nn.ModuleList(
            [ResBlock(2 * bw) for _ in range(self.config.num_resblocks)])
        self.up = nn.Sequential(
            nn.ConvTranspose2d(2 * bw, bw, 4, stride=2, padding=1),
            nn.InstanceNorm2d(bw),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(bw, bw, 4, stride=2, padding=1),
            nn.InstanceNorm2d(bw),
            nn.ReLU(inplace=True),
            nn.Conv2d(bw, 1, 3, padding=1),
            nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list]:
        h, w = x.shape[-2:]
        pad_h = (4 - h % 4) % 4
        pad_w = (4 - w % 4) % 4
        xin = F.pad(x, (0, pad_w, 0, pad_h)) if (pad_h or pad_w) else x

        taps = [x]
        y = self.down1(xin)
        h2, w2 = half_shape(h, w)
        taps.append(y[:, :, :h2, :w2])
        y = self.down2(y)
        h4, w4 = half_shape(h2, w2)
        taps.append(y[:, :, :h4, :w4])
        for i, block in enumerate(self.resblocks):
            y = block(y)
            if i == 0:
                taps.append(y[:, :, :h4, :w4])
        taps.append(y[:, :, :h4, :w4])
        out = self.up(y)[:, :, :h, :w]
        return out, taps


class ProjectionHeads(nn.Module):
    """One two-layer perceptron per feature tap, mapping raw descriptors to a
    shared embedding dimension, followed by unit-norm normalization."""

    def __init__(self, tap_channels: list, hidden_dim: int = 256,
                 embed_dim: int = 256):
        super().__init__()
        self.tap_channels = list(tap_channels)
        self.embed_dim = embed_dim
        self.mlps = nn.ModuleList([
            nn.Sequential(nn.Linear(c, hidden_dim), nn.ReLU(inplace=True),
                          nn.Linear(hidden_dim, embed_dim))
            for c in tap_channels
        ])

    def forward(self, features: list) -> list:
        if len(features) != len(self.mlps):
            raise CoreError(f"ProjectionHeads: got {len(features)} taps, "
                            f"expected {len(self.mlps)}")
        out = []
        for feat, mlp in zip(features, self.mlps):
            z = mlp(feat)
            out.append(F.normalize(z, dim=1, eps=1e-10))
        return out


class PatchGANDiscriminator(nn.Module):
    """Fully-convolutional patch critic: three stride-2 stages then a
    1-channel score map (strictly smaller than the input)."""

    def __init__(self, base_width: int = 32):
        super().__init__()
        bw = base_width
        self.net = nn.Sequential(
            nn.Conv2d(1, bw, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(bw, 2 * bw, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * bw),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * bw, 4 * bw, 4, stride=2, padding=1),
            nn.InstanceNorm2d(4 * bw),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * bw, 1, 4, stride=1, padding=1),
        )

    def forward(self, x):
        return self.net(x)


def predict_svf(reg: RegistrationNet, fixed: torch.Tensor,
                moving: torch.Tensor) -> torch.Tensor:
    """Run the registration net on a single (fixed, moving) image pair and
    return the (2, ceil(H/2), ceil(W/2)) velocity field."""
    if fixed.shape != moving.shape:
        raise CoreError("predict_svf: image shapes differ")
    psi = reg(fixed[None, None], moving[None, None])
    return psi[0]


def translate(gen: Generator, source: torch.Tensor) -> tuple[torch.Tensor, list]:
    """Translate a single image; returns the translated image plus the tap
    feature grids (each without the batch dimension)."""
    out, taps = gen(source[None, None])
    return out[0, 0], [t[0] for t in taps]


def discriminate(disc: PatchGANDiscriminator, image: torch.Tensor) -> torch.Tensor:
    return disc(image[None, None])[0, 0]


def sample_descriptors(taps: list, heads: ProjectionHeads, mask: torch.Tensor,
                       n: int, seed: int) -> PatchDescriptorSet:
    """Draw n seeded locations per tap from the tissue mask and build the
    descriptor set (raw features + unit-norm embeddings).

    Locations are drawn with replacement from the full-resolution foreground
    and mapped to each tap's grid by nearest-index scaling, so calling twice
    with the same seed (e.g., for the two images of a contrastive pair)
    yields the same sites.
    """
    if n < 1:
        raise CoreError(f"sample_descriptors: need n >= 1, got {n}")
    fg = torch.nonzero(mask)
    if fg.shape[0] == 0:
        raise CoreError("sample_descriptors: mask has no foreground pixels")
    mh, mw = mask.shape
    gen = torch.Generator().manual_seed(seed)

    out = PatchDescriptorSet()
    for tap in taps:
        if tap.ndim != 3:
            raise CoreError("sample_descriptors: taps must be (C, h, w)")
        pick = torch.randint(fg.shape[0], (n,), generator=gen)
        full_rc = fg[pick].to(torch.float64)
        th, tw = tap.shape[-2:]
        rows = torch.round(full_rc[:, 0] * (th / mh)).long().clamp(0, th - 1)
        cols = torch.round(full_rc[:, 1] * (tw / mw)).long().clamp(0, tw - 1)
        locs = torch.stack([rows, cols], dim=1)
        feats = tap[:, rows, cols].t()
        out.locations.append(locs)
        out.features.append(feats)
    out.embeddings = heads(out.features)
    return out


def state_checksum(module: nn.Module) -> str:
    """Order-stable sha256 over all parameter and buffer bytes."""
    digest = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        digest.update(key.encode())
        digest.update(state[key].detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    if hasattr(module, "frozen"):
        module.frozen = True
    return module


def registration_payload(reg: RegistrationNet, step: int, seed: int) -> dict:
    return {"kind": "registration", "config": asdict(reg.config),
            "state": reg.state_dict(), "step": step, "seed": seed}


def build_registration_net(payload: dict) -> RegistrationNet:
    if payload.get("kind") not in ("registration", "sbr"):
        raise CoreError("checkpoint does not contain registration weights")
    if payload["kind"] == "sbr":
        cfg = RegNetConfig(**payload["reg_config"])
        net = RegistrationNet(cfg)
        net.load_state_dict(payload["reg_state"])
    else:
        net = RegistrationNet(RegNetConfig(**payload["config"]))
        net.load_state_dict(payload["state"])
    return net


def build_generator(payload: dict) -> tuple[Generator, ProjectionHeads]:
    if payload.get("kind") != "sbr":
        raise CoreError("checkpoint does not contain generator weights")
    cfg = GeneratorConfig(**payload["gen_config"])
    gen = Generator(cfg)
    gen.load_state_dict(payload["gen_state"])
    heads = ProjectionHeads(cfg.tap_channels, cfg.hidden_dim, cfg.embed_dim)
    heads.load_state_dict(payload["heads_state"])
    return gen, heads
