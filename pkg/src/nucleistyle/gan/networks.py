"""Encoders, generator and discriminators of the content/attribute translation model.

All images enter and leave the networks as ``(N, 3, H, W)`` tensors in [0, 1];
internally they are mapped to [-1, 1].
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn
import torch.nn.functional as F


@dataclass
class NetConfig:
    image_size: int = 64
    content_channels: int = 64
    attr_dim: int = 8
    num_domains: int = 2
    width: int = 16
    dis_width: int = 16
    n_res: int = 3
    lr: float = 1e-4
    betas: tuple = (0.5, 0.999)
    batch_size: int = 8
    n_iter: int = 2000
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.image_size % 4 != 0 or self.image_size < 8:
            raise ValueError(f"image_size must be a multiple of 4 and >= 8, got {self.image_size}")
        if self.num_domains < 2:
            raise ValueError(f"num_domains must be >= 2, got {self.num_domains}")
        for name in ("content_channels", "attr_dim", "width", "dis_width", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @property
    def architecture(self):
        """Fields that fix parameter shapes; must match when loading a checkpoint."""
        return {k: getattr(self, k) for k in
                ("image_size", "content_channels", "attr_dim", "num_domains",
                 "width", "dis_width", "n_res")}


def domain_planes(domain: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Broadcast ``(N, K)`` one-hot vectors to ``(N, K, H, W)`` constant planes."""
    return domain[:, :, None, None].expand(-1, -1, height, width)


def _norm(kind, channels):
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    if kind == "layer":
        # normalizes over channels and space together, so per-channel offsets survive
        return nn.GroupNorm(1, channels)
    return nn.Identity()


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, kernel, stride, norm="instance", padding_mode="reflect"):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel, stride, kernel // 2, padding_mode=padding_mode)
        self.norm = _norm(norm, cout)

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class ResBlock(nn.Module):
    """Residual block. With ``extra`` > 0, conditioning planes are fused in after each norm.

    Constant planes fed before an instance norm would be normalized away, hence
    the 1x1 fuse convolutions behind the norms.
    """

    def __init__(self, channels, extra=0):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1, padding_mode="reflect")
        self.norm1 = nn.InstanceNorm2d(channels, affine=True)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1, padding_mode="reflect")
        self.norm2 = nn.InstanceNorm2d(channels, affine=True)
        self.fuse1 = nn.Conv2d(channels + extra, channels, 1) if extra else None
        self.fuse2 = nn.Conv2d(channels + extra, channels, 1) if extra else None

    def _fuse(self, fuse, h, cond):
        return h if fuse is None else fuse(torch.cat([h, cond], dim=1))

    def forward(self, x, cond=None):
        h = self._fuse(self.fuse1, self.norm1(self.conv1(x)), cond)
        h = self._fuse(self.fuse2, self.norm2(self.conv2(F.leaky_relu(h, 0.2))), cond)
        return x + h


class ContentEncoder(nn.Module):
    """Stem conv, two stride-2 blocks, residual blocks. Output is ``C_c x H/4 x W/4``."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        w = cfg.width
        self.stem = ConvBlock(3, w, 7, 1)
        self.down1 = ConvBlock(w, 2 * w, 3, 2)
        self.down2 = ConvBlock(2 * w, cfg.content_channels, 3, 2)
        self.res = nn.ModuleList(ResBlock(cfg.content_channels) for _ in range(cfg.n_res))

    def forward(self, x):
        h = self.down2(self.down1(self.stem(2 * x - 1)))
        for block in self.res:
            h = block(h)
        return h


class AttributeEncoder(nn.Module):
    """Four stride-2 blocks on image + domain planes, global pooling, (mu, logvar) heads."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        w = cfg.width
        chans = [3 + cfg.num_domains, w, 2 * w, 4 * w, 4 * w]
        self.blocks = nn.Sequential(*[
            ConvBlock(chans[i], chans[i + 1], 3, 2, norm=None, padding_mode="zeros") for i in range(4)
        ])
        self.mu = nn.Linear(chans[-1], cfg.attr_dim)
        self.logvar = nn.Linear(chans[-1], cfg.attr_dim)

    def forward(self, x, domain):
        h = torch.cat([2 * x - 1, domain_planes(domain, x.shape[2], x.shape[3])], dim=1)
        h = self.blocks(h).mean(dim=(2, 3))
        return self.mu(h), self.logvar(h)


class Generator(nn.Module):
    """Residual blocks conditioned on broadcast (z_a, domain), then two 2x upsampling blocks."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c, w = cfg.content_channels, cfg.width
        extra = cfg.attr_dim + cfg.num_domains
        self.res = nn.ModuleList(ResBlock(c, extra) for _ in range(cfg.n_res))
        self.up1 = ConvBlock(c + extra, 2 * w, 3, 1, norm="layer")
        self.up2 = ConvBlock(2 * w, w, 3, 1, norm="layer")
        self.out = nn.Conv2d(w, 3, 7, 1, 3, padding_mode="reflect")

    def forward(self, content, attr, domain):
        style = torch.cat([attr, domain], dim=1)
        h = content
        planes = domain_planes(style, h.shape[2], h.shape[3])
        for block in self.res:
            h = block(h, planes)
        h = F.interpolate(torch.cat([h, planes], dim=1), scale_factor=2, mode="nearest")
        h = self.up1(h)
        h = self.up2(F.interpolate(h, scale_factor=2, mode="nearest"))
        return (torch.tanh(self.out(h)) + 1) / 2


class ContentDiscriminator(nn.Module):
    """Classifies which domain a content code came from (logits over K)."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c, w = cfg.content_channels, cfg.dis_width
        self.net = nn.Sequential(
            nn.Conv2d(c, 2 * w, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 2 * w, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, cfg.num_domains, 1),
        )

    def forward(self, content):
        return self.net(content).mean(dim=(2, 3))


class DomainDiscriminator(nn.Module):
    """Patch real/fake scores for an image conditioned on its domain planes."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        w = cfg.dis_width
        self.net = nn.Sequential(
            nn.Conv2d(3 + cfg.num_domains, w, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 1, 3, 1, 1),
        )

    def forward(self, x, domain):
        h = torch.cat([2 * x - 1, domain_planes(domain, x.shape[2], x.shape[3])], dim=1)
        return self.net(h)


class TranslationNets(nn.Module):
    """The five networks as one module so they share a state dict and dtype."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.enc_c = ContentEncoder(cfg)
        self.enc_a = AttributeEncoder(cfg)
        self.gen = Generator(cfg)
        self.dis_content = ContentDiscriminator(cfg)
        self.dis_domain = DomainDiscriminator(cfg)

    def generator_parameters(self):
        for m in (self.enc_c, self.enc_a, self.gen):
            yield from m.parameters()

    def discriminator_parameters(self):
        for m in (self.dis_content, self.dis_domain):
            yield from m.parameters()
