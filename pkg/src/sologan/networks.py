"""Content/style encoders, conditional generator and projection discriminator."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, DimensionError, ShapeError
from .primitives import CBIN, CDResBlock, CResBlock, RResBlock, add_spectral_norm, as_labels, one_hot


@dataclass
class NetworkConfig:
    domain_count: int = 2
    image_size: int = 256
    base_channels: int = 64
    style_dim: int = 8
    reflect_k7: bool = True
    spectral_norm: bool = True

    def __post_init__(self):
        if self.domain_count < 2:
            raise ConfigurationError(f"domain_count must be >= 2, got {self.domain_count}")
        if self.image_size % 16:
            raise ConfigurationError(f"image_size must be divisible by 16, got {self.image_size}")
        if self.base_channels < 1 or self.style_dim < 1:
            raise ConfigurationError("base_channels and style_dim must be positive")

    @property
    def content_channels(self):
        return 4 * self.base_channels

    def to_dict(self):
        return asdict(self)


def _k7(c_in, c_out, reflect):
    if reflect:
        return nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(c_in, c_out, 7, 1, 0))
    return nn.Conv2d(c_in, c_out, 7, 1, 3)


def _check_image(x, multiple):
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected a B x 3 x H x W image batch, got {tuple(x.shape)}")
    if x.shape[2] % multiple or x.shape[3] % multiple:
        raise ShapeError(f"image size {tuple(x.shape[2:])} is not divisible by {multiple}")


class ContentEncoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        b = cfg.base_channels
        self.stem = _k7(3, b, cfg.reflect_k7)
        self.down = nn.Sequential(
            nn.InstanceNorm2d(b, affine=True), nn.ReLU(),
            nn.Conv2d(b, 2 * b, 4, 2, 1), nn.InstanceNorm2d(2 * b, affine=True), nn.ReLU(),
            nn.Conv2d(2 * b, 4 * b, 4, 2, 1), nn.InstanceNorm2d(4 * b, affine=True), nn.ReLU(),
        )
        self.blocks = nn.Sequential(*[RResBlock(4 * b) for _ in range(4)])

    def forward(self, x):
        _check_image(x, 4)
        return self.blocks(self.down(self.stem(x)))


class StyleEncoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        b, n = cfg.base_channels, cfg.domain_count
        self.domain_count = n
        self.stem = nn.Conv2d(3, b, 4, 2, 1)
        self.blocks = nn.ModuleList([
            CDResBlock(b, 2 * b, n),
            CDResBlock(2 * b, 4 * b, n),
            CDResBlock(4 * b, 4 * b, n),
        ])
        self.norm = CBIN(4 * b, n)
        self.fc = nn.Linear(4 * b, cfg.style_dim)

    def forward(self, x, y):
        _check_image(x, 16)
        cond = one_hot(as_labels(y, x.shape[0], self.domain_count), self.domain_count, x.dtype)
        h = self.stem(x)
        for block in self.blocks:
            h = block(h, cond)
        h = F.relu(self.norm(h, cond))
        return self.fc(h.mean(dim=(2, 3)))


class Generator(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        b, n = cfg.base_channels, cfg.domain_count
        self.domain_count = n
        self.style_dim = cfg.style_dim
        self.content_channels = 4 * b
        cond = n + cfg.style_dim
        self.stem = nn.Conv2d(4 * b, 4 * b, 3, 1, 1)
        self.stem_norm = CBIN(4 * b, cond)
        self.blocks = nn.ModuleList([CResBlock(4 * b, cond) for _ in range(5)])
        self.blocks_norm = CBIN(4 * b, cond)
        self.up1 = nn.ConvTranspose2d(4 * b, 2 * b, 4, 2, 1)
        self.up1_norm = CBIN(2 * b, cond)
        self.up2 = nn.ConvTranspose2d(2 * b, b, 4, 2, 1)
        self.up2_norm = CBIN(b, cond)
        self.head = _k7(b, 3, cfg.reflect_k7)

    def condition(self, s, y):
        if s.dim() != 2 or s.shape[1] != self.style_dim:
            raise DimensionError(f"style code must be B x {self.style_dim}, got {tuple(s.shape)}")
        label = one_hot(as_labels(y, s.shape[0], self.domain_count), self.domain_count, s.dtype)
        return torch.cat([label, s], dim=1)

    def forward(self, c, s, y):
        if c.dim() != 4 or c.shape[1] != self.content_channels:
            raise ShapeError(f"content code must be B x {self.content_channels} x h x w, got {tuple(c.shape)}")
        if s.shape[0] != c.shape[0]:
            raise DimensionError(f"style batch {s.shape[0]} vs content batch {c.shape[0]}")
        cond = self.condition(s, y)
        h = F.relu(self.stem_norm(self.stem(c), cond))
        for block in self.blocks:
            h = block(h, cond)
        h = F.relu(self.blocks_norm(h, cond))
        h = F.relu(self.up1_norm(self.up1(h), cond))
        h = F.relu(self.up2_norm(self.up2(h), cond))
        return torch.tanh(self.head(h))


@dataclass
class DiscriminatorVerdict:
    dis: torch.Tensor
    cls: torch.Tensor
    h: torch.Tensor
    d: torch.Tensor


def projection_logit(h, labels, embed_weight, fc_weight, fc_bias):
    """``embed(y) . h + fc(h)`` for pooled features ``h`` (B x k) and integer labels."""
    d = F.linear(h, fc_weight, fc_bias).squeeze(1)
    return (F.embedding(labels, embed_weight) * h).sum(dim=1) + d, d


class Discriminator(nn.Module):
    """Single-scale projection discriminator with an auxiliary domain classifier.

    ``dis = embed(y) . h + fc(h)`` where ``h`` is the pooled trunk feature; the
    classifier branch continues from the same trunk feature map.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        b, n = cfg.base_channels, cfg.domain_count
        self.domain_count = n
        chans = [3, b, 2 * b, 4 * b, 8 * b]
        layers = []
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(c_in, c_out, 4, 2, 1), nn.LeakyReLU(0.2)]
        self.trunk = nn.Sequential(*layers)
        self.fc = nn.Linear(8 * b, 1)
        self.embed = nn.Embedding(n, 8 * b)
        self.cls_conv = nn.Conv2d(8 * b, 16 * b, 4, 2, 1)
        self.cls_out = nn.Conv2d(16 * b, n, 4, 1, 0)

    def forward(self, x, y):
        _check_image(x, 16)
        labels = as_labels(y, x.shape[0], self.domain_count)
        feat = self.trunk(x)
        h = feat.mean(dim=(2, 3))
        dis, d = projection_logit(h, labels, self.embed.weight, self.fc.weight, self.fc.bias)
        c = F.leaky_relu(self.cls_conv(feat), 0.2)
        # small images leave less than the 4x4 support the last conv needs
        short_h, short_w = max(0, 4 - c.shape[2]), max(0, 4 - c.shape[3])
        if short_h or short_w:
            c = F.pad(c, (short_w // 2, short_w - short_w // 2, short_h // 2, short_h - short_h // 2))
        cls = self.cls_out(c).mean(dim=(2, 3))
        return DiscriminatorVerdict(dis=dis, cls=cls, h=h, d=d)


class SoloGAN(nn.Module):
    """Container for the four networks sharing one NetworkConfig."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.content_encoder = ContentEncoder(cfg)
        self.style_encoder = StyleEncoder(cfg)
        self.generator = Generator(cfg)
        self.discriminator = Discriminator(cfg)
        if cfg.spectral_norm:
            for net in (self.content_encoder, self.style_encoder, self.generator, self.discriminator):
                add_spectral_norm(net)

    def generator_modules(self):
        return [self.content_encoder, self.style_encoder, self.generator]

    def encode_content(self, x):
        return self.content_encoder(x)

    def encode_style(self, x, y):
        return self.style_encoder(x, y)

    def generate(self, c, s, y):
        return self.generator(c, s, y)

    def discriminate(self, x, y) -> DiscriminatorVerdict:
        return self.discriminator(x, y)

    def translate(self, x, z, y_target):
        return self.generate(self.encode_content(x), z, y_target)

    def guide(self, x_content, x_style, y_style):
        """Content of ``x_content`` rendered with the style extracted from ``x_style``."""
        return self.generate(self.encode_content(x_content), self.encode_style(x_style, y_style), y_style)

    def reconstruct(self, x, y):
        return self.guide(x, x, y)


def count_parameters(*modules: nn.Module) -> int:
    seen = set()
    total = 0
    for module in modules:
        for p in module.parameters():
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                total += p.numel()
    return total
