"""Loss terms and the two full objectives (joint encoder/generator, discriminator)."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DimensionError, InvalidLabelError, ShapeError


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    cyc: float = 10.0
    rec_img: float = 10.0
    rec_latent: float = 1.0

    def __post_init__(self):
        for name in ("cls", "cyc", "rec_img", "rec_latent"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def adv_loss_d(dis_fake, dis_real):
    """Least-squares discriminator loss: E[D(fake)^2] + E[(1 - D(real))^2]."""
    return (dis_fake ** 2).mean() + ((1 - dis_real) ** 2).mean()


def adv_loss_g(dis_fake):
    return ((1 - dis_fake) ** 2).mean()


def cls_loss(logits, target):
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    n = logits.shape[1]
    target = torch.as_tensor(target, dtype=torch.long).reshape(-1)
    if target.numel() == 1 and logits.shape[0] != 1:
        target = target.expand(logits.shape[0])
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= n):
        raise InvalidLabelError(int(target[(target < 0) | (target >= n)][0]), n)
    return F.cross_entropy(logits, target)


def l1_loss(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def cycle_loss(x, x_cyc):
    return l1_loss(x, x_cyc)


def img_rec_loss(x, x_self):
    return l1_loss(x, x_self)


def latent_rec_loss(z, s_hat, c, c_hat):
    """Returns ``(style_term, content_term)`` as separate mean absolute errors."""
    if z.shape != s_hat.shape or c.shape != c_hat.shape:
        raise DimensionError(
            f"latent shapes differ: z {tuple(z.shape)} vs {tuple(s_hat.shape)}, "
            f"c {tuple(c.shape)} vs {tuple(c_hat.shape)}"
        )
    return (z - s_hat).abs().mean(), (c - c_hat).abs().mean()


def total_ge_loss(adv, cls, cyc, rec_img, rec_latent, weights: LossWeights = LossWeights()):
    return adv + weights.cls * cls + weights.cyc * cyc + weights.rec_img * rec_img + weights.rec_latent * rec_latent


def total_d_loss(adv, cls, weights: LossWeights = LossWeights()):
    return adv + weights.cls * cls
