"""Optimization loop: alternating discriminator and joint encoder/generator updates."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import losses
from .data import MultiDomainDataset, preprocess
from .errors import ConfigurationError, DatasetError, TrainingDivergenceError
from .networks import NetworkConfig, SoloGAN
from .primitives import CBIN, SpectralNorm, _power_iterate, flatten_weight, raw_weight

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    n_epochs_flat: int = 50
    n_epochs_decay: int = 50
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    steps_per_epoch: int | None = None
    checkpoint_interval: int = 1
    log_interval: int = 1
    grad_clip: float | None = None
    lambda_cls: float = 1.0
    lambda_cyc: float = 10.0
    lambda_rec_img: float = 10.0
    lambda_rec_latent: float = 1.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if self.n_epochs_flat < 0 or self.n_epochs_decay < 0 or self.total_epochs < 1:
            raise ConfigurationError("need at least one epoch")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must lie in [0, 1)")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigurationError("steps_per_epoch must be >= 1")
        if self.checkpoint_interval < 1 or self.log_interval < 1:
            raise ConfigurationError("checkpoint_interval and log_interval must be >= 1")
        self.loss_weights  # validates sign

    @property
    def total_epochs(self):
        return self.n_epochs_flat + self.n_epochs_decay

    @property
    def loss_weights(self):
        return losses.LossWeights(self.lambda_cls, self.lambda_cyc, self.lambda_rec_img, self.lambda_rec_latent)

    def to_dict(self):
        return asdict(self)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant for ``n_epochs_flat`` epochs, then linear decay reaching 0 at the last epoch."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.n_epochs_flat:
        return cfg.lr
    return cfg.lr * (1.0 - (epoch - cfg.n_epochs_flat + 1) / cfg.n_epochs_decay)


# ---------------------------------------------------------------------------
# Initialization

_XAVIER = (nn.Conv2d, nn.ConvTranspose2d, nn.Linear, nn.Embedding)


def init_weights(root: nn.Module, generator: torch.Generator | None = None) -> nn.Module:
    """Xavier-uniform weights, zero biases, unit/zero norm affines; resyncs spectral-norm vectors."""
    with torch.no_grad():
        for m in root.modules():
            if isinstance(m, _XAVIER):
                nn.init.xavier_uniform_(raw_weight(m), generator=generator)
                if getattr(m, "bias", None) is not None:
                    m.bias.zero_()
            elif isinstance(m, (CBIN, nn.InstanceNorm2d)) and getattr(m, "weight", None) is not None:
                m.weight.fill_(1.0)
                m.bias.zero_()
        for m in root.modules():
            if hasattr(m, "parametrizations") and "weight" in m.parametrizations:
                sn = m.parametrizations.weight[0]
                if isinstance(sn, SpectralNorm):
                    w2 = flatten_weight(raw_weight(m), sn.out_dim)
                    u = torch.randn(w2.shape[0], generator=generator, dtype=w2.dtype)
                    sn.u.copy_(_power_iterate(w2, u / u.norm(), 15))
    return root


def build_model(net_cfg: NetworkConfig, seed: int = 0) -> SoloGAN:
    torch.manual_seed(seed)
    model = SoloGAN(net_cfg)
    gen = torch.Generator().manual_seed(seed)
    init_weights(model, gen)
    return model


# ---------------------------------------------------------------------------
# Batches


def sample_training_indices(counts, rng: np.random.Generator) -> list[int]:
    """One uniformly drawn index per domain."""
    out = []
    for label, count in enumerate(counts):
        if count < 1:
            raise DatasetError(f"domain {label} has no training images")
        out.append(int(rng.integers(count)))
    return out


def sample_training_batch(ds: MultiDomainDataset, rng: np.random.Generator, image_size: int):
    """One preprocessed (image, label) pair from each domain."""
    for name in ds.domains:
        if not ds.train[name]:
            raise DatasetError(f"domain {name!r} has no training images")
    picks = sample_training_indices(ds.counts("train"), rng)
    return [
        (preprocess(ds.train[name][i], image_size, train_mode=True, rng=rng), label)
        for label, (name, i) in enumerate(zip(ds.domains, picks))
    ]


def collate(pairs):
    return torch.stack([p[0] for p in pairs]), torch.tensor([p[1] for p in pairs], dtype=torch.long)


@dataclass
class TranslationTuple:
    x: torch.Tensor
    y: torch.Tensor
    y_target: torch.Tensor
    z: torch.Tensor
    c: torch.Tensor
    s: torch.Tensor
    x_fake: torch.Tensor


class Trainer:
    def __init__(self, model: SoloGAN, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.weights = cfg.loss_weights
        self.opt_d = torch.optim.Adam(
            model.discriminator.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=0.0
        )
        ge_params = [p for m in model.generator_modules() for p in m.parameters()]
        self.opt_ge = torch.optim.Adam(ge_params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=0.0)
        self.torch_rng = torch.Generator().manual_seed(cfg.seed)
        self.data_rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.epoch = 0
        self.domains = None

    @property
    def n(self):
        return self.model.cfg.domain_count

    def set_lr(self, lr):
        for opt in (self.opt_d, self.opt_ge):
            for group in opt.param_groups:
                group["lr"] = lr

    def make_tuple(self, x, y) -> TranslationTuple:
        m = self.model
        y = y.long()
        # uniform over the other n - 1 domains
        offset = torch.randint(1, self.n, y.shape, generator=self.torch_rng)
        y_target = (y + offset) % self.n
        z = torch.randn(x.shape[0], m.cfg.style_dim, generator=self.torch_rng, dtype=x.dtype)
        c = m.encode_content(x)
        s = m.encode_style(x, y)
        x_fake = m.generate(c, z, y_target)
        return TranslationTuple(x, y, y_target, z, c, s, x_fake)

    def _check(self, terms):
        for name, value in terms.items():
            value = float(value.detach()) if torch.is_tensor(value) else float(value)
            if not math.isfinite(value):
                raise TrainingDivergenceError(self.step, name, value)

    def _clip(self, params):
        if self.cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip)

    def discriminator_step(self, t: TranslationTuple) -> dict:
        D = self.model.discriminator
        D.requires_grad_(True)
        fake = D(t.x_fake.detach(), t.y_target)
        real = D(t.x, t.y)
        adv = losses.adv_loss_d(fake.dis, real.dis)
        cls_r = losses.cls_loss(real.cls, t.y)
        total = losses.total_d_loss(adv, cls_r, self.weights)
        terms = {"adv_d": adv, "cls_r": cls_r, "loss_d": total}
        self._check(terms)
        self.opt_d.zero_grad(set_to_none=True)
        total.backward()
        self._clip(D.parameters())
        self.opt_d.step()
        return {k: float(v.detach()) for k, v in terms.items()}

    def generator_step(self, t: TranslationTuple) -> dict:
        m = self.model
        D = m.discriminator
        D.requires_grad_(False)
        try:
            verdict = D(t.x_fake, t.y_target)
        finally:
            D.requires_grad_(True)
        adv = losses.adv_loss_g(verdict.dis)
        cls_t = losses.cls_loss(verdict.cls, t.y_target)
        x_self = m.generate(t.c, t.s, t.y)
        rec_img = losses.img_rec_loss(t.x, x_self)
        c_hat = m.encode_content(t.x_fake)
        s_hat = m.encode_style(t.x_fake, t.y_target)
        x_cyc = m.generate(c_hat, t.s, t.y)
        cyc = losses.cycle_loss(t.x, x_cyc)
        lat_s, lat_c = losses.latent_rec_loss(t.z, s_hat, t.c, c_hat)
        total = losses.total_ge_loss(adv, cls_t, cyc, rec_img, lat_s + lat_c, self.weights)
        terms = {
            "adv_g": adv, "cls_t": cls_t, "cyc": cyc, "rec_img": rec_img,
            "rec_latent_style": lat_s, "rec_latent_content": lat_c, "loss_ge": total,
        }
        self._check(terms)
        self.opt_ge.zero_grad(set_to_none=True)
        total.backward()
        self._clip(self.opt_ge.param_groups[0]["params"])
        self.opt_ge.step()
        return {k: float(v.detach()) for k, v in terms.items()}

    def train_step(self, x, y) -> dict:
        self.model.train()
        t = self.make_tuple(x, y)
        record = self.discriminator_step(t)
        record.update(self.generator_step(t))
        self.step += 1
        return record

    def steps_per_epoch(self, ds: MultiDomainDataset):
        return self.cfg.steps_per_epoch or max(ds.counts("train"))

    def fit(self, ds: MultiDomainDataset, out_dir=None, stop_epoch=None, on_step=None):
        """Train from ``self.epoch`` up to ``stop_epoch`` (default: the full schedule).

        Writes ``train_log.jsonl`` and checkpoints under ``out_dir`` when given.
        """
        from .checkpoint import save_checkpoint

        if ds.domain_count != self.n:
            raise ConfigurationError(f"dataset has {ds.domain_count} domains, model expects {self.n}")
        if self.domains is None:
            self.domains = list(ds.domains)
        stop = self.cfg.total_epochs if stop_epoch is None else min(stop_epoch, self.cfg.total_epochs)
        out = Path(out_dir) if out_dir is not None else None
        log_file = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            log_file = open(out / "train_log.jsonl", "a")
        size = self.model.cfg.image_size
        try:
            while self.epoch < stop:
                lr = lr_schedule(self.epoch, self.cfg)
                self.set_lr(lr)
                for _ in range(self.steps_per_epoch(ds)):
                    x, y = collate(sample_training_batch(ds, self.data_rng, size))
                    record = {"step": self.step, "epoch": self.epoch, "lr": lr}
                    record.update(self.train_step(x, y))
                    if on_step is not None:
                        on_step(record)
                    if log_file is not None and (record["step"] % self.cfg.log_interval == 0):
                        log_file.write(json.dumps(record) + "\n")
                self.epoch += 1
                log.info("epoch %d done (step %d, lr %.3g)", self.epoch, self.step, lr)
                if out is not None and (self.epoch % self.cfg.checkpoint_interval == 0 or self.epoch == stop):
                    log_file.flush()
                    save_checkpoint(self, out / f"checkpoint_epoch{self.epoch:04d}.npz")
                    save_checkpoint(self, out / "latest.npz")
        finally:
            if log_file is not None:
                log_file.close()
        return self
