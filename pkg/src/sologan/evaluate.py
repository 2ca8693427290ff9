"""Evaluation protocol: FID, IS, CIS, LPIPS diversity and classification error in one pass."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import metrics
from .data import MultiDomainDataset, load_split_tensor
from .errors import ConfigurationError, ProtocolError

REPORT_FIELDS = ("FID", "IS", "CIS", "LPIPS", "Cls_error", "protocol", "extractor_hash")


@dataclass
class EvalProtocol:
    """Sample counts; defaults follow the full-scale protocol, shrink them for small datasets."""

    inputs_per_domain: int = 100
    is_samples: int = 100
    fid_samples: int = 10
    lpips_samples: int = 20
    lpips_pairs: int = 19
    cls_samples: int = 10
    batch_size: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ("inputs_per_domain", "is_samples", "fid_samples", "cls_samples", "lpips_pairs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"protocol.{name} must be >= 1")
        if self.lpips_samples < 2:
            raise ConfigurationError("protocol.lpips_samples must be >= 2")

    @property
    def samples_per_input(self):
        return max(self.is_samples, self.fid_samples, self.lpips_samples, self.cls_samples)

    def to_dict(self):
        return asdict(self)


def model_translator(model):
    """Wrap a SoloGAN as ``translator(x, z, y_target) -> images``."""

    @torch.no_grad()
    def translate(x, z, y_target):
        model.eval()
        c = model.encode_content(x)
        return model.generate(c.expand(z.shape[0], *c.shape[1:]), z, y_target)

    return translate


def _batched(fn, n, batch_size):
    return [fn(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def run_protocol(translator, ds: MultiDomainDataset, extractor, protocol: EvalProtocol,
                 image_size: int, style_dim: int = 8) -> dict:
    """Translate test inputs into every other domain and score the outputs.

    ``translator(x, z, y_target)`` receives a single ``1 x 3 x H x W`` input,
    a ``k x style_dim`` batch of style codes and the target label.
    """
    n = ds.domain_count
    if extractor.num_classes != n:
        raise ConfigurationError(f"extractor predicts {extractor.num_classes} classes but there are {n} domains")
    short = [d for d, c in zip(ds.domains, ds.counts("test")) if c < protocol.inputs_per_domain]
    if short:
        raise ProtocolError(
            f"domains {short} have fewer than {protocol.inputs_per_domain} test images; "
            f"lower protocol.inputs_per_domain (smallest count: {min(ds.counts('test'))})"
        )
    images, labels = load_split_tensor(ds, "test", image_size)
    real_feats = {t: extractor.features(images[labels == t]).double().numpy() for t in range(n)}

    gen = torch.Generator().manual_seed(protocol.seed)
    rng = np.random.default_rng(protocol.seed)
    k = protocol.samples_per_input
    all_probs, per_input_probs, lpips_scores = [], [], []
    fake_feats = {t: [] for t in range(n)}
    predicted, targets = [], []
    for src in range(n):
        inputs = images[labels == src][: protocol.inputs_per_domain]
        for x in inputs:
            x = x.unsqueeze(0)
            for tgt in range(n):
                if tgt == src:
                    continue
                z = torch.randn(k, style_dim, generator=gen)
                out = torch.cat(_batched(lambda a, b: translator(x, z[a:b], tgt), k, protocol.batch_size))
                probs = extractor.probs(out).double().numpy()
                all_probs.append(probs[: protocol.is_samples])
                per_input_probs.append(probs[: protocol.is_samples])
                fake_feats[tgt].append(extractor.features(out[: protocol.fid_samples]).double().numpy())
                lp = out[: protocol.lpips_samples]
                lpips_scores.append(metrics.lpips_for_input(extractor.layer_features(lp), protocol.lpips_pairs, rng))
                predicted.append(probs[: protocol.cls_samples].argmax(axis=1))
                targets.append(np.full(min(k, protocol.cls_samples), tgt))

    fids = []
    for t in range(n):
        if fake_feats[t]:
            fake = metrics.gaussian_stats(np.concatenate(fake_feats[t]))
            fids.append(metrics.fid(metrics.gaussian_stats(real_feats[t]), fake))
    return {
        "FID": float(np.mean(fids)),
        "IS": metrics.inception_score(np.concatenate(all_probs)),
        "CIS": metrics.conditional_inception_score(per_input_probs),
        "LPIPS": float(np.mean(lpips_scores)),
        "Cls_error": metrics.classification_error_from_predictions(np.concatenate(predicted), np.concatenate(targets)),
        "protocol": protocol.to_dict(),
        "extractor_hash": extractor.identity(),
    }
