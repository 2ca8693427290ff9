"""Quality and diversity metrics for translated images.

All metrics are defined relative to a :class:`FeatureExtractor`. The
bundled :class:`ProbeClassifier` is a small conv net trained on the real
images of the evaluation dataset; any object with the same four members
(``num_classes``, ``features``, ``probs``, ``layer_features``) can be
plugged in instead, e.g. a fine-tuned Inception or AlexNet wrapper.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, DimensionError, ProtocolError

PROB_TOL = 1e-5


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    count: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.count < 2:
            raise ProtocolError(f"Gaussian statistics need at least 2 samples, got {self.count}")
        if self.sigma.shape != (self.mu.size, self.mu.size):
            raise DimensionError(f"covariance shape {self.sigma.shape} does not match mean length {self.mu.size}")


def gaussian_stats(features) -> GaussianStats:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise DimensionError(f"features must be N x d, got shape {f.shape}")
    if f.shape[0] < 2:
        raise ProtocolError(f"Gaussian statistics need at least 2 samples, got {f.shape[0]}")
    sigma = np.cov(f, rowvar=False, ddof=1).reshape(f.shape[1], f.shape[1])
    return GaussianStats(f.mean(axis=0), (sigma + sigma.T) / 2, f.shape[0])


def psd_sqrt(a: np.ndarray) -> np.ndarray:
    """Symmetric square root via eigendecomposition, negative eigenvalues clamped to 0."""
    a = (np.asarray(a, dtype=np.float64) + np.asarray(a, dtype=np.float64).T) / 2
    w, v = np.linalg.eigh(a)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(a: GaussianStats, b: GaussianStats) -> float:
    if a.mu.shape != b.mu.shape:
        raise DimensionError(f"feature dimensions differ: {a.mu.size} vs {b.mu.size}")
    root_a = psd_sqrt(a.sigma)
    # Tr((Sa Sb)^1/2) == Tr((Sa^1/2 Sb Sa^1/2)^1/2), and the latter is symmetric PSD
    inner = np.linalg.eigvalsh((root_a @ b.sigma @ root_a + (root_a @ b.sigma @ root_a).T) / 2)
    tr_cross = np.sqrt(np.clip(inner, 0, None)).sum()
    diff = a.mu - b.mu
    value = diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2 * tr_cross
    return float(max(value, 0.0))


def _check_probs(p, min_rows=1):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < min_rows:
        raise ProtocolError(f"expected at least {min_rows} probability rows, got shape {p.shape}")
    if (p < -PROB_TOL).any() or np.abs(p.sum(axis=1) - 1).max() > PROB_TOL:
        raise ProtocolError("probability rows must be non-negative and sum to 1")
    return np.clip(p, 0, None)


def _mean_kl_to_marginal(p):
    marginal = p.mean(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return terms.sum(axis=1).mean()


def inception_score(probs) -> float:
    """exp of the mean KL between each sample's class distribution and the marginal."""
    return float(np.exp(_mean_kl_to_marginal(_check_probs(probs, min_rows=2))))


def conditional_inception_score(probs_per_input) -> float:
    """IS computed within each input's sample set, averaged over inputs before exponentiation."""
    if len(probs_per_input) < 1:
        raise ProtocolError("conditional inception score needs at least one input")
    kls = [_mean_kl_to_marginal(_check_probs(p)) for p in probs_per_input]
    return float(np.exp(np.mean(kls)))


# ---------------------------------------------------------------------------
# Perceptual distance


def _unit_channels(f, eps=1e-10):
    return f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)


def perceptual_distance(feats_a, feats_b, weights=None) -> torch.Tensor:
    """Per-sample distance between two stacks of layer features.

    Each layer is unit-normalised along channels, squared differences are
    weighted per channel (1 by default), summed over channels, averaged over
    space and summed over layers.
    """
    if len(feats_a) != len(feats_b):
        raise DimensionError("feature stacks have different depth")
    total = 0
    for i, (fa, fb) in enumerate(zip(feats_a, feats_b)):
        diff = (_unit_channels(fa) - _unit_channels(fb)) ** 2
        if weights is not None:
            w = torch.as_tensor(weights[i], dtype=diff.dtype)
            diff = diff * w.view(1, -1, 1, 1) if w.dim() else diff * w
        total = total + diff.sum(dim=1).mean(dim=(1, 2))
    return total


def sample_pairs(k: int, n_pairs: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Up to ``n_pairs`` distinct unordered index pairs out of ``k`` samples."""
    pairs = list(itertools.combinations(range(k), 2))
    if len(pairs) <= n_pairs:
        return pairs
    picks = rng.choice(len(pairs), size=n_pairs, replace=False)
    return [pairs[i] for i in sorted(picks)]


def lpips_for_input(layer_feats, n_pairs: int, rng: np.random.Generator, weights=None) -> float:
    k = layer_feats[0].shape[0]
    if k < 2:
        raise ProtocolError(f"diversity needs at least 2 samples per input, got {k}")
    pairs = sample_pairs(k, n_pairs, rng)
    ia = torch.tensor([p[0] for p in pairs])
    ib = torch.tensor([p[1] for p in pairs])
    d = perceptual_distance([f[ia] for f in layer_feats], [f[ib] for f in layer_feats], weights)
    return float(d.mean())


def lpips_diversity(samples_per_input, extractor, n_pairs: int = 19, seed: int = 0, weights=None) -> float:
    """Mean pairwise perceptual distance among the samples generated for each input."""
    rng = np.random.default_rng(seed)
    scores = []
    for samples in samples_per_input:
        if samples.shape[0] < 2:
            raise ProtocolError(f"diversity needs at least 2 samples per input, got {samples.shape[0]}")
        scores.append(lpips_for_input(extractor.layer_features(samples), n_pairs, rng, weights))
    if not scores:
        raise ProtocolError("no inputs given")
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Classification error


def classification_error_from_predictions(predicted, targets) -> float:
    predicted = np.asarray(predicted).reshape(-1)
    targets = np.asarray(targets).reshape(-1)
    if predicted.shape != targets.shape or predicted.size == 0:
        raise DimensionError("predictions and targets must be non-empty and equally long")
    return float(100.0 * np.mean(predicted != targets))


def classification_error(images, targets, extractor, domain_count: int | None = None) -> float:
    """Percentage of images whose predicted domain differs from the target domain."""
    if domain_count is not None and extractor.num_classes != domain_count:
        raise ConfigurationError(
            f"extractor predicts {extractor.num_classes} classes but there are {domain_count} domains"
        )
    predicted = extractor.probs(images).argmax(dim=1).cpu().numpy()
    return classification_error_from_predictions(predicted, torch.as_tensor(targets).cpu().numpy())


# ---------------------------------------------------------------------------
# Feature extractors


class FeatureExtractor:
    """Interface; ``probs`` rows sum to 1 and all methods are deterministic."""

    num_classes: int

    def features(self, x) -> torch.Tensor:
        raise NotImplementedError

    def probs(self, x) -> torch.Tensor:
        raise NotImplementedError

    def layer_features(self, x) -> list[torch.Tensor]:
        raise NotImplementedError

    def identity(self) -> str:
        return type(self).__name__


class ProbeClassifier(nn.Module, FeatureExtractor):
    def __init__(self, num_classes: int, widths=(16, 32)):
        super().__init__()
        self.num_classes = num_classes
        self.widths = tuple(widths)
        chans = (3,) + self.widths
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, 2, 1) for a, b in zip(chans[:-1], chans[1:]))
        self.head = nn.Linear(chans[-1], num_classes)

    def layer_outputs(self, x):
        outs = []
        h = x
        for conv in self.convs:
            h = F.relu(conv(h))
            outs.append(h)
        return outs

    def forward(self, x):
        return self.head(self.layer_outputs(x)[-1].mean(dim=(2, 3)))

    @torch.no_grad()
    def features(self, x):
        self.eval()
        return self.layer_outputs(x)[-1].mean(dim=(2, 3))

    @torch.no_grad()
    def probs(self, x):
        self.eval()
        return F.softmax(self.forward(x).double(), dim=1)

    @torch.no_grad()
    def layer_features(self, x):
        self.eval()
        return self.layer_outputs(x)

    def identity(self):
        h = hashlib.sha256(json.dumps({"widths": self.widths, "classes": self.num_classes}).encode())
        for key, value in sorted(self.state_dict().items()):
            h.update(key.encode())
            h.update(value.detach().cpu().numpy().tobytes())
        return h.hexdigest()[:16]


def train_probe(images, labels, num_classes: int, epochs: int = 15, batch_size: int = 32,
                lr: float = 3e-3, seed: int = 0, widths=(16, 32)) -> ProbeClassifier:
    """Fit a ProbeClassifier on preprocessed images in [-1, 1]."""
    torch.manual_seed(seed)
    model = ProbeClassifier(num_classes, widths)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    labels = torch.as_tensor(labels, dtype=torch.long)
    model.train()
    for _ in range(epochs):
        order = torch.randperm(images.shape[0], generator=gen)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loss = F.cross_entropy(model(images[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model


def probe_accuracy(model: FeatureExtractor, images, labels) -> float:
    return float((model.probs(images).argmax(dim=1) == torch.as_tensor(labels)).double().mean())


def save_extractor(model: ProbeClassifier, path) -> Path:
    path = Path(path)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"num_classes": model.num_classes, "widths": list(model.widths)}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_extractor(path) -> ProbeClassifier:
    with np.load(path, allow_pickle=False) as archive:
        arrays = {k: archive[k] for k in archive.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    model = ProbeClassifier(meta["num_classes"], meta["widths"])
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    model.eval()
    return model
