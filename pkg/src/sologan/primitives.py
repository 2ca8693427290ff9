"""Conditional building blocks shared by the encoders, generator and discriminator."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import parametrize

from .errors import ConfigurationError, DegenerateVarianceError, DimensionError, InvalidLabelError

IN_EPS = 1e-5
SIGMA_FLOOR = 1e-12


def one_hot(y, n: int, dtype=torch.float32) -> torch.Tensor:
    """One-hot encode a domain label.

    ``y`` may be a python int (returns a length-``n`` vector) or an integer
    tensor of shape ``(B,)`` (returns ``B x n``).
    """
    if isinstance(y, torch.Tensor):
        if y.dtype.is_floating_point or y.dtype == torch.bool:
            raise InvalidLabelError(y, n)
        if y.numel() and (int(y.min()) < 0 or int(y.max()) >= n):
            bad = y[(y < 0) | (y >= n)][0].item()
            raise InvalidLabelError(bad, n)
        return F.one_hot(y.long(), n).to(dtype)
    if isinstance(y, bool) or not isinstance(y, int) or not 0 <= y < n:
        raise InvalidLabelError(y, n)
    out = torch.zeros(n, dtype=dtype)
    out[y] = 1
    return out


def as_labels(y, batch: int, n: int) -> torch.Tensor:
    """Normalise an int or tensor label to a validated LongTensor of shape (batch,)."""
    if isinstance(y, torch.Tensor):
        y = y.reshape(-1).long()
        if y.numel() == 1 and batch != 1:
            y = y.expand(batch)
    else:
        if isinstance(y, bool) or not isinstance(y, int):
            raise InvalidLabelError(y, n)
        y = torch.full((batch,), y, dtype=torch.long)
    if y.numel() != batch:
        raise DimensionError(f"expected {batch} labels, got {y.numel()}")
    if int(y.min()) < 0 or int(y.max()) >= n:
        bad = y[(y < 0) | (y >= n)][0].item()
        raise InvalidLabelError(bad, n)
    return y


# ---------------------------------------------------------------------------
# Central biasing instance normalization


def cbin_forward(x, condition, weight, bias, map_weight, map_bias, eps=IN_EPS):
    """Instance norm, per-channel affine, plus ``tanh(map_weight @ condition + map_bias)``.

    ``condition`` is ``B x k`` (or ``k`` for a single sample); the returned bias is
    spatially uniform so changing the condition shifts each channel by a constant.
    """
    if x.dim() != 4:
        raise DimensionError(f"expected a B x C x H x W feature map, got shape {tuple(x.shape)}")
    if x.shape[2] * x.shape[3] == 1:
        raise DegenerateVarianceError("instance normalization over a 1x1 map has zero variance")
    if condition.dim() == 1:
        condition = condition.unsqueeze(0)
    if condition.shape[-1] != map_weight.shape[1]:
        raise DimensionError(
            f"condition length {condition.shape[-1]} does not match bias map input {map_weight.shape[1]}"
        )
    if condition.shape[0] not in (1, x.shape[0]):
        raise DimensionError(f"condition batch {condition.shape[0]} vs feature batch {x.shape[0]}")
    normed = F.instance_norm(x, eps=eps)
    central = torch.tanh(F.linear(condition, map_weight, map_bias))
    return normed * weight.view(1, -1, 1, 1) + bias.view(1, -1, 1, 1) + central[:, :, None, None]


class CBIN(nn.Module):
    def __init__(self, num_features: int, cond_dim: int, eps: float = IN_EPS):
        super().__init__()
        self.num_features = num_features
        self.cond_dim = cond_dim
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.bias_map = nn.Linear(cond_dim, num_features)

    def forward(self, x, condition):
        return cbin_forward(
            x, condition, self.weight, self.bias, self.bias_map.weight, self.bias_map.bias, self.eps
        )

    def extra_repr(self):
        return f"{self.num_features}, cond_dim={self.cond_dim}"


# ---------------------------------------------------------------------------
# Spectral normalization


@dataclass
class SpectralState:
    weight: torch.Tensor
    u: torch.Tensor
    power_iterations: int = 1
    sigma: float | None = None

    @classmethod
    def create(cls, weight, power_iterations=1, generator=None, out_dim=0):
        w = flatten_weight(weight, out_dim)
        u = torch.randn(w.shape[0], generator=generator, dtype=w.dtype)
        return cls(weight, F.normalize(u, dim=0), power_iterations)


def flatten_weight(weight: torch.Tensor, out_dim: int = 0) -> torch.Tensor:
    if out_dim != 0:
        weight = weight.movedim(out_dim, 0)
    return weight.reshape(weight.shape[0], -1)


def _power_iterate(w2, u, iterations):
    for _ in range(iterations):
        v = F.normalize(w2.t() @ u, dim=0)
        u_new = w2 @ v
        norm = u_new.norm()
        if norm < SIGMA_FLOOR:
            break
        u = u_new / norm
    return u


def _sigma(w2, u):
    with torch.no_grad():
        v = F.normalize(w2.t() @ u, dim=0)
    return torch.clamp(u @ (w2 @ v), min=SIGMA_FLOOR)


def spectral_normalize(state: SpectralState, out_dim: int = 0):
    """Divide ``state.weight`` by its power-iteration top singular value.

    Updates ``state.u`` (and ``state.sigma``) in place and returns
    ``(normalized_weight, state)``.
    """
    if state.power_iterations < 1:
        raise ConfigurationError("power_iterations must be >= 1")
    w2 = flatten_weight(state.weight, out_dim)
    if state.u.shape != (w2.shape[0],):
        raise DimensionError(f"u has shape {tuple(state.u.shape)}, expected ({w2.shape[0]},)")
    with torch.no_grad():
        state.u = _power_iterate(w2.detach(), state.u.to(w2.dtype), state.power_iterations)
    sigma = _sigma(w2, state.u)
    state.sigma = float(sigma)
    return state.weight / sigma, state


class SpectralNorm(nn.Module):
    """Parametrization dividing a weight by its estimated spectral norm.

    ``u`` is refreshed with ``n_power_iterations`` steps on every forward in
    training mode and frozen in eval mode.
    """

    def __init__(self, weight: torch.Tensor, out_dim: int = 0, n_power_iterations: int = 1):
        super().__init__()
        self.out_dim = out_dim
        self.n_power_iterations = n_power_iterations
        w2 = flatten_weight(weight.detach(), out_dim)
        u = F.normalize(torch.randn(w2.shape[0], dtype=w2.dtype), dim=0)
        self.register_buffer("u", _power_iterate(w2, u, 15))

    def forward(self, weight):
        w2 = flatten_weight(weight, self.out_dim)
        if self.training:
            with torch.no_grad():
                self.u.copy_(_power_iterate(w2.detach(), self.u, self.n_power_iterations))
        # clone: u is updated in place by later forwards while autograd still holds it
        sigma = _sigma(w2, self.u.clone())
        return weight / sigma


def _out_dim(module):
    return 1 if isinstance(module, nn.ConvTranspose2d) else 0


def add_spectral_norm(root: nn.Module, n_power_iterations: int = 1) -> nn.Module:
    """Register SpectralNorm on every conv, transposed conv, linear and embedding weight.

    CBIN bias maps are left alone; their output is squashed by tanh.
    """
    skip = {id(m.bias_map) for m in root.modules() if isinstance(m, CBIN)}
    targets = (nn.Conv2d, nn.ConvTranspose2d, nn.Linear, nn.Embedding)
    for module in list(root.modules()):
        if isinstance(module, targets) and id(module) not in skip:
            if parametrize.is_parametrized(module, "weight"):
                continue
            parametrize.register_parametrization(
                module, "weight", SpectralNorm(module.weight, _out_dim(module), n_power_iterations)
            )
    return root


def raw_weight(module: nn.Module) -> torch.Tensor:
    """The trainable weight tensor, unwrapped from any parametrization."""
    if parametrize.is_parametrized(module, "weight"):
        return module.parametrizations.weight.original
    return module.weight


# ---------------------------------------------------------------------------
# Residual blocks


def conv3x3(c_in, c_out):
    return nn.Conv2d(c_in, c_out, 3, 1, 1)


class RResBlock(nn.Module):
    """Unconditional residual block: conv-IN-ReLU-conv-IN plus identity."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.norm1 = nn.InstanceNorm2d(channels, affine=True, eps=IN_EPS)
        self.conv2 = conv3x3(channels, channels)
        self.norm2 = nn.InstanceNorm2d(channels, affine=True, eps=IN_EPS)

    def forward(self, x, condition=None):
        if condition is not None:
            raise ConfigurationError("R-ResBlock takes no condition")
        h = F.relu(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(h))


class CDResBlock(nn.Module):
    """Conditional downsampling block; both branches average-pool by 2."""

    def __init__(self, c_in: int, c_out: int, cond_dim: int):
        super().__init__()
        self.conv1 = conv3x3(c_in, c_in)
        self.norm1 = CBIN(c_in, cond_dim)
        self.conv2 = conv3x3(c_in, c_out)
        self.norm2 = CBIN(c_out, cond_dim)
        self.shortcut = nn.Conv2d(c_in, c_out, 1, 1, 0)

    def forward(self, x, condition=None):
        if condition is None:
            raise ConfigurationError("CD-ResBlock requires a condition vector")
        h = F.relu(self.norm1(self.conv1(x), condition))
        h = F.avg_pool2d(self.norm2(self.conv2(h), condition), 2, 2)
        return h + self.shortcut(F.avg_pool2d(x, 2, 2))


class CResBlock(nn.Module):
    """Conditional residual block: conv-CBIN-ReLU-conv-CBIN plus identity."""

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.norm1 = CBIN(channels, cond_dim)
        self.conv2 = conv3x3(channels, channels)
        self.norm2 = CBIN(channels, cond_dim)

    def forward(self, x, condition=None):
        if condition is None:
            raise ConfigurationError("C-ResBlock requires a condition vector")
        h = F.relu(self.norm1(self.conv1(x), condition))
        return x + self.norm2(self.conv2(h), condition)


_BLOCKS = {"R": RResBlock, "CD": CDResBlock, "C": CResBlock}


def make_resblock(kind: str, *args, **kwargs) -> nn.Module:
    try:
        return _BLOCKS[kind](*args, **kwargs)
    except KeyError:
        raise ConfigurationError(f"unknown residual block kind {kind!r}; choose from R, CD, C") from None


def resblock_forward(block: nn.Module, x, condition=None):
    return block(x, condition)
