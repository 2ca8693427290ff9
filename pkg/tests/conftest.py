import sys

import pytest
import torch

from sologan.networks import NetworkConfig
from sologan.train import build_model

torch.set_num_threads(1)


def central_difference(fn, tensor, h=1e-6):
    """Numerical gradient of scalar ``fn()`` w.r.t. every element of ``tensor`` (perturbed in place)."""
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        plus = float(fn())
        flat[i] = orig - h
        minus = float(fn())
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return grad


def relative_error(a, b):
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


@pytest.fixture
def tiny_cfg():
    return NetworkConfig(domain_count=3, image_size=32, base_channels=4)


@pytest.fixture
def tiny_model(tiny_cfg):
    model = build_model(tiny_cfg, seed=0)
    model.eval()
    return model


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
