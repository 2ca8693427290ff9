import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sologan import losses
from sologan.errors import DimensionError, InvalidLabelError, ShapeError

from conftest import central_difference, relative_error

T = torch.tensor


@pytest.mark.parametrize("fake,real,expected", [(0.0, 1.0, 0.0), (0.5, 0.5, 0.5), (1.0, 0.0, 2.0)])
def test_adv_loss_d(fake, real, expected):
    assert losses.adv_loss_d(T([fake]), T([real])).item() == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("fake,expected", [(1.0, 0.0), (0.0, 1.0), (0.5, 0.25)])
def test_adv_loss_g(fake, expected):
    assert losses.adv_loss_g(T([fake])).item() == pytest.approx(expected, abs=1e-12)


def test_cls_loss_examples():
    assert losses.cls_loss(T([[100.0, 0.0]], dtype=torch.float64), 0).item() == pytest.approx(0, abs=1e-6)
    assert losses.cls_loss(torch.zeros(1, 3, dtype=torch.float64), 1).item() == pytest.approx(math.log(3), abs=1e-6)
    # -log(e^0 / (e^0 + e^1)) = log(1 + e)
    assert losses.cls_loss(T([[0.0, 1.0]], dtype=torch.float64), 0).item() == pytest.approx(1.3132616875182228, abs=1e-6)
    with pytest.raises(InvalidLabelError):
        losses.cls_loss(torch.zeros(2, 3), torch.tensor([0, 3]))


def _mean_abs_loop(a, b):
    a, b = a.reshape(-1).tolist(), b.reshape(-1).tolist()
    return sum(abs(p - q) for p, q in zip(a, b)) / len(a)


@pytest.mark.parametrize("fn", [losses.cycle_loss, losses.img_rec_loss])
def test_l1_image_losses(fn):
    x = torch.rand(2, 3, 8, 8) * 2 - 1
    assert fn(x, x).item() == 0
    assert fn(-torch.ones(1, 3, 4, 4), torch.ones(1, 3, 4, 4)).item() == 2
    g = torch.Generator().manual_seed(0)
    a = torch.rand(2, 3, 5, 5, generator=g, dtype=torch.float64) * 2 - 1
    b = torch.rand(2, 3, 5, 5, generator=g, dtype=torch.float64) * 2 - 1
    assert abs(fn(a, b).item() - _mean_abs_loop(a, b)) < 1e-7
    with pytest.raises(ShapeError):
        fn(a, b[:, :2])


def test_latent_rec_loss():
    z, c = torch.randn(2, 8), torch.randn(2, 4, 3, 3)
    assert [v.item() for v in losses.latent_rec_loss(z, z, c, c)] == [0, 0]
    style, _ = losses.latent_rec_loss(torch.zeros(1, 8), torch.ones(1, 8), c, c)
    assert style.item() == 1
    g = torch.Generator().manual_seed(4)
    z2, c2 = torch.randn(2, 8, generator=g, dtype=torch.float64), torch.randn(2, 4, 3, 3, generator=g, dtype=torch.float64)
    zz, cc = torch.randn_like(z2), torch.randn_like(c2)
    s_term, c_term = losses.latent_rec_loss(z2, zz, c2, cc)
    assert abs(s_term.item() - _mean_abs_loop(z2, zz)) < 1e-7
    assert abs(c_term.item() - _mean_abs_loop(c2, cc)) < 1e-7
    with pytest.raises(DimensionError):
        losses.latent_rec_loss(z, z[:, :4], c, c)


def test_full_objectives():
    zero = torch.tensor(0.0)
    assert losses.total_ge_loss(zero, zero, zero, zero, zero).item() == 0
    one = torch.tensor(1.0)
    assert losses.total_ge_loss(one, one, one, one, one).item() == 23
    assert losses.total_d_loss(torch.tensor(0.5, dtype=torch.float64), torch.tensor(math.log(3), dtype=torch.float64)).item() == pytest.approx(0.5 + math.log(3), abs=1e-12)
    assert 0.5 + math.log(3) == pytest.approx(1.5986, abs=1e-4)


@pytest.mark.parametrize("index,weight", [(0, 1.0), (1, 1.0), (2, 10.0), (3, 10.0), (4, 1.0)])
def test_ge_linearity(index, weight):
    rng = np.random.default_rng(index)
    parts = [float(v) for v in rng.uniform(0, 2, 5)]
    base = losses.total_ge_loss(*parts)
    delta = 0.375  # exact in binary floating point
    bumped = list(parts)
    bumped[index] += delta
    assert losses.total_ge_loss(*bumped) - base == pytest.approx(weight * delta, abs=1e-12)


def test_weights_validation():
    with pytest.raises(ValueError):
        losses.LossWeights(cyc=-1)


images = arrays(np.float64, (1, 3, 4, 4), elements=st.floats(-1, 1))


@settings(max_examples=50, deadline=None)
@given(images, images, images)
def test_l1_symmetric_and_triangle(a, b, c):
    a, b, c = map(torch.from_numpy, (a, b, c))
    assert abs(losses.cycle_loss(a, b) - losses.cycle_loss(b, a)) < 1e-12
    assert losses.cycle_loss(a, c) <= losses.cycle_loss(a, b) + losses.cycle_loss(b, c) + 1e-6


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-5, 5)), arrays(np.float64, 4, elements=st.floats(-5, 5)))
def test_losses_non_negative(fake, real):
    fake, real = torch.from_numpy(fake), torch.from_numpy(real)
    assert losses.adv_loss_d(fake, real) >= 0
    assert losses.adv_loss_g(fake) >= 0
    assert losses.cls_loss(torch.stack([fake, real], 1), torch.tensor([0, 1, 1, 0])) >= 0


def test_adv_d_minimised_at_real_one():
    def f(r):
        return losses.adv_loss_d(torch.tensor([0.3]), torch.tensor([r])).item()

    h = 1e-4
    slope = [(f(r + h) - f(r - h)) / (2 * h) for r in (0.9, 1.1)]
    assert slope[0] < 0 < slope[1]


def test_total_ge_gradient_wrt_generator_output():
    """Gradient of the joint objective through toy linear D/E heads on a 4x4 image."""
    g = torch.Generator().manual_seed(0)
    dt = torch.float64
    x = torch.rand(1, 3, 4, 4, generator=g, dtype=dt) * 2 - 1
    x_fake = (torch.rand(1, 3, 4, 4, generator=g, dtype=dt) * 1.6 - 0.8).requires_grad_()
    x_self = torch.rand(1, 3, 4, 4, generator=g, dtype=dt) * 2 - 1
    w_dis = torch.randn(48, generator=g, dtype=dt) * 0.1
    w_cls = torch.randn(2, 48, generator=g, dtype=dt) * 0.1
    w_style = torch.randn(8, 48, generator=g, dtype=dt) * 0.1
    w_content = torch.randn(3, 3, generator=g, dtype=dt)
    z = torch.randn(1, 8, generator=g, dtype=dt)

    def f():
        flat = x_fake.reshape(1, -1)
        dis = flat @ w_dis
        cls = flat @ w_cls.t()
        c_hat = torch.einsum("ij,bjhw->bihw", w_content, x_fake)
        c = torch.einsum("ij,bjhw->bihw", w_content, x)
        x_cyc = torch.tanh(c_hat)
        s_hat = flat @ w_style.t()
        lat_s, lat_c = losses.latent_rec_loss(z, s_hat, c, c_hat)
        return losses.total_ge_loss(
            losses.adv_loss_g(dis), losses.cls_loss(cls, 1), losses.cycle_loss(x, x_cyc),
            losses.img_rec_loss(x, x_self), lat_s + lat_c,
        )

    f().backward()
    with torch.no_grad():
        assert relative_error(x_fake.grad, central_difference(f, x_fake)) < 1e-4
