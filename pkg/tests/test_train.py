import math
from collections import Counter

import numpy as np
import pytest
import torch

from sologan.data import SyntheticSpec, load_split_tensor, make_synthetic
from sologan.errors import ConfigurationError, DatasetError, TrainingDivergenceError
from sologan.networks import NetworkConfig
from sologan.primitives import raw_weight
from sologan.train import TrainConfig, Trainer, build_model, lr_schedule, sample_training_batch, sample_training_indices


def test_xavier_bound_and_zero_biases():
    model = build_model(NetworkConfig(domain_count=2, image_size=64), seed=0)
    conv = model.content_encoder.blocks[0].conv1
    w = raw_weight(conv)
    assert tuple(w.shape) == (256, 256, 3, 3)
    bound = math.sqrt(6 / (256 * 9 + 256 * 9))
    assert bound == pytest.approx(0.0361, abs=1e-4)
    assert w.abs().max() <= bound
    assert w.abs().max() > 0.99 * bound
    for name, p in model.named_parameters():
        if name.endswith(".bias") and "bias_map" not in name and p.dim() == 1:
            assert torch.count_nonzero(p) == 0, name


def test_init_deterministic():
    cfg = NetworkConfig(domain_count=2, image_size=32, base_channels=4)
    a, b = build_model(cfg, seed=5).state_dict(), build_model(cfg, seed=5).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = build_model(cfg, seed=6).state_dict()
    assert not all(torch.equal(a[k], c[k]) for k in a)


@pytest.mark.parametrize("epoch,expected", [(0, 2e-4), (49, 2e-4), (74, 1e-4), (99, 0.0)])
def test_lr_schedule_examples(epoch, expected):
    assert lr_schedule(epoch, TrainConfig()) == pytest.approx(expected, abs=1e-12)


def test_lr_schedule_shape_and_range():
    cfg = TrainConfig(n_epochs_flat=7, n_epochs_decay=5)
    values = [lr_schedule(e, cfg) for e in range(cfg.total_epochs)]
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert values[:7] == [cfg.lr] * 7 and values[-1] == 0
    steps = np.diff(values[6:])
    assert np.allclose(steps, steps[0])
    for bad in (-1, cfg.total_epochs):
        with pytest.raises(ValueError):
            lr_schedule(bad, cfg)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(n_epochs_flat=0, n_epochs_decay=0)
    with pytest.raises(ValueError):
        TrainConfig(lambda_cyc=-1)


@pytest.fixture(scope="module")
def toy_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    spec = SyntheticSpec.with_domains(3, image_size=32, train_per_domain=60, test_per_domain=4, seed=1)
    return make_synthetic(spec, root)


def test_batch_has_one_image_per_domain(toy_ds):
    batch = sample_training_batch(toy_ds, np.random.default_rng(0), 32)
    assert [label for _, label in batch] == [0, 1, 2]
    assert all(img.shape == (3, 32, 32) for img, _ in batch)


def test_sampling_frequencies():
    rng = np.random.default_rng(0)
    assert sample_training_indices([1, 1], rng) == [0, 0]
    draws = Counter(sample_training_indices([2], rng)[0] for _ in range(10_000))
    assert abs(draws[0] / 10_000 - 0.5) < 0.05
    with pytest.raises(DatasetError):
        sample_training_indices([3, 0], rng)


def _trainer(seed=0, n=2, **kw):
    model = build_model(NetworkConfig(domain_count=n, image_size=32, base_channels=4), seed=seed)
    return Trainer(model, TrainConfig(n_epochs_flat=1, n_epochs_decay=1, seed=seed, **kw))


def _snapshot(modules):
    return [p.detach().clone() for m in modules for p in m.parameters()]


def _same(a, b):
    return all(torch.equal(p, q) for p, q in zip(a, b))


def test_target_domain_excludes_source():
    tr = _trainer(n=3)
    y = torch.arange(300) % 3
    with torch.no_grad():
        t = tr.make_tuple(torch.rand(300, 3, 32, 32) * 2 - 1, y)
    assert torch.all(t.y_target != t.y) and t.z.shape == (300, 8)
    assert set(t.y_target[y == 0].tolist()) == {1, 2}


def test_optimizer_partition():
    tr = _trainer()
    x, y = torch.rand(2, 3, 32, 32) * 2 - 1, torch.tensor([0, 1])
    tr.model.train()
    ge, d = tr.model.generator_modules(), [tr.model.discriminator]
    t = tr.make_tuple(x, y)
    before_ge, before_d = _snapshot(ge), _snapshot(d)
    tr.discriminator_step(t)
    assert _same(before_ge, _snapshot(ge))
    assert not _same(before_d, _snapshot(d))
    before_ge, before_d = _snapshot(ge), _snapshot(d)
    tr.generator_step(t)
    assert _same(before_d, _snapshot(d))
    assert not _same(before_ge, _snapshot(ge))


def test_loss_records_deterministic():
    x, y = torch.rand(2, 3, 32, 32) * 2 - 1, torch.tensor([0, 1])
    runs = []
    for _ in range(2):
        tr = _trainer(seed=3)
        runs.append([tr.train_step(x, y) for _ in range(2)])
    assert runs[0] == runs[1]
    expected = {"adv_d", "cls_r", "loss_d", "adv_g", "cls_t", "cyc", "rec_img",
                "rec_latent_style", "rec_latent_content", "loss_ge"}
    assert set(runs[0][0]) == expected


def test_nan_raises_divergence():
    tr = _trainer()
    x = torch.full((2, 3, 32, 32), float("nan"))
    with pytest.raises(TrainingDivergenceError) as err:
        tr.train_step(x, torch.tensor([0, 1]))
    assert err.value.step == 0 and err.value.term


def test_fit_logs_and_checkpoints(toy_ds, tmp_path):
    model = build_model(NetworkConfig(domain_count=3, image_size=32, base_channels=4))
    tr = Trainer(model, TrainConfig(n_epochs_flat=1, n_epochs_decay=1, steps_per_epoch=2))
    tr.fit(toy_ds, tmp_path)
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 4 and tr.step == 4 and tr.epoch == 2
    assert (tmp_path / "checkpoint_epoch0002.npz").exists() and (tmp_path / "latest.npz").exists()


@pytest.mark.slow
def test_single_sample_overfit(tmp_path):
    ds = make_synthetic(SyntheticSpec(image_size=32, train_per_domain=1, test_per_domain=1, seed=2), tmp_path)
    x, y = load_split_tensor(ds, "train", 32)
    model = build_model(NetworkConfig(domain_count=2, image_size=32, base_channels=8), seed=0)
    tr = Trainer(model, TrainConfig(n_epochs_flat=1, n_epochs_decay=0, lr=1e-3, seed=0))
    records = [tr.train_step(x, y) for _ in range(500)]
    tail = np.mean([r["rec_img"] for r in records[-20:]])
    assert tail < 0.05
