import hashlib

import numpy as np
import pytest
import torch
from PIL import Image

from sologan.data import (
    SyntheticSpec, load_dataset, load_split_tensor, make_synthetic, preprocess,
)
from sologan.errors import ConfigurationError, DatasetError, DecodeError
from sologan.metrics import probe_accuracy, train_probe


def _write_layout(root, counts):
    for split in ("train", "test"):
        for name, n in counts.items():
            d = root / split / name
            d.mkdir(parents=True)
            for i in range(n):
                Image.new("RGB", (4, 4), (i % 256, 0, 0)).save(d / f"{i}.png")


def test_load_counts_two_domains(tmp_path):
    _write_layout(tmp_path, {"cat": 771, "dog": 1264})
    ds = load_dataset(tmp_path, check_images=False)
    assert ds.domains == ("cat", "dog")
    assert ds.counts("train") == (771, 1264)


def test_declared_domains_must_match(tmp_path):
    _write_layout(tmp_path, {"a": 1, "b": 1})
    with pytest.raises(ConfigurationError):
        load_dataset(tmp_path, ["a", "c"])
    ds = load_dataset(tmp_path, ["b", "a"])
    assert ds.domains == ("b", "a") and ds.label_of("a") == 1


def test_zero_byte_image_named(tmp_path):
    _write_layout(tmp_path, {"a": 1, "b": 1})
    bad = tmp_path / "train" / "a" / "broken.png"
    bad.write_bytes(b"")
    with pytest.raises(DecodeError, match="broken.png"):
        load_dataset(tmp_path)


def test_missing_split_and_empty_domain(tmp_path):
    with pytest.raises(DatasetError, match="does not exist"):
        load_dataset(tmp_path / "nope")
    (tmp_path / "train" / "a").mkdir(parents=True)
    with pytest.raises(DatasetError, match="test"):
        load_dataset(tmp_path)
    (tmp_path / "test" / "a").mkdir(parents=True)
    (tmp_path / "train" / "b").mkdir()
    (tmp_path / "test" / "b").mkdir()
    with pytest.raises(DatasetError, match="no images"):
        load_dataset(tmp_path)


def test_label_name_bijection(tmp_path):
    _write_layout(tmp_path, {"x": 1, "y": 1, "z": 1})
    ds = load_dataset(tmp_path)
    assert all(ds.label_of(ds.name_of(i)) == i for i in range(ds.domain_count))


def test_preprocess_shape_range_and_endpoints():
    rng = np.random.default_rng(0)
    img = Image.fromarray(rng.integers(0, 256, (300, 400, 3), dtype=np.uint8))
    out = preprocess(img, 256, train_mode=True, rng=rng)
    assert out.shape == (3, 256, 256) and out.min() >= -1 and out.max() <= 1
    assert out.min() < 0 < out.max()
    white = preprocess(Image.new("RGB", (10, 10), (255, 255, 255)), 16)
    black = preprocess(Image.new("RGB", (10, 10), (0, 0, 0)), 16)
    assert torch.all(white == 1.0) and torch.all(black == -1.0)


def test_preprocess_test_mode_deterministic(tmp_path):
    rng = np.random.default_rng(1)
    path = tmp_path / "img.png"
    Image.fromarray(rng.integers(0, 256, (70, 90, 3), dtype=np.uint8)).save(path)
    assert torch.equal(preprocess(path, 64), preprocess(path, 64))


def test_make_synthetic_counts_and_roundtrip(tmp_path):
    spec = SyntheticSpec(image_size=64, train_per_domain=200, test_per_domain=50, seed=7)
    ds = make_synthetic(spec, tmp_path / "a")
    files = list((tmp_path / "a").rglob("*.png"))
    assert len(files) == 500
    again = load_dataset(tmp_path / "a")
    assert again.domains == ds.domains == tuple(d.name for d in spec.domains)
    assert again.counts("train") == (200, 200) and again.counts("test") == (50, 50)


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.png")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_make_synthetic_deterministic(tmp_path):
    spec = SyntheticSpec(image_size=32, train_per_domain=10, test_per_domain=5, seed=3)
    make_synthetic(spec, tmp_path / "a")
    make_synthetic(spec, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_synthetic_three_domains(tmp_path):
    ds = make_synthetic(SyntheticSpec.with_domains(3, image_size=32, train_per_domain=60, test_per_domain=4), tmp_path)
    assert ds.domain_count == 3


def test_synthetic_spec_validation():
    with pytest.raises(ConfigurationError):
        SyntheticSpec(domains=[{"name": "a"}])
    with pytest.raises(ConfigurationError):
        SyntheticSpec(domains=[{"name": "a"}, {"name": "b", "texture": "plaid"}])


def test_synthetic_separable_by_conv_probe(tmp_path):
    import time

    ds = make_synthetic(SyntheticSpec(image_size=64, train_per_domain=200, test_per_domain=50, seed=7), tmp_path)
    start = time.perf_counter()
    x, y = load_split_tensor(ds, "train", 64)
    probe = train_probe(x, y, ds.domain_count, epochs=5, seed=0)
    elapsed = time.perf_counter() - start
    tx, ty = load_split_tensor(ds, "test", 64)
    assert probe_accuracy(probe, tx, ty) >= 0.99
    assert elapsed < 60
