"""Multi-domain image folders, preprocessing and a synthetic shapes dataset.

Layout::

    root/train/<domain>/*.png|jpg
    root/test/<domain>/*.png|jpg

Domain labels are the lexicographic order of the domain directory names
unless an explicit list is declared. Labels end up baked into checkpoints,
so keep the names stable.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import ConfigurationError, DatasetError, DecodeError

log = logging.getLogger(__name__)

SPLITS = ("train", "test")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
RESIZE_FACTOR = 1.12


@dataclass(frozen=True)
class MultiDomainDataset:
    root: Path
    domains: tuple[str, ...]
    train: dict[str, tuple[Path, ...]]
    test: dict[str, tuple[Path, ...]]

    @property
    def domain_count(self):
        return len(self.domains)

    def label_of(self, name: str) -> int:
        try:
            return self.domains.index(name)
        except ValueError:
            raise ConfigurationError(f"unknown domain {name!r}; available: {', '.join(self.domains)}") from None

    def name_of(self, label: int) -> str:
        return self.domains[label]

    def split(self, split: str) -> dict[str, tuple[Path, ...]]:
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        return self.train if split == "train" else self.test

    def counts(self, split: str = "train") -> tuple[int, ...]:
        files = self.split(split)
        return tuple(len(files[d]) for d in self.domains)

    def items(self, split: str = "train"):
        """Yield ``(path, label)`` over a split in domain order."""
        files = self.split(split)
        for label, name in enumerate(self.domains):
            for path in files[name]:
                yield path, label


def _list_images(folder: Path):
    return tuple(sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES))


def _check_header(path: Path):
    try:
        with Image.open(path) as im:
            im.size
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc


def load_dataset(root, declared_domains=None, check_images=True) -> MultiDomainDataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    for split in SPLITS:
        if not (root / split).is_dir():
            raise DatasetError(f"missing split directory {root / split}")

    found = {split: sorted(p.name for p in (root / split).iterdir() if p.is_dir()) for split in SPLITS}
    if found["train"] != found["test"]:
        raise DatasetError(
            f"train domains {found['train']} and test domains {found['test']} differ under {root}"
        )
    if declared_domains is not None:
        declared = tuple(declared_domains)
        if sorted(declared) != found["train"]:
            raise ConfigurationError(f"declared domains {list(declared)} do not match {found['train']} under {root}")
        domains = declared
    else:
        domains = tuple(found["train"])
    if len(domains) < 2:
        raise DatasetError(f"need at least 2 domains under {root / 'train'}, found {len(domains)}")

    files = {}
    for split in SPLITS:
        files[split] = {}
        for name in domains:
            images = _list_images(root / split / name)
            if not images:
                raise DatasetError(f"domain {name!r} has no images in {root / split / name}")
            if check_images:
                for path in images:
                    _check_header(path)
            files[split][name] = images
    ds = MultiDomainDataset(root, domains, files["train"], files["test"])
    log.info("loaded %s: domains=%s train=%s test=%s", root, domains, ds.counts("train"), ds.counts("test"))
    return ds


def read_image(path) -> Image.Image:
    try:
        with Image.open(path) as im:
            return im.convert("RGB")
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc


def preprocess(image, image_size: int, train_mode: bool = False, rng: np.random.Generator | None = None):
    """Resize the shorter side to ``1.12 * image_size``, crop, optionally flip, map to [-1, 1].

    Train mode uses a random crop and a random horizontal flip drawn from
    ``rng``; test mode center-crops and is deterministic.
    """
    if isinstance(image, (str, Path)):
        image = read_image(image)
    elif isinstance(image, np.ndarray):
        image = Image.fromarray(image.astype(np.uint8))
    image = image.convert("RGB")
    w, h = image.size
    target = max(image_size, int(round(image_size * RESIZE_FACTOR)))
    scale = target / min(w, h)
    new_w, new_h = max(image_size, int(round(w * scale))), max(image_size, int(round(h * scale)))
    if (new_w, new_h) != (w, h):
        image = image.resize((new_w, new_h), Image.BICUBIC)
    if train_mode:
        rng = rng if rng is not None else np.random.default_rng()
        left = int(rng.integers(0, new_w - image_size + 1))
        top = int(rng.integers(0, new_h - image_size + 1))
        flip = bool(rng.integers(0, 2))
    else:
        left, top, flip = (new_w - image_size) // 2, (new_h - image_size) // 2, False
    arr = np.asarray(image.crop((left, top, left + image_size, top + image_size)), dtype=np.float32)
    if flip:
        arr = arr[:, ::-1]
    arr = arr / 127.5 - 1.0
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def load_split_tensor(ds: MultiDomainDataset, split: str, image_size: int, limit_per_domain=None):
    """Deterministically preprocess a whole split. Returns ``(images, labels)``."""
    images, labels = [], []
    files = ds.split(split)
    for label, name in enumerate(ds.domains):
        for path in files[name][:limit_per_domain]:
            images.append(preprocess(path, image_size, train_mode=False))
            labels.append(label)
    return torch.stack(images), torch.tensor(labels, dtype=torch.long)


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """``3 x H x W`` tensor in [-1, 1] to an ``H x W x 3`` uint8 array."""
    arr = ((x.detach().float().clamp(-1, 1) + 1) * 127.5).round().byte()
    return arr.permute(1, 2, 0).cpu().numpy()


# ---------------------------------------------------------------------------
# Synthetic shapes


@dataclass
class DomainRecipe:
    name: str
    shape: str = "ellipse"
    palette: list = field(default_factory=lambda: [[220, 40, 40]])
    texture: str = "solid"

    def __post_init__(self):
        if self.shape not in ("ellipse", "rectangle"):
            raise ConfigurationError(f"unknown shape family {self.shape!r}")
        if self.texture not in ("solid", "stripes", "dots"):
            raise ConfigurationError(f"unknown texture {self.texture!r}")
        if not self.palette:
            raise ConfigurationError(f"domain {self.name!r} has an empty palette")


# one base colour per domain: colour is domain-specific, per-image jitter and
# stripe/dot geometry carry the within-domain style
BUILTIN_RECIPES = [
    DomainRecipe("a_solid", "ellipse", [[220, 50, 40]], "solid"),
    DomainRecipe("b_stripes", "ellipse", [[40, 60, 200]], "stripes"),
    DomainRecipe("c_dots", "ellipse", [[90, 160, 40]], "dots"),
]


@dataclass
class SyntheticSpec:
    domains: list = field(default_factory=lambda: list(BUILTIN_RECIPES[:2]))
    image_size: int = 64
    train_per_domain: int = 200
    test_per_domain: int = 50
    seed: int = 0

    def __post_init__(self):
        self.domains = [d if isinstance(d, DomainRecipe) else DomainRecipe(**d) for d in self.domains]
        if len(self.domains) < 2:
            raise ConfigurationError("a synthetic dataset needs at least 2 domains")
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate domain names in {names}")
        if self.image_size < 8 or self.train_per_domain < 1 or self.test_per_domain < 1:
            raise ConfigurationError("image_size >= 8 and at least one image per split are required")

    @classmethod
    def with_domains(cls, n: int, **kwargs):
        if not 2 <= n <= len(BUILTIN_RECIPES):
            raise ConfigurationError(f"built-in recipes cover 2..{len(BUILTIN_RECIPES)} domains")
        return cls(domains=[DomainRecipe(**asdict(r)) for r in BUILTIN_RECIPES[:n]], **kwargs)

    def to_dict(self):
        return asdict(self)


def _render(recipe: DomainRecipe, size: int, rng: np.random.Generator) -> np.ndarray:
    # content: placement, extent, rotation and background level
    cx, cy = rng.uniform(0.3, 0.7, size=2) * size
    ax, ay = rng.uniform(0.16, 0.3, size=2) * size
    theta = rng.uniform(0, np.pi)
    background = rng.uniform(150, 215)
    # style: colour, stripe/dot geometry
    color = np.asarray(recipe.palette[int(rng.integers(len(recipe.palette)))], dtype=np.float64)
    color = np.clip(color + rng.normal(0, 12, size=3), 0, 255)
    period = rng.uniform(0.08, 0.18) * size
    angle = rng.uniform(0, np.pi)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    if recipe.shape == "ellipse":
        mask = (u / ax) ** 2 + (v / ay) ** 2 <= 1
    else:
        mask = (np.abs(u) <= ax) & (np.abs(v) <= ay)

    img = np.full((size, size, 3), background)
    fill = np.broadcast_to(color, (size, size, 3)).copy()
    if recipe.texture == "stripes":
        phase = (xx * np.cos(angle) + yy * np.sin(angle)) / period
        dark = (np.floor(phase) % 2) == 1
        fill[dark] = 20
    elif recipe.texture == "dots":
        px = (xx * np.cos(angle) + yy * np.sin(angle)) / period
        py = (-xx * np.sin(angle) + yy * np.cos(angle)) / period
        r = np.hypot(px - np.round(px), py - np.round(py))
        fill[r < 0.3] = 245
    img[mask] = fill[mask]
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _probe_features(img: np.ndarray) -> np.ndarray:
    x = img.astype(np.float64) / 255.0
    grad = np.abs(np.diff(x, axis=0)).mean() + np.abs(np.diff(x, axis=1)).mean()
    return np.concatenate([x.mean(axis=(0, 1)), x.std(axis=(0, 1)), [grad, 1.0]])


def _check_separable(samples: list[np.ndarray], labels: np.ndarray, n: int, threshold=0.95):
    feats = np.stack([_probe_features(s) for s in samples])
    targets = np.eye(n)[labels]
    coef, *_ = np.linalg.lstsq(feats, targets, rcond=None)
    acc = float((np.argmax(feats @ coef, axis=1) == labels).mean())
    if acc < threshold:
        raise ConfigurationError(f"synthetic recipes are not linearly separable (probe accuracy {acc:.3f})")
    return acc


def make_synthetic(spec: SyntheticSpec, out_path) -> MultiDomainDataset:
    """Render ``spec`` to disk in the ``load_dataset`` layout and load it back."""
    out = Path(out_path)
    rng = np.random.default_rng(spec.seed)
    probe_imgs, probe_labels = [], []
    try:
        for split, count in (("train", spec.train_per_domain), ("test", spec.test_per_domain)):
            for label, recipe in enumerate(spec.domains):
                folder = out / split / recipe.name
                folder.mkdir(parents=True, exist_ok=True)
                for i in range(count):
                    img = _render(recipe, spec.image_size, rng)
                    Image.fromarray(img).save(folder / f"{i:05d}.png", optimize=False)
                    if split == "train" and i < 50:
                        probe_imgs.append(img)
                        probe_labels.append(label)
    except OSError as exc:
        raise DatasetError(f"cannot write synthetic dataset to {out}: {exc}") from exc
    _check_separable(probe_imgs, np.asarray(probe_labels), len(spec.domains))
    return load_dataset(out, [d.name for d in spec.domains])
