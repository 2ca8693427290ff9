"""Single-file checkpoints: an ``.npz`` archive of named arrays plus a JSON metadata entry."""
from __future__ import annotations

import json
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointVersionError, ConfigurationError, CorruptCheckpointError
from .networks import NetworkConfig, SoloGAN

FORMAT_VERSION = 1
META_KEY = "__meta__"


@dataclass
class CheckpointBundle:
    epoch: int
    step: int
    network_config: dict
    train_config: dict
    model: dict[str, np.ndarray]
    optimizers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    optimizer_groups: dict[str, list] = field(default_factory=dict)
    torch_rng: np.ndarray | None = None
    data_rng: dict | None = None
    domains: list | None = None
    version: int = FORMAT_VERSION


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().contiguous().numpy().copy()


def bundle_from_trainer(trainer, domains=None) -> CheckpointBundle:
    model = trainer.model
    optimizers, groups = {}, {}
    for name, opt in (("opt_d", trainer.opt_d), ("opt_ge", trainer.opt_ge)):
        sd = opt.state_dict()
        optimizers[name] = {
            f"{idx}/{key}": _to_numpy(val if torch.is_tensor(val) else torch.tensor(val))
            for idx, state in sd["state"].items()
            for key, val in state.items()
        }
        groups[name] = sd["param_groups"]
    return CheckpointBundle(
        epoch=trainer.epoch,
        step=trainer.step,
        network_config=model.cfg.to_dict(),
        train_config=trainer.cfg.to_dict(),
        model={k: _to_numpy(v) for k, v in model.state_dict().items()},
        optimizers=optimizers,
        optimizer_groups=groups,
        torch_rng=_to_numpy(trainer.torch_rng.get_state()),
        data_rng=trainer.data_rng.bit_generator.state,
        domains=list(domains) if domains is not None else getattr(trainer, "domains", None),
    )


def bundle_from_model(model: SoloGAN, domains=None, epoch=0) -> CheckpointBundle:
    return CheckpointBundle(
        epoch=epoch, step=0, network_config=model.cfg.to_dict(), train_config={},
        model={k: _to_numpy(v) for k, v in model.state_dict().items()},
        domains=list(domains) if domains is not None else None,
    )


def save_checkpoint(obj, path, domains=None) -> Path:
    """Write a bundle (or a Trainer / SoloGAN, converted first) atomically."""
    if isinstance(obj, CheckpointBundle):
        bundle = obj
    elif isinstance(obj, SoloGAN):
        bundle = bundle_from_model(obj, domains)
    else:
        bundle = bundle_from_trainer(obj, domains)
    arrays = {f"model/{k}": v for k, v in bundle.model.items()}
    for name, state in bundle.optimizers.items():
        arrays.update({f"{name}/{k}": v for k, v in state.items()})
    if bundle.torch_rng is not None:
        arrays["rng/torch"] = bundle.torch_rng
    meta = {
        "version": bundle.version,
        "epoch": bundle.epoch,
        "step": bundle.step,
        "network_config": bundle.network_config,
        "train_config": bundle.train_config,
        "optimizer_groups": bundle.optimizer_groups,
        "data_rng": bundle.data_rng,
        "domains": bundle.domains,
    }
    arrays[META_KEY] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> CheckpointBundle:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {k: archive[k] for k in archive.files}
        meta = json.loads(arrays.pop(META_KEY).tobytes().decode())
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, EOFError, ValueError, KeyError, OSError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has format version {meta.get('version')}, expected {FORMAT_VERSION}"
        )
    model, optimizers, torch_rng = {}, {}, None
    for key, arr in arrays.items():
        group, _, name = key.partition("/")
        if group == "model":
            model[name] = arr
        elif group == "rng":
            torch_rng = arr
        else:
            optimizers.setdefault(group, {})[name] = arr
    return CheckpointBundle(
        epoch=meta["epoch"], step=meta["step"], network_config=meta["network_config"],
        train_config=meta["train_config"], model=model, optimizers=optimizers,
        optimizer_groups=meta.get("optimizer_groups", {}), torch_rng=torch_rng,
        data_rng=meta.get("data_rng"), domains=meta.get("domains"), version=meta["version"],
    )


def model_from_bundle(bundle: CheckpointBundle, expected: NetworkConfig | None = None) -> SoloGAN:
    cfg = NetworkConfig(**bundle.network_config)
    if expected is not None and expected.domain_count != cfg.domain_count:
        raise ConfigurationError(
            f"checkpoint has {cfg.domain_count} domains, configuration expects {expected.domain_count}"
        )
    model = SoloGAN(cfg)
    state = {k: torch.from_numpy(v.copy()) for k, v in bundle.model.items()}
    model.load_state_dict(state, strict=True)
    model.eval()
    return model


def _optimizer_state(flat: dict, groups: list):
    state: dict[int, dict] = {}
    for key, arr in flat.items():
        idx, _, name = key.partition("/")
        state.setdefault(int(idx), {})[name] = torch.from_numpy(arr.copy())
    return {"state": state, "param_groups": groups}


def restore_trainer(bundle: CheckpointBundle, expected: NetworkConfig | None = None, train_cfg=None):
    """Rebuild a Trainer (model, optimizers, RNG streams, counters) from a bundle."""
    from .train import TrainConfig, Trainer

    model = model_from_bundle(bundle, expected)
    cfg = train_cfg if train_cfg is not None else TrainConfig(**bundle.train_config)
    trainer = Trainer(model, cfg)
    for name, opt in (("opt_d", trainer.opt_d), ("opt_ge", trainer.opt_ge)):
        if name in bundle.optimizer_groups:
            opt.load_state_dict(_optimizer_state(bundle.optimizers.get(name, {}), bundle.optimizer_groups[name]))
    if bundle.torch_rng is not None:
        trainer.torch_rng.set_state(torch.from_numpy(bundle.torch_rng.copy()))
    if bundle.data_rng is not None:
        trainer.data_rng.bit_generator.state = bundle.data_rng
    trainer.epoch = bundle.epoch
    trainer.step = bundle.step
    trainer.domains = bundle.domains
    model.train()
    return trainer
