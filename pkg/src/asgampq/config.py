"""Experiment configuration (JSON) with strict key checking.

Schema (every key optional unless marked)::

    {
      "proxy":  DatasetSpec,            # required
      "target": DatasetSpec,            # required, may carry "transform"
      "model": [16, 64, 64, 4],
      "candidates": {"weight_bits": [2, 3, 4, 6], "act_bits": [2, 3, 4, 6]},
      "asga": {"rho0", "rho_max", "phi", "mu", "epsilon", "lambda", "lr", "gap_ema"},
      "budget": null,                   # null -> budget_fraction * max BOPs
      "budget_fraction": 0.6,
      "epochs_search": 20, "epochs_finetune": 5,
      "batch_size": 64, "arch_lr": 0.01, "finetune_lr": 0.04,
      "val_fraction": 0.2, "test_fraction": 0.2,
      "fix_first_last": true, "fixed_bits": 8,
      "power_iters": 20,
      "seed": 0, "seeds": null, "output_dir": "runs"
    }

DatasetSpec keys: kind, n_samples, n_features, n_classes, seed, centers_seed,
separation, cluster_std, noise, path, labels_path, transform
{rotation_deg, shift, label_noise}.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSpec, Transform
from .errors import ConfigError, ContractError
from .optim import AsgaParams
from .supernet import BitCandidates


def _check_keys(d: dict, allowed, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def _build(cls, d: dict, where: str, rename: dict | None = None):
    rename = rename or {}
    names = {f.name for f in dataclasses.fields(cls)}
    allowed = {rename.get(n, n) for n in names}
    _check_keys(d, allowed, where)
    inverse = {v: k for k, v in rename.items()}
    kwargs = {inverse.get(k, k): v for k, v in d.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ContractError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def dataset_from_dict(d: dict, where: str) -> DatasetSpec:
    d = dict(d)
    tf = d.pop("transform", None)
    if tf is not None:
        d["transform"] = _build(Transform, tf, f"{where}.transform")
    return _build(DatasetSpec, d, where)


def dataset_to_dict(spec: DatasetSpec) -> dict:
    d = dataclasses.asdict(spec)
    if spec.transform is None:
        d.pop("transform")
    return d


ASGA_RENAME = {"lam": "lambda"}


@dataclass
class ExperimentConfig:
    proxy: DatasetSpec
    target: DatasetSpec
    model: list[int] = field(default_factory=lambda: [16, 64, 64, 4])
    candidates: BitCandidates = field(default_factory=BitCandidates)
    asga: AsgaParams = field(default_factory=AsgaParams)
    budget: float | None = None
    budget_fraction: float = 0.6
    epochs_search: int = 20
    epochs_finetune: int = 5
    batch_size: int = 64
    arch_lr: float = 0.01
    finetune_lr: float = 0.04
    val_fraction: float = 0.2
    test_fraction: float = 0.2
    fix_first_last: bool = True
    fixed_bits: int = 8
    power_iters: int = 20
    seed: int = 0
    seeds: list[int] | None = None
    output_dir: str = "runs"

    def __post_init__(self):
        if self.epochs_search < 1 or self.epochs_finetune < 1:
            raise ConfigError("epochs_search and epochs_finetune must be >= 1")
        if len(self.model) < 2 or any(int(s) < 1 for s in self.model):
            raise ConfigError(f"model must list >= 2 positive layer sizes, got {self.model}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 < self.val_fraction < 1 or not 0 < self.test_fraction < 1:
            raise ConfigError("val_fraction and test_fraction must lie in (0, 1)")
        if self.proxy.transform is not None:
            raise ConfigError("only the target dataset may carry a transform")
        for label, ds in (("proxy", self.proxy), ("target", self.target)):
            if ds.kind != "idx-file" and ds.n_features != self.model[0]:
                raise ConfigError(f"{label} has {ds.n_features} features, model input is {self.model[0]}")
            if ds.n_classes != self.model[-1]:
                raise ConfigError(f"{label} has {ds.n_classes} classes, model output is {self.model[-1]}")
        if self.budget is not None and self.budget <= 0:
            raise ConfigError("budget must be positive")

    @property
    def run_seeds(self) -> list[int]:
        return list(self.seeds) if self.seeds else [self.seed]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        _check_keys(d, names, "config")
        d = dict(d)
        for req in ("proxy", "target"):
            if req not in d:
                raise ConfigError(f"config: missing required key {req!r}")
        d["proxy"] = dataset_from_dict(d["proxy"], "proxy")
        d["target"] = dataset_from_dict(d["target"], "target")
        if "candidates" in d:
            d["candidates"] = _build(BitCandidates, d["candidates"], "candidates")
        if "asga" in d:
            d["asga"] = _build(AsgaParams, d["asga"], "asga", ASGA_RENAME)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"config: {exc}") from exc

    def to_dict(self) -> dict:
        asga = dataclasses.asdict(self.asga)
        asga["lambda"] = asga.pop("lam")
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        out.update(proxy=dataset_to_dict(self.proxy), target=dataset_to_dict(self.target),
                   candidates={"weight_bits": list(self.candidates.weight_bits),
                               "act_bits": list(self.candidates.act_bits)},
                   asga=asga, model=list(self.model))
        return out

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_asga(self, **changes) -> "ExperimentConfig":
        return self.replace(asga=self.asga.replace(**changes))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(d)
