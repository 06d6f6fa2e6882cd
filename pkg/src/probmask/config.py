"""Run configuration: a YAML document with ``model``, ``data`` and ``train`` sections.

Every key is optional. Unknown keys are an error so that a typo never silently
falls back to a default. ``canonical()`` returns the fully populated form, which
is what gets hashed and echoed into the run directory.

Training defaults are the CIFAR-scale settings: batch 256, 300 epochs, weight lr
0.1 with momentum 0.9, probability lr 6e-3, ramp from epoch 48 to 180, no warmup.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import netcore
from .data import Dataset, load_mnist_split, synth_blobs
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


MODEL_DEFAULTS = {"arch": "mlp", "hidden": [300, 100], "bias": True,
                  "channels": [8, 16], "dense": 64}
DATA_DEFAULTS = {
    "mnist": {"source": "mnist", "path": "data/mnist5k", "train_size": 2000,
              "eval_size": None, "subset_seed": 0},
    "blobs": {"source": "blobs", "seed": 0, "n_per_class": 100, "eval_per_class": 50,
              "classes": 10, "dim": 20, "spread": 0.3},
}
TRAIN_DEFAULTS = {f.name: f.default for f in dataclasses.fields(TrainConfig)}


@dataclass
class RunConfig:
    model: dict = field(default_factory=lambda: dict(MODEL_DEFAULTS))
    data: dict = field(default_factory=lambda: dict(DATA_DEFAULTS["mnist"]))
    train: TrainConfig = field(default_factory=TrainConfig)

    def canonical(self) -> dict:
        return {"model": dict(self.model), "data": dict(self.data),
                "train": dataclasses.asdict(self.train)}

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def dump(self) -> str:
        return yaml.safe_dump(self.canonical(), sort_keys=True)

    def with_overrides(self, seed: int | None = None, dataset: str | None = None,
                       mode: str | None = None) -> "RunConfig":
        train = self.train
        if seed is not None:
            train = dataclasses.replace(train, seed=seed)
        if mode is not None:
            train = dataclasses.replace(train, mode=mode)
        data = parse_dataset_flag(dataset, self.data) if dataset else dict(self.data)
        return RunConfig(dict(self.model), data, train)

    def load_data(self) -> tuple[Dataset, Dataset]:
        return load_data(self.data)

    def build_spec(self, dataset: Dataset) -> netcore.NetSpec:
        return build_spec(self.model, dataset)


def _merge(section: str, given, defaults: dict) -> dict:
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key '{section}.{unknown[0]}'")
    out = dict(defaults)
    out.update(given)
    return out


def _coerce(key: str, value, default):
    # YAML 1.1 reads "6e-3" as a string, so numbers are converted explicitly
    kind = type(default)
    if kind is bool:
        if not isinstance(value, bool):
            raise ValueError(f"{key} must be true or false")
        return value
    if isinstance(value, bool):
        raise ValueError(f"{key} must be a number, got {value!r}")
    if kind is int:
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{key} must be an integer, got {value!r}")
        return int(value)
    if kind is float:
        return float(value)
    return value


def parse_config(doc) -> RunConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping with model/data/train sections")
    unknown = sorted(set(doc) - {"model", "data", "train"})
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}'")
    model = _merge("model", doc.get("model"), MODEL_DEFAULTS)
    if model["arch"] not in ("mlp", "conv4"):
        raise ConfigError(f"model.arch must be 'mlp' or 'conv4', got {model['arch']!r}")
    raw_data = doc.get("data") or {}
    source = raw_data.get("source", "mnist") if isinstance(raw_data, dict) else None
    if source not in DATA_DEFAULTS:
        raise ConfigError(f"data.source must be 'mnist' or 'blobs', got {source!r}")
    data = _merge("data", raw_data, DATA_DEFAULTS[source])
    train_doc = _merge("train", doc.get("train"), TRAIN_DEFAULTS)
    try:
        train = TrainConfig(**{k: _coerce(k, v, TRAIN_DEFAULTS[k]) for k, v in train_doc.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc
    return RunConfig(model, data, train)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc)


def parse_dataset_flag(flag: str, base: dict | None = None) -> dict:
    """``mnist:<dir>`` or ``blobs:<seed>``; other fields come from ``base`` when compatible."""
    kind, _, arg = flag.partition(":")
    if kind not in DATA_DEFAULTS or not arg:
        raise ConfigError(f"--dataset must be mnist:<dir> or blobs:<seed>, got {flag!r}")
    data = dict(base) if base and base.get("source") == kind else dict(DATA_DEFAULTS[kind])
    if kind == "mnist":
        data["path"] = arg
    else:
        try:
            data["seed"] = int(arg)
        except ValueError as exc:
            raise ConfigError(f"blobs seed must be an integer, got {arg!r}") from exc
    return data


def load_data(data: dict) -> tuple[Dataset, Dataset]:
    """Returns ``(train, eval)``."""
    if data["source"] == "mnist":
        return load_mnist_split(data["path"], data["train_size"], data["eval_size"],
                                data["subset_seed"])
    per_train, per_eval = data["n_per_class"], data["eval_per_class"]
    full = synth_blobs(data["seed"], per_train + per_eval, data["classes"], data["dim"],
                       data["spread"])
    n_train = per_train * data["classes"]
    if per_eval == 0:
        return full, full
    return full.subset(slice(0, n_train)), full.subset(slice(n_train, None))


def build_spec(model: dict, dataset: Dataset) -> netcore.NetSpec:
    example_shape = tuple(dataset.inputs.shape[1:])
    if model["arch"] == "mlp":
        n_in = 1
        for d in example_shape:
            n_in *= d
        return netcore.mlp([n_in, *model["hidden"], dataset.num_classes], bias=model["bias"],
                           input_shape=example_shape)
    if len(example_shape) != 3:
        raise ConfigError("conv4 needs image data shaped (channels, rows, cols)")
    return netcore.conv4(example_shape, dataset.num_classes, tuple(model["channels"]),
                         model["dense"], bias=model["bias"])
