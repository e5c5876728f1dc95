"""Experiment configuration and the named presets."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

from .data import CIFAR10_BRIGHT_CLASSES, DatasetSpec
from .diffaug import TransformSpec
from .network import NetworkConfig
from .trainer import TrainConfig

PRESET_VERSION = 1
MODELS = ("cc", "shared")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec
    network: NetworkConfig
    train: TrainConfig
    transforms: tuple[str, ...]
    model: str = "cc"
    theta_init: tuple[tuple[str, float], ...] = ()
    preset: str | None = None
    test_seed: int = 1
    test_subset: int | None = None
    data_root: str = "data"
    out: str = "runs/default"
    preset_version: int = PRESET_VERSION

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {self.model!r}")
        object.__setattr__(self, "transforms", tuple(TransformSpec.of(*self.transforms).names()))
        init = tuple(sorted((str(k), float(v)) for k, v in dict(self.theta_init).items()))
        unknown = {k for k, _ in init} - set(self.transforms)
        if unknown:
            raise ValueError(f"theta_init names transforms not in the spec: {sorted(unknown)}")
        if not all(math.isfinite(v) for _, v in init):
            raise ValueError("theta_init values must be finite")
        object.__setattr__(self, "theta_init", init)
        if self.dataset.split != "train":
            raise ValueError("an experiment trains on the train split")
        if self.network.num_classes != 10:
            raise ValueError("all supported sources have 10 classes")
        if self.test_subset is not None and self.test_subset < 1:
            raise ValueError("test_subset must be positive")

    @property
    def spec(self) -> TransformSpec:
        return TransformSpec.of(*self.transforms)

    def test_dataset(self) -> DatasetSpec:
        """Matched test split: same corruption, its own fixed seed (independent of model and training seed)."""
        return self.dataset.with_split("test", self.test_seed, self.test_subset)

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "preset_version": self.preset_version,
            "model": self.model,
            "transforms": list(self.transforms),
            "theta_init": dict(self.theta_init),
            "dataset": self.dataset.to_dict(),
            "network": {**asdict(self.network), "channels": list(self.network.channels)},
            "train": self.train.to_dict(),
            "test_seed": self.test_seed,
            "test_subset": self.test_subset,
            "data_root": self.data_root,
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        net = dict(d["network"])
        if "channels" in net:
            net["channels"] = tuple(net["channels"])
        return cls(
            dataset=DatasetSpec.from_dict(d["dataset"]),
            network=NetworkConfig(**net),
            train=TrainConfig(**d["train"]),
            transforms=tuple(d["transforms"]),
            model=d.get("model", "cc"),
            theta_init=tuple(d.get("theta_init", {}).items()),
            preset=d.get("preset"),
            test_seed=d.get("test_seed", 1),
            test_subset=d.get("test_subset"),
            data_root=d.get("data_root", "data"),
            out=d.get("out", "runs/default"),
            preset_version=d.get("preset_version", PRESET_VERSION),
        )


def _mnist(half_widths: dict) -> dict:
    return {
        "transforms": ["rotation"],
        "dataset": {"source": "mnist", "corruption": "rotation",
                    "half_widths": {str(k): v for k, v in half_widths.items()}},
        "network": {"in_channels": 1, "image_size": 28, "num_classes": 10},
        "train": {"epochs": 10},
    }


def _presets() -> dict[str, dict]:
    pi = math.pi
    rot69 = {k: (pi / 4 if k in (6, 9) else pi) for k in range(10)}
    graded = {0: 0.0}
    graded.update({k: pi / 3 for k in (1, 4, 7)})
    graded.update({k: pi / 4 for k in (2, 5, 8)})
    graded.update({k: pi / 6 for k in (3, 6, 9)})
    return {
        "mnist-rot-69": _mnist(rot69),
        "mnist-rot-graded": _mnist(graded),
        "cifar10-brightness": {
            "transforms": ["brightness"],
            "dataset": {"source": "cifar10", "corruption": "brightness",
                        "half_widths": {name: 0.2 for name in CIFAR10_BRIGHT_CLASSES}},
            "network": {"in_channels": 3, "image_size": 32, "num_classes": 10},
            "train": {"epochs": 10},
        },
        "cifar100-natural": {
            "transforms": ["rotation"],
            "dataset": {"source": "cifar100-subset", "corruption": None, "half_widths": {}},
            "network": {"in_channels": 3, "image_size": 32, "num_classes": 10},
            "train": {"epochs": 50},
        },
    }


PRESETS = tuple(_presets())

_BASE_TRAIN = {"lam": 0.05, "learning_rate": 1e-3, "weight_decay": 1e-4, "epochs": 10,
               "batch_size": 128, "seed": 0, "n_test_copies": 4}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "half_widths":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def expand(raw: dict) -> ExperimentConfig:
    """Expand a (possibly partial) config document into a validated config.

    A ``preset`` key supplies defaults; every other key overrides them.
    """
    raw = dict(raw)
    base = {"train": dict(_BASE_TRAIN), "network": {}, "dataset": {}}
    name = raw.get("preset")
    if name is not None:
        presets = _presets()
        if name not in presets:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        base = _merge(base, presets[name])
    doc = _merge(base, {k: v for k, v in raw.items() if v is not None})
    for key in ("transforms", "dataset", "network"):
        if not doc.get(key):
            raise ValueError(f"config needs {key!r} (or a preset)")
    doc["dataset"] = {**doc["dataset"], "split": "train"}
    return ExperimentConfig.from_dict(doc)


def load_config_file(path) -> dict:
    return json.loads(Path(path).read_text())
