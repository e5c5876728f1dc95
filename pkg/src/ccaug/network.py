"""Five-conv, one-linear classifier producing log class probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

CONV_NAMES = ("conv1", "conv2", "conv3", "conv4", "conv5")
POOL_AFTER = {"conv2", "conv4"}


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 1
    image_size: int = 28
    num_classes: int = 10
    channels: tuple[int, ...] = (32, 32, 64, 64, 128)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != len(CONV_NAMES):
            raise ValueError(f"exactly {len(CONV_NAMES)} conv layers, got {len(self.channels)}")
        if min(self.channels) < 1 or self.in_channels < 1 or self.num_classes < 1:
            raise ValueError("channel and class counts must be positive")
        if self.image_size % 4:
            raise ValueError("image size must be divisible by 4 (two 2x2 pools)")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out, cin = {}, self.in_channels
        for name, c in zip(CONV_NAMES, self.channels):
            out[name] = (c, cin, 3, 3)
            cin = c
        out["fc_w"] = (cin, self.num_classes)
        out["fc_b"] = (self.num_classes,)
        return out


def init_weights(config: NetworkConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Kaiming-uniform (fan-in) weights and zero biases."""
    weights = {}
    for name, shape in config.shapes().items():
        if name == "fc_b":
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name != "fc_w" else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        weights[name] = Tensor(data, requires_grad=True, name=name)
    return weights


def forward(x: Tensor, weights: dict[str, Tensor]) -> Tensor:
    """[conv-relu]x2, pool, [conv-relu]x2, pool, conv-relu, global mean, linear, log-softmax."""
    if x.ndim != 4 or x.shape[1] != weights["conv1"].shape[1]:
        raise ValueError(f"input shape {x.shape} does not match conv1 {weights['conv1'].shape}")
    h = x
    for name in CONV_NAMES:
        h = T.relu(T.conv2d(h, weights[name], stride=1, pad=1))
        if name in POOL_AFTER:
            h = T.maxpool2(h)
    h = T.mean_spatial(h)
    return T.log_softmax(T.linear(h, weights["fc_w"], weights["fc_b"]))


def predict_logp(x: np.ndarray, weights: dict[str, Tensor], batch_size: int = 256) -> np.ndarray:
    """Untaped forward over an array of images, in fixed-size chunks."""
    outs = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(forward(Tensor(x[i:i + batch_size]), weights).data)
    if not outs:
        k = weights["fc_b"].shape[0]
        return np.zeros((0, k), dtype=T.get_dtype())
    return np.concatenate(outs)


def config_from_weights(weights: dict[str, Tensor]) -> dict:
    return {
        "in_channels": weights["conv1"].shape[1],
        "num_classes": weights["fc_b"].shape[0],
        "channels": [weights[n].shape[0] for n in CONV_NAMES],
    }
