"""Versioned checkpoint container.

Layout: 8-byte magic, little-endian u32 format version, u64 header length,
UTF-8 JSON header, then the raw little-endian array blobs in the order the
header lists them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffaug import TransformSpec
from .head import AugMatrix
from .network import NetworkConfig
from .tensor import Tensor

MAGIC = b"CCAUGCKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(eq=False)
class Checkpoint:
    network: NetworkConfig
    weights: dict[str, np.ndarray]
    theta: np.ndarray
    transforms: list[str]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_step: int
    history: np.ndarray  # [epochs + 1, d, K] effective widths, row 0 = initialization
    config: dict = field(default_factory=dict)
    seed: int = 0
    epoch_losses: list[float] = field(default_factory=list)
    version: int = FORMAT_VERSION

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        scalars = ("network", "transforms", "adam_step", "config", "seed", "epoch_losses", "version")
        if any(getattr(self, a) != getattr(other, a) for a in scalars):
            return False
        return all(_same(a, b) for a, b in zip(self._arrays(), other._arrays())) and \
            [n for n, _ in self._arrays()] == [n for n, _ in other._arrays()]

    def _arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [("theta", self.theta), ("history", self.history)]
        out += [(f"w/{k}", v) for k, v in self.weights.items()]
        out += [(f"m/{k}", v) for k, v in self.adam_m.items()]
        out += [(f"v/{k}", v) for k, v in self.adam_v.items()]
        return out

    @property
    def spec(self) -> TransformSpec:
        return TransformSpec.of(*self.transforms)

    def head(self) -> AugMatrix:
        return AugMatrix(Tensor(self.theta.copy(), requires_grad=True), self.spec)

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.weights.items()}


def _same(a, b) -> bool:
    (na, xa), (nb, xb) = a, b
    return na == nb and xa.dtype == xb.dtype and xa.shape == xb.shape and xa.tobytes() == xb.tobytes()


def save(ckpt: Checkpoint, path) -> None:
    arrays = ckpt._arrays()
    header = {
        "network": {"in_channels": ckpt.network.in_channels, "image_size": ckpt.network.image_size,
                    "num_classes": ckpt.network.num_classes, "channels": list(ckpt.network.channels)},
        "transforms": list(ckpt.transforms),
        "adam_step": ckpt.adam_step,
        "config": ckpt.config,
        "seed": ckpt.seed,
        "epoch_losses": list(ckpt.epoch_losses),
        "arrays": [{"name": n, "dtype": a.dtype.newbyteorder("<").str, "shape": list(a.shape)}
                   for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes())


def load(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(raw[20:20 + hlen].decode())
    pos = 20 + hlen
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated array {spec['name']}")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=pos).reshape(spec["shape"])
        arrays[spec["name"]] = arr.astype(dt.newbyteorder("="))
        pos += nbytes

    def group(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    net = header["network"]
    return Checkpoint(
        network=NetworkConfig(net["in_channels"], net["image_size"], net["num_classes"], tuple(net["channels"])),
        weights=group("w/"),
        theta=arrays["theta"],
        transforms=header["transforms"],
        adam_m=group("m/"),
        adam_v=group("v/"),
        adam_step=header["adam_step"],
        history=arrays["history"],
        config=header["config"],
        seed=header["seed"],
        epoch_losses=header["epoch_losses"],
        version=version,
    )
