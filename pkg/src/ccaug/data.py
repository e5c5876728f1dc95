"""Dataset loading (MNIST IDX, CIFAR binary) and class-conditional corruption.

Images are held as float32 arrays ``[N, C, H, W]`` scaled to [0, 1].  Each
image keeps its index in the source split, which keys the random stream for
its corruption draw, and the realized corruption parameter (NaN when the
image was left alone).
"""

from __future__ import annotations

import gzip
import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import diffaug
from .streams import stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR_PLANE = 32 * 32
CIFAR10_RECORD = 1 + 3 * CIFAR_PLANE
CIFAR100_RECORD = 2 + 3 * CIFAR_PLANE

CIFAR100_SUBSET = ("beetle", "clock", "crab", "flatfish", "sunflower",
                   "house", "plain", "road", "sea", "skyscraper")
CIFAR10_BRIGHT_CLASSES = ("airplane", "bird", "cat", "deer", "ship")

CACHE_VERSION = 1


class DataFormatError(ValueError):
    pass


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: int
    param: float = math.nan


@dataclass
class ImageSet:
    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    source_index: np.ndarray = None
    params: np.ndarray = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if self.images.ndim != 4 or len(self.images) != n:
            raise ValueError(f"images {self.images.shape} do not match {n} labels")
        if self.source_index is None:
            self.source_index = np.arange(n)
        if self.params is None:
            self.params = np.full(n, np.nan)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]), float(self.params[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx)
        return ImageSet(self.images[idx], self.labels[idx], list(self.class_names),
                        self.source_index[idx], self.params[idx])

    def head(self, n: int) -> "ImageSet":
        return self.subset(np.arange(min(n, len(self))))

    def of_class(self, label: int) -> "ImageSet":
        return self.subset(np.flatnonzero(self.labels == label))

    def class_index(self, name_or_index) -> int:
        if isinstance(name_or_index, (int, np.integer)):
            if not 0 <= name_or_index < self.num_classes:
                raise KeyError(f"class index {name_or_index} out of range")
            return int(name_or_index)
        try:
            return self.class_names.index(str(name_or_index))
        except ValueError:
            raise KeyError(f"unknown class {name_or_index!r}") from None


# ---------------------------------------------------------------------------
# MNIST IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def read_idx_images(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated IDX header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise DataFormatError(f"{path}: truncated, {len(raw)} bytes for {count} images")
    return np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated IDX header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(raw) < 8 + count:
        raise DataFormatError(f"{path}: truncated, {len(raw)} bytes for {count} labels")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8)


def write_idx(image_path, label_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    _write_bytes(image_path, struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    _write_bytes(label_path, struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_mnist(image_file, label_file) -> ImageSet:
    images = read_idx_images(image_file)
    labels = read_idx_labels(label_file)
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise DataFormatError("MNIST labels must be 0-9")
    pixels = images[:, None].astype(np.float32) / np.float32(255)
    return ImageSet(pixels, labels, [str(i) for i in range(10)])


# ---------------------------------------------------------------------------
# CIFAR binary


def read_label_names(path) -> list[str]:
    text = Path(path).read_text()
    return [line.strip() for line in text.splitlines() if line.strip()]


def load_cifar(files: Iterable, variant: str = "cifar10", class_names: Sequence[str] | None = None) -> ImageSet:
    """Decode CIFAR binary batches; CIFAR-100 records yield the fine label."""
    if variant not in ("cifar10", "cifar100"):
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    nlab = 1 if variant == "cifar10" else 2
    rec = CIFAR10_RECORD if variant == "cifar10" else CIFAR100_RECORD
    chunks = []
    for f in files:
        raw = _read_bytes(f)
        if len(raw) % rec:
            raise DataFormatError(f"{f}: length {len(raw)} is not a multiple of the {rec}-byte record")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec))
    arr = np.concatenate(chunks) if chunks else np.zeros((0, rec), np.uint8)
    labels = arr[:, nlab - 1]
    pixels = arr[:, nlab:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    k = 10 if variant == "cifar10" else 100
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    if labels.size and labels.max() >= len(names):
        raise DataFormatError(f"label {labels.max()} outside the {len(names)} known classes")
    return ImageSet(pixels, labels, names)


def write_cifar(path, images: np.ndarray, labels: np.ndarray, variant: str = "cifar10",
                coarse: np.ndarray | None = None) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(-1, 3 * CIFAR_PLANE)
    labels = np.asarray(labels, dtype=np.uint8)[:, None]
    if variant == "cifar100":
        c = np.zeros_like(labels) if coarse is None else np.asarray(coarse, dtype=np.uint8)[:, None]
        labels = np.concatenate([c, labels], axis=1)
    _write_bytes(path, np.concatenate([labels, images], axis=1).tobytes())


# ---------------------------------------------------------------------------
# dataset directories


def _first_existing(*paths: Path) -> Path:
    for p in paths:
        if p.exists():
            return p
    raise FileNotFoundError(f"none of {[str(p) for p in paths]} exist")


def _idx_path(root: Path, stem: str) -> Path:
    return _first_existing(root / stem, root / f"{stem}.gz")


def load_mnist_dir(root, split: str = "train") -> ImageSet:
    root = Path(root) / "mnist"
    prefix = "train" if split == "train" else "t10k"
    return load_mnist(_idx_path(root, f"{prefix}-images-idx3-ubyte"),
                      _idx_path(root, f"{prefix}-labels-idx1-ubyte"))


def load_cifar10_dir(root, split: str = "train") -> ImageSet:
    root = Path(root) / "cifar-10-batches-bin"
    names = read_label_names(root / "batches.meta.txt")
    files = [root / f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else [root / "test_batch.bin"]
    for f in files:
        if not f.exists():
            raise FileNotFoundError(f)
    return load_cifar(files, "cifar10", names)


def load_cifar100_dir(root, split: str = "train") -> ImageSet:
    root = Path(root) / "cifar-100-binary"
    names = read_label_names(root / "fine_label_names.txt")
    f = root / ("train.bin" if split == "train" else "test.bin")
    if not f.exists():
        raise FileNotFoundError(f)
    return load_cifar([f], "cifar100", names)


# ---------------------------------------------------------------------------
# corruption


def _chunked(n: int, size: int = 512):
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))


def corrupt_rotation(ds: ImageSet, half_widths, seed: int) -> ImageSet:
    """Rotate each image once by ``U[-r_c, r_c]`` for its class ``c``."""
    r = _per_class(half_widths, ds.num_classes)
    if np.any(r < 0) or np.any(r > math.pi):
        raise ValueError("rotation half-widths must lie in [0, pi]")
    angles = np.array([stream(seed, "corrupt-rotation", 0, int(si)).uniform(-1.0, 1.0)
                       for si in ds.source_index]) * r[ds.labels]
    images = ds.images.copy()
    moved = np.flatnonzero(angles != 0)
    for sl in _chunked(len(moved)):
        sel = moved[sl]
        images[sel] = diffaug.rotate_array(ds.images[sel], angles[sel])
    return replace(ds, images=images, params=angles)


def corrupt_brightness(ds: ImageSet, classes: Iterable, half_width: float, seed: int) -> ImageSet:
    """Shift all pixels of images in ``classes`` by one ``U[-r, r]`` draw, clamped."""
    if not 0 <= half_width <= 1:
        raise ValueError("brightness half-width must lie in [0, 1]")
    chosen = sorted({ds.class_index(c) for c in classes})
    mask = np.isin(ds.labels, chosen)
    shifts = np.full(len(ds), np.nan)
    images = ds.images.copy()
    for i in np.flatnonzero(mask):
        s = stream(seed, "corrupt-brightness", 0, int(ds.source_index[i])).uniform(-1.0, 1.0) * half_width
        shifts[i] = s
        images[i] = np.clip(ds.images[i] + np.float32(s), 0, 1)
    return replace(ds, images=images, params=shifts)


def cifar100_subset(ds: ImageSet, names: Sequence[str] = CIFAR100_SUBSET) -> ImageSet:
    """Keep the named fine classes, relabelled 0..len(names)-1 in the given order."""
    src = [ds.class_index(n) for n in names]
    remap = {c: i for i, c in enumerate(src)}
    keep = np.flatnonzero(np.isin(ds.labels, src))
    sub = ds.subset(keep)
    sub.labels = np.array([remap[int(c)] for c in sub.labels], dtype=np.int64)
    sub.class_names = list(names)
    return sub


def _per_class(values, k: int) -> np.ndarray:
    if isinstance(values, dict):
        out = np.zeros(k)
        for c, v in values.items():
            out[int(c)] = v
        return out
    out = np.asarray(values, dtype=np.float64)
    if out.shape != (k,):
        raise ValueError(f"need one value per class ({k}), got {out.shape}")
    return out


# ---------------------------------------------------------------------------
# declarative specs


@dataclass(frozen=True)
class DatasetSpec:
    """Source dataset plus its per-class corruption.

    ``half_widths`` maps class names (as listed by the dataset's own label
    metadata; "0".."9" for MNIST) to the corruption half-range under
    ``corruption`` ("rotation", "brightness" or None).  Unlisted classes are
    left alone.
    """

    source: str
    corruption: str | None = None
    half_widths: tuple[tuple[str, float], ...] = ()
    split: str = "train"
    seed: int = 0
    subset: int | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if self.corruption not in (None, "rotation", "brightness"):
            raise ValueError(f"unknown corruption {self.corruption!r}")
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        hw = self.half_widths
        items = hw.items() if isinstance(hw, dict) else hw
        hw = tuple((str(k), float(v)) for k, v in items)
        object.__setattr__(self, "half_widths", hw)
        names = [k for k, _ in hw]
        if len(set(names)) != len(names):
            raise ValueError("a class may appear only once in half_widths")
        widths = [v for _, v in hw]
        if any(v < 0 for v in widths):
            raise ValueError("half-widths must be non-negative")
        if self.corruption == "brightness" and any(v > 1 for v in widths):
            raise ValueError("brightness half-widths must be <= 1")
        if self.corruption == "rotation" and any(v > math.pi for v in widths):
            raise ValueError("rotation half-widths must be <= pi")
        if self.corruption is None and any(widths):
            raise ValueError("half-widths given without a corruption kind")
        if self.subset is not None and self.subset < 1:
            raise ValueError("subset must be positive")

    def resolve(self, class_names: Sequence[str]) -> np.ndarray:
        """One half-width per class, in label order; unknown names raise ``KeyError``."""
        out = np.zeros(len(class_names))
        for name, v in self.half_widths:
            if name not in class_names:
                raise KeyError(f"unknown class {name!r} for source {self.source}")
            out[list(class_names).index(name)] = v
        return out

    def with_split(self, split: str, seed: int | None = None, subset: int | None = None) -> "DatasetSpec":
        return replace(self, split=split, seed=self.seed if seed is None else seed, subset=subset)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["half_widths"] = dict(self.half_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


SOURCES = ("mnist", "cifar10", "cifar100-subset")


def load_source(source: str, root, split: str) -> ImageSet:
    if source == "mnist":
        return load_mnist_dir(root, split)
    if source == "cifar10":
        return load_cifar10_dir(root, split)
    return cifar100_subset(load_cifar100_dir(root, split))


def build_dataset(spec: DatasetSpec, root) -> ImageSet:
    ds = load_source(spec.source, root, spec.split)
    if spec.subset is not None:
        ds = ds.head(spec.subset)
    hw = spec.resolve(ds.class_names)
    if spec.corruption == "rotation":
        ds = corrupt_rotation(ds, hw, spec.seed)
    elif spec.corruption == "brightness":
        r = set(hw[hw > 0])
        if len(r) > 1:
            raise ValueError("brightness corruption uses one half-width for all chosen classes")
        if r:
            ds = corrupt_brightness(ds, np.flatnonzero(hw > 0).tolist(), r.pop(), spec.seed)
    return ds


def save_cache(path, ds: ImageSet, spec: DatasetSpec) -> None:
    header = {"version": CACHE_VERSION, "spec": spec.to_dict(), "class_names": ds.class_names}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
                 images=ds.images, labels=ds.labels, source_index=ds.source_index, params=ds.params)


def load_cache(path) -> tuple[ImageSet, DatasetSpec]:
    with np.load(path) as z:
        header = json.loads(z["header"].tobytes().decode())
        if header.get("version") != CACHE_VERSION:
            raise DataFormatError(f"unsupported cache version {header.get('version')}")
        ds = ImageSet(z["images"], z["labels"], header["class_names"], z["source_index"], z["params"])
    return ds, DatasetSpec.from_dict(header["spec"])


def cached_dataset(spec: DatasetSpec, root, cache_dir=None) -> ImageSet:
    """Build ``spec``, reusing a cache file under ``cache_dir`` when it matches."""
    if cache_dir is None:
        return build_dataset(spec, root)
    key = json.dumps(spec.to_dict(), sort_keys=True).encode()
    name = f"{spec.source}-{spec.split}-{hashlib.sha256(key).hexdigest()[:16]}.npz"
    path = Path(cache_dir) / name
    if path.exists():
        ds, cached = load_cache(path)
        if cached == spec:
            return ds
    ds = build_dataset(spec, root)
    os.makedirs(cache_dir, exist_ok=True)
    save_cache(path, ds, spec)
    return ds

