"""Differentiable image transforms and the reparameterized transform sampler.

A transform of kind ``j`` is drawn as ``g_j = width_j(theta_j) * eps_j`` with
``eps_j ~ U[-1, 1]``; ``eps`` is a constant on the tape so gradients reach
``theta`` through the width.

Rotation uses an inverse-mapped bilinear grid in corner-aligned normalized
coordinates (corner pixel centres at +-1) with zero padding.  For square
images that is the same as rotating pixel-centre coordinates about the
image centre, which is how it is computed: angle 0 reproduces the input
bit for bit and quarter turns are pixel permutations up to rounding.
Positive angles turn the content counter-clockwise as displayed (rows grow
downward).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

BRIGHTNESS_SCALE = 0.3


class TransformKind(str, enum.Enum):
    ROTATION = "rotation"
    BRIGHTNESS = "brightness"

    @property
    def order(self) -> int:
        return _APPLY_ORDER[self]


_APPLY_ORDER = {TransformKind.ROTATION: 0, TransformKind.BRIGHTNESS: 1}


@dataclass(frozen=True)
class TransformSpec:
    """Ordered, distinct transform kinds; row ``j`` of the width matrix is ``kinds[j]``."""

    kinds: tuple[TransformKind, ...]

    def __post_init__(self):
        kinds = tuple(TransformKind(k) for k in self.kinds)
        if not kinds:
            raise ValueError("a transform spec needs at least one kind")
        if len(set(kinds)) != len(kinds):
            raise ValueError(f"transform kinds must be distinct, got {kinds}")
        object.__setattr__(self, "kinds", kinds)

    @classmethod
    def of(cls, *names: str) -> "TransformSpec":
        return cls(tuple(TransformKind(n) for n in names))

    @property
    def d(self) -> int:
        return len(self.kinds)

    def index(self, kind) -> int:
        return self.kinds.index(TransformKind(kind))

    def names(self) -> list[str]:
        return [k.value for k in self.kinds]


def effective_width(kind, theta_raw):
    """Half-width of the uniform transform distribution for a raw parameter.

    Rotation: ``|theta|`` radians.  Brightness: ``0.3 * sigmoid(theta)`` in
    intensity units.  Accepts a :class:`Tensor` (differentiable) or a plain
    number / array (returns numpy).
    """
    kind = TransformKind(kind)
    if isinstance(theta_raw, Tensor):
        if kind is TransformKind.ROTATION:
            return T.absolute(theta_raw)
        return T.scale(T.sigmoid(theta_raw), BRIGHTNESS_SCALE)
    x = np.asarray(theta_raw, dtype=np.float64)
    if kind is TransformKind.ROTATION:
        return np.abs(x)
    return BRIGHTNESS_SCALE * T._sigmoid_np(np.atleast_1d(x)).reshape(x.shape)


def width_rows(theta: Tensor, spec: TransformSpec) -> Tensor:
    """Map a raw ``[d, ...]`` parameter tensor to effective widths row by row."""
    if theta.shape[0] != spec.d:
        raise ValueError(f"expected {spec.d} rows, got {theta.shape[0]}")
    rows = [effective_width(kind, T.take(theta, j, axis=0)) for j, kind in enumerate(spec.kinds)]
    out = T.stack(rows, axis=0) if len(rows) > 1 else rows[0]
    return out if out.shape == theta.shape else T.reshape(out, theta.shape)


@dataclass
class TransformSample:
    """Concrete transform values ``g`` (tape nodes) and the noise that produced them."""

    values: Tensor          # [d] or [d, N]
    eps: np.ndarray         # same shape as values
    spec: TransformSpec

    def value(self, kind) -> Tensor:
        return T.take(self.values, self.spec.index(kind), axis=0)


def draw_eps(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=shape)


def sample_transform(theta_raw: Tensor, spec: TransformSpec, rng: np.random.Generator | None = None,
                     eps: np.ndarray | None = None) -> TransformSample:
    """Draw ``g = width(theta) * eps`` for a single width vector ``theta_raw[d]``.

    Pass ``eps`` to hold the noise fixed (finite-difference checks, tests).
    """
    if theta_raw.shape != (spec.d,):
        raise ValueError(f"theta must have shape ({spec.d},), got {theta_raw.shape}")
    if eps is None:
        eps = draw_eps(rng, spec.d)
    eps = np.asarray(eps, dtype=T.get_dtype()).reshape(spec.d)
    g = T.mul(width_rows(theta_raw, spec), Tensor(eps))
    return TransformSample(g, eps, spec)


# ---------------------------------------------------------------------------
# rotation


def _rotation_grid(angles: np.ndarray, size: int):
    c = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - c
    y = coords[:, None]
    x = coords[None, :]
    cos = np.cos(angles)[:, None, None]
    sin = np.sin(angles)[:, None, None]
    sx = cos * x - sin * y + c
    sy = sin * x + cos * y + c
    return sx, sy, x, y, cos, sin


def _bilinear_setup(images: np.ndarray, angles: np.ndarray):
    n, ch, h, w = images.shape
    dtype = images.dtype
    sx, sy, x, y, cos, sin = _rotation_grid(angles.astype(np.float64), h)
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = (sx - x0).astype(dtype)
    fy = (sy - y0).astype(dtype)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    flat = images.reshape(n, ch, h * w)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.where(valid, yy * w + xx, 0)  # [N, H, W]
        vals = np.take_along_axis(flat, idx.reshape(n, 1, h * w).repeat(ch, axis=1), axis=2)
        vals = vals.reshape(n, ch, h, w) * valid[:, None].astype(dtype)
        corners.append((idx, valid, vals))
    return corners, fx, fy, (x, y, cos, sin)


def _bilinear_forward(corners, fx, fy):
    (_, _, v00), (_, _, v01), (_, _, v10), (_, _, v11) = corners
    gx, gy = fx[:, None], fy[:, None]
    return (1 - gy) * ((1 - gx) * v00 + gx * v01) + gy * ((1 - gx) * v10 + gx * v11)


def rotate_array(images: np.ndarray, angles) -> np.ndarray:
    """Non-differentiable rotation of ``images[N, C, H, W]`` by per-image ``angles``."""
    images = np.asarray(images)
    angles = np.broadcast_to(np.asarray(angles, dtype=np.float64), (images.shape[0],))
    if images.shape[2] != images.shape[3]:
        raise ValueError(f"rotation needs square images, got {images.shape[2]}x{images.shape[3]}")
    corners, fx, fy, _ = _bilinear_setup(images, angles)
    return _bilinear_forward(corners, fx, fy).astype(images.dtype)


def rotate(images: Tensor, angles: Tensor) -> Tensor:
    """Rotate each image of ``images[N, C, H, W]`` by ``angles[N]`` (radians)."""
    n, ch, h, w = images.shape
    if h != w:
        raise ValueError(f"rotation needs square images, got {h}x{w}")
    if angles.shape != (n,):
        raise ValueError(f"expected {n} angles, got shape {angles.shape}")
    corners, fx, fy, (x, y, cos, sin) = _bilinear_setup(images.data, angles.data)
    out = _bilinear_forward(corners, fx, fy)
    dtype = images.data.dtype

    def bwd(g):
        gx, gy = fx[:, None], fy[:, None]
        weights = ((1 - gy) * (1 - gx), (1 - gy) * gx, gy * (1 - gx), gy * gx)
        gimg = np.zeros(n * ch * h * w, dtype=np.float64)
        base = (np.arange(n)[:, None, None, None] * ch + np.arange(ch)[None, :, None, None]) * (h * w)
        for (idx, valid, _), wt in zip(corners, weights):
            contrib = (g * wt) * valid[:, None]
            flat_idx = base + idx[:, None]
            gimg += np.bincount(flat_idx.reshape(-1), weights=contrib.reshape(-1), minlength=gimg.size)
        (_, _, v00), (_, _, v01), (_, _, v10), (_, _, v11) = corners
        d_sx = (1 - gy) * (v01 - v00) + gy * (v11 - v10)
        d_sy = (1 - gx) * (v10 - v00) + gx * (v11 - v01)
        dsx_da = (-sin * x - cos * y)[:, None]
        dsy_da = (cos * x - sin * y)[:, None]
        gang = (g * (d_sx * dsx_da + d_sy * dsy_da)).sum(axis=(1, 2, 3))
        return gimg.reshape(n, ch, h, w).astype(dtype), gang.astype(dtype)

    return T.record(out.astype(dtype), (images, angles), bwd, "rotate")


def affine_rotate(image: Tensor, angle: Tensor) -> Tensor:
    """Rotate a single ``image[C, H, W]`` by a scalar ``angle`` node."""
    if image.ndim != 3:
        raise ValueError(f"expected [C, H, W], got {image.shape}")
    out = rotate(T.reshape(image, (1,) + image.shape), T.reshape(angle, (1,)))
    return T.reshape(out, image.shape)


# ---------------------------------------------------------------------------
# brightness


def shift_array(images: np.ndarray, shifts) -> np.ndarray:
    images = np.asarray(images)
    shifts = np.broadcast_to(np.asarray(shifts, dtype=images.dtype), (images.shape[0],))
    return np.clip(images + shifts[:, None, None, None], 0, 1)


def shift(images: Tensor, shifts: Tensor) -> Tensor:
    """``clamp01(images[n] + shifts[n])`` for a batch ``images[N, C, H, W]``."""
    n = images.shape[0]
    if shifts.shape != (n,):
        raise ValueError(f"expected {n} shifts, got shape {shifts.shape}")
    z = images.data + shifts.data[:, None, None, None]
    inside = (z > 0) & (z < 1)

    def bwd(g):
        gm = g * inside
        return gm, gm.sum(axis=(1, 2, 3))

    return T.record(np.clip(z, 0, 1), (images, shifts), bwd, "brightness")


def brightness_shift(image: Tensor, amount: Tensor) -> Tensor:
    """Add ``amount`` to every channel and pixel of ``image[C, H, W]`` and clamp to [0, 1]."""
    if image.ndim != 3:
        raise ValueError(f"expected [C, H, W], got {image.shape}")
    out = shift(T.reshape(image, (1,) + image.shape), T.reshape(amount, (1,)))
    return T.reshape(out, image.shape)


# ---------------------------------------------------------------------------


def apply_batch(images: Tensor, values: Tensor, spec: TransformSpec) -> Tensor:
    """Apply per-image transform values ``values[d, N]``, rotation before brightness."""
    out = images
    for j in sorted(range(spec.d), key=lambda j: spec.kinds[j].order):
        row = T.take(values, j, axis=0)
        if spec.kinds[j] is TransformKind.ROTATION:
            out = rotate(out, row)
        else:
            out = shift(out, row)
    return out


def apply_sample(image: Tensor, sample: TransformSample, spec: TransformSpec | None = None) -> Tensor:
    """Apply a single-image sample to ``image[C, H, W]``."""
    spec = spec or sample.spec
    if spec != sample.spec:
        raise ValueError("sample was drawn for a different transform spec")
    batch = T.reshape(image, (1,) + image.shape)
    values = T.reshape(sample.values, (spec.d, 1))
    return T.reshape(apply_batch(batch, values, spec), image.shape)


def apply_array(images: np.ndarray, values: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Non-differentiable counterpart of :func:`apply_batch`."""
    out = images
    for j in sorted(range(spec.d), key=lambda j: spec.kinds[j].order):
        if spec.kinds[j] is TransformKind.ROTATION:
            out = rotate_array(out, values[j])
        else:
            out = shift_array(out, values[j])
    return out


def kinds_from_names(names: Sequence[str]) -> TransformSpec:
    return TransformSpec(tuple(TransformKind(n) for n in names))
