"""Test-time prediction with learned augmentation, and invariance sweeps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import ImageSet
from .diffaug import TransformSpec, apply_array, rotate_array, shift_array, width_rows
from .head import AugMatrix
from .network import forward
from .streams import stream
from .tensor import Tensor

ORIENTATION_POINTS = 32
BRIGHTNESS_POINTS = 31
BRIGHTNESS_RANGE = 0.3


def _forward_np(x: np.ndarray, weights) -> np.ndarray:
    with T.no_grad():
        return forward(Tensor(x), weights).data


def _widths(head: AugMatrix) -> np.ndarray:
    with T.no_grad():
        return width_rows(Tensor(head.theta.data), head.spec).data


def _two_pass(x: np.ndarray, weights, head: AugMatrix, eps: np.ndarray) -> np.ndarray:
    """Core of :func:`predict` for a batch; ``eps`` is ``[copies, d, N]``.

    First pass picks each item's class from the untransformed input; the
    second averages log-probabilities over transformed copies drawn from
    that class's distribution.  The average is accumulated in float64, so
    identical copies give back the single-copy output exactly.
    """
    dtype = x.dtype
    cols = head.columns_for(_forward_np(x, weights).argmax(axis=1))
    widths = _widths(head)[:, cols]
    acc = None
    for e in eps:
        values = widths * e.astype(dtype)
        lp = _forward_np(apply_array(x, values, head.spec), weights).astype(np.float64)
        acc = lp if acc is None else acc + lp
    return (acc / len(eps)).astype(dtype)


def _copy_eps(rng: np.random.Generator, n_copies: int, d: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(n_copies, d, 1))


def predict(x, weights, head: AugMatrix, n_copies: int = 4, rng: np.random.Generator | None = None,
            eps: np.ndarray | None = None) -> np.ndarray:
    """Averaged log-probability vector ``[K]`` for one image ``[C, H, W]``.

    The result is a mean of log-distributions, so ``exp`` of it sums to at
    most 1; use it for argmax, not as a normalized distribution.
    """
    if n_copies < 1:
        raise ValueError("n_copies must be >= 1")
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=T.get_dtype())[None]
    if eps is None:
        eps = _copy_eps(rng if rng is not None else np.random.default_rng(), n_copies, head.d)
    eps = np.asarray(eps).reshape(n_copies, head.d, 1)
    return _two_pass(x, weights, head, eps)[0]


def shared_head(theta, spec: TransformSpec) -> AugMatrix:
    theta = np.asarray(theta.data if isinstance(theta, Tensor) else theta).reshape(spec.d, 1)
    return AugMatrix(Tensor(theta), spec)


def predict_shared(x, weights, theta, spec: TransformSpec, n_copies: int = 4,
                   rng: np.random.Generator | None = None, eps: np.ndarray | None = None) -> np.ndarray:
    """Single-distribution baseline: every copy drawn from ``theta[d]``."""
    return predict(x, weights, shared_head(theta, spec), n_copies, rng, eps)


def predict_set(images: np.ndarray, weights, head: AugMatrix, n_copies: int = 4, seed: int = 0,
                batch_size: int = 250, indices=None) -> np.ndarray:
    """:func:`predict` over many images.

    Image ``i`` draws its copies from a stream keyed by ``(seed, indices[i])``
    so results do not depend on batching.
    """
    n = len(images)
    indices = np.arange(n) if indices is None else np.asarray(indices)
    out = []
    for start in range(0, n, batch_size):
        sl = slice(start, min(n, start + batch_size))
        eps = np.stack([_copy_eps(stream(seed, "predict", 0, int(i)), n_copies, head.d)[..., 0]
                        for i in indices[sl]], axis=-1)
        out.append(_two_pass(np.asarray(images[sl], dtype=T.get_dtype()), weights, head, eps))
    if not out:
        return np.zeros((0, head.K), dtype=T.get_dtype())
    return np.concatenate(out)


def evaluate_accuracy(weights, head: AugMatrix, test_set: ImageSet, n_copies: int = 4, seed: int = 0) -> float:
    return accuracy_report(weights, head, test_set, n_copies, seed)["accuracy"]


def accuracy_report(weights, head: AugMatrix, test_set: ImageSet, n_copies: int = 4, seed: int = 0) -> dict:
    pred = predict_set(test_set.images, weights, head, n_copies, seed).argmax(axis=1)
    correct = pred == test_set.labels
    per_class = {}
    for k, name in enumerate(test_set.class_names):
        mask = test_set.labels == k
        if mask.any():
            per_class[name] = float(correct[mask].mean())
    return {"accuracy": float(correct.mean()) if len(correct) else 0.0,
            "n": int(len(correct)), "per_class": per_class}


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    values: np.ndarray
    metric: np.ndarray
    model: str = ""
    class_filter: str | None = None
    variable: str = "angle"
    probs: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.metric = np.asarray(self.metric, dtype=np.float64)
        if np.any(np.diff(self.values) <= 0):
            raise ValueError("sweep values must be strictly increasing")
        if np.any(self.metric < 0) or np.any(self.metric > 1):
            raise ValueError("sweep metric must lie in [0, 1]")

    def rows(self):
        for v, m in zip(self.values, self.metric):
            yield {"sweep_value": repr(float(v)), "metric": repr(float(m)),
                   "model": self.model, "class_filter": self.class_filter or ""}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["sweep_value", "metric", "model", "class_filter"])
            w.writeheader()
            w.writerows(self.rows())


def orientation_grid(n_points: int = ORIENTATION_POINTS) -> np.ndarray:
    return np.linspace(-np.pi, np.pi, n_points)


def brightness_grid(n_points: int = BRIGHTNESS_POINTS) -> np.ndarray:
    return np.linspace(-BRIGHTNESS_RANGE, BRIGHTNESS_RANGE, n_points)


def _normalize(logp: np.ndarray) -> np.ndarray:
    z = logp.astype(np.float64)
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def orientation_sweep(weights, head: AugMatrix, image, target: int, n_points: int = ORIENTATION_POINTS,
                      n_copies: int = 4, seed: int = 0, model: str = "") -> SweepResult:
    """Probability of ``target`` for one image rotated across ``[-pi, pi]``.

    Each point's averaged log-probabilities are renormalized before reading
    off the target, so every point carries a proper distribution.
    """
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=T.get_dtype())
    angles = orientation_grid(n_points)
    rotated = rotate_array(np.repeat(img[None], n_points, axis=0), angles)
    probs = _normalize(predict_set(rotated, weights, head, n_copies, seed, indices=np.zeros(n_points, int)))
    return SweepResult(angles, probs[:, target], model, str(target), "angle", probs)


def orientation_accuracy_sweep(weights, head: AugMatrix, test_set: ImageSet, n_points: int = ORIENTATION_POINTS,
                               n_copies: int = 4, seed: int = 0, model: str = "",
                               class_filter: str | None = None) -> SweepResult:
    """Accuracy on ``test_set`` with every image rotated to each grid angle."""
    angles = orientation_grid(n_points)
    acc = []
    for a in angles:
        rotated = rotate_array(test_set.images, np.full(len(test_set), a))
        pred = predict_set(rotated, weights, head, n_copies, seed, indices=test_set.source_index)
        acc.append(float((pred.argmax(axis=1) == test_set.labels).mean()))
    return SweepResult(angles, acc, model, class_filter, "angle")


def brightness_sweep(weights, head: AugMatrix, test_set: ImageSet, n_points: int = BRIGHTNESS_POINTS,
                     n_copies: int = 4, seed: int = 0, model: str = "",
                     shifts: np.ndarray | None = None) -> SweepResult:
    """Accuracy on ``test_set`` after shifting every image's brightness by each grid value."""
    shifts = brightness_grid(n_points) if shifts is None else np.asarray(shifts, dtype=np.float64)
    acc = []
    for s in shifts:
        shifted = shift_array(test_set.images, np.full(len(test_set), s, dtype=test_set.images.dtype))
        pred = predict_set(shifted, weights, head, n_copies, seed, indices=test_set.source_index)
        acc.append(float((pred.argmax(axis=1) == test_set.labels).mean()))
    return SweepResult(shifts, acc, model, None, "shift")


def history_rows(history: np.ndarray, spec: TransformSpec, class_names: list[str] | None = None):
    """Flatten a ``[epochs + 1, d, K]`` width history into CSV-ready rows."""
    e, d, k = history.shape
    for epoch in range(e):
        for c in range(k):
            for j, kind in enumerate(spec.kinds):
                yield {"epoch": epoch, "class": class_names[c] if class_names else c,
                       "transform_kind": kind.value, "effective_width": repr(float(history[epoch, j, c]))}


def write_history_csv(path, history: np.ndarray, spec: TransformSpec, class_names=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "class", "transform_kind", "effective_width"])
        w.writeheader()
        w.writerows(history_rows(history, spec, class_names))
