"""Class-conditional augmentation head.

Holds the raw width matrix ``theta[d, K]``; column ``k`` parameterizes the
transform distribution for class ``k``.  A head with a single column is the
shared-width baseline: every input uses column 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .diffaug import TransformKind, TransformSpec, apply_batch, draw_eps, width_rows
from .tensor import Tensor

DEFAULT_INIT = {TransformKind.ROTATION: 0.1, TransformKind.BRIGHTNESS: 0.0}


@dataclass
class AugMatrix:
    theta: Tensor
    spec: TransformSpec

    def __post_init__(self):
        if self.theta.ndim != 2 or self.theta.shape[0] != self.spec.d:
            raise ValueError(f"theta must be [{self.spec.d}, K], got {self.theta.shape}")
        if not np.isfinite(self.theta.data).all():
            raise T.NonFiniteError("theta has non-finite entries")
        self.theta.requires_grad = True

    @classmethod
    def create(cls, spec: TransformSpec, num_columns: int, init: dict | None = None) -> "AugMatrix":
        init = {**DEFAULT_INIT, **{TransformKind(k): v for k, v in (init or {}).items()}}
        col = np.array([init[k] for k in spec.kinds], dtype=np.float64)
        return cls(Tensor(np.repeat(col[:, None], num_columns, axis=1), requires_grad=True), spec)

    @property
    def K(self) -> int:
        return self.theta.shape[1]

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def shared(self) -> bool:
        return self.K == 1

    def columns_for(self, labels) -> np.ndarray:
        """Column index used for each label; all zeros for a shared head."""
        labels = np.asarray(labels, dtype=np.int64)
        if self.shared:
            return np.zeros_like(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.K):
            raise IndexError(f"label out of range [0, {self.K})")
        return labels

    def widths(self) -> np.ndarray:
        """Effective widths ``[d, K]`` as float64 numpy."""
        with T.no_grad():
            return width_rows(Tensor(self.theta.data), self.spec).data.astype(np.float64)


def select_theta(head: AugMatrix, k: int) -> Tensor:
    if not 0 <= k < head.K:
        raise IndexError(f"class {k} out of range [0, {head.K})")
    return T.take(head.theta, k, axis=1)


def reg_penalty(head: AugMatrix, lam: float) -> Tensor:
    """``-(lam / K) * sum_k ||theta_k||^2``.

    Column norms are rounded to the working precision before the float64
    column mean, so a matrix of K identical columns gives exactly the
    single-column value.
    """
    if lam < 0:
        raise ValueError("regularization weight must be non-negative")
    th = head.theta.data
    dtype = th.dtype
    norms = np.square(th.astype(np.float64)).sum(axis=0).astype(dtype)
    val = np.asarray(-lam * norms.astype(np.float64).mean(), dtype=dtype)
    coef = dtype.type(-2.0 * lam / head.K)
    return T.record(val, (head.theta,), lambda g: (g * coef * th,), "reg_penalty")


def batch_eps(rngs: Sequence[np.random.Generator], d: int) -> np.ndarray:
    """One ``U[-1, 1]^d`` draw per stream, laid out ``[d, N]``."""
    if not len(rngs):
        return np.zeros((d, 0))
    return np.stack([draw_eps(g, d) for g in rngs], axis=1)


def augment_training_batch(batch: Tensor, labels, head: AugMatrix,
                           rngs: Sequence[np.random.Generator] | None = None,
                           eps: np.ndarray | None = None) -> Tensor:
    """Transform every item once with a draw from its own class's distribution."""
    cols = head.columns_for(labels)
    n = batch.shape[0]
    if cols.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {cols.shape}")
    if eps is None:
        eps = batch_eps(rngs, head.d)
    eps = np.asarray(eps, dtype=T.get_dtype()).reshape(head.d, n)
    widths = T.take(width_rows(head.theta, head.spec), cols, axis=1)
    values = T.mul(widths, Tensor(eps))
    return apply_batch(batch, values, head.spec)
