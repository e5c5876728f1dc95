"""Joint training of network weights and the augmentation width matrix."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .data import ImageSet
from .head import AugMatrix, augment_training_batch, reg_penalty
from .network import NetworkConfig, forward
from .streams import sample_streams, stream
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.05
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0
    n_test_copies: int = 4

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.n_test_copies < 1:
            raise ValueError("n_test_copies must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def loss(logp: Tensor, labels, head: AugMatrix, lam: float) -> Tensor:
    """Single-sample cross-entropy on the augmented batch plus the width regularizer."""
    return T.add(T.nll_loss(logp, labels), reg_penalty(head, lam))


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float, no_decay: frozenset[str] = frozenset()) -> None:
    """One bias-corrected Adam update, in place.

    Weight decay is coupled: ``weight_decay * p`` is added to the gradient of
    every parameter not named in ``no_decay``.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1 - b1 ** t
    bc2 = 1 - b2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if weight_decay and name not in no_decay:
            g = g + weight_decay * p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        denom = np.sqrt(v / bc2) + state.eps
        p.data = (p.data - lr * (m / bc1) / denom).astype(p.data.dtype)


THETA = "theta"


def _param_dict(weights: dict[str, Tensor], head: AugMatrix) -> dict[str, Tensor]:
    if THETA in weights:
        raise ValueError(f"network weight named {THETA!r} collides with the width matrix")
    return {**weights, THETA: head.theta}


@dataclass
class StepRecord:
    epoch: int
    step: int
    loss: float
    nll: float
    penalty: float


def train(config: TrainConfig, dataset: ImageSet, head: AugMatrix, weights: dict[str, Tensor],
          network: NetworkConfig | None = None, experiment: dict | None = None,
          on_step: Callable[[StepRecord], None] | None = None) -> Checkpoint:
    """Run ``config.epochs`` epochs of augment -> forward -> loss -> backward -> Adam.

    ``weights`` and ``head`` are updated in place; the returned checkpoint
    holds copies plus the per-epoch width history.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if not head.shared and head.K != dataset.num_classes:
        raise ValueError(f"head has {head.K} columns but the dataset has {dataset.num_classes} classes")
    if network is None:
        network = NetworkConfig(dataset.images.shape[1], dataset.images.shape[2], dataset.num_classes,
                                tuple(weights[f"conv{i}"].shape[0] for i in range(1, 6)))
    params = _param_dict(weights, head)
    state = AdamState()
    history = [head.widths()]
    epoch_losses = []
    n = len(dataset)

    for epoch in range(1, config.epochs + 1):
        order = stream(config.seed, "shuffle", epoch).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            labels = dataset.labels[idx]
            try:
                with T.tape() as tp:
                    x = augment_training_batch(Tensor(dataset.images[idx]), labels, head,
                                               sample_streams(config.seed, "train-aug", epoch, idx))
                    logp = forward(x, weights)
                    nll = T.nll_loss(logp, labels)
                    pen = reg_penalty(head, config.lam)
                    total_loss = T.add(nll, pen)
                    T.backward(total_loss)
                    tp.clear()
            except T.NonFiniteError as exc:
                raise T.NonFiniteError(f"epoch {epoch}, batch {b} (items {idx[:8].tolist()}...): {exc}") from exc
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
            for p in params.values():
                p.grad = None
            adam_step(params, grads, state, config.learning_rate, config.weight_decay,
                      no_decay=frozenset({THETA}))
            rec = StepRecord(epoch, state.step, total_loss.item(), nll.item(), pen.item())
            total += rec.loss * len(idx)
            if on_step is not None:
                on_step(rec)
        epoch_losses.append(total / n)
        history.append(head.widths())
        log.info("epoch %d loss %.4f widths %s", epoch, epoch_losses[-1],
                 np.array2string(history[-1], precision=3))

    return Checkpoint(
        network=network,
        weights={k: w.data.copy() for k, w in weights.items()},
        theta=head.theta.data.copy(),
        transforms=head.spec.names(),
        adam_m={k: v.copy() for k, v in state.m.items()},
        adam_v={k: v.copy() for k, v in state.v.items()},
        adam_step=state.step,
        history=np.stack(history).astype(np.float32),
        config=experiment or {"train": config.to_dict()},
        seed=config.seed,
        epoch_losses=epoch_losses,
    )
