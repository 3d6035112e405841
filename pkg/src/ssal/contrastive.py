"""Key queues and the contrastive objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .augment import DEFAULT as DEFAULT_AUGMENT
from .augment import AugmentConfig, augment_batch
from .numcore import Tensor, no_grad
from .numcore.tensor import record

UNIT_TOL = 1e-4


class QueueContractError(ValueError):
    pass


class KeyQueue:
    """Fixed-capacity FIFO of unit-norm key vectors; oldest keys leave first."""

    def __init__(self, capacity: int, dim: int, dtype=np.float32):
        if capacity < 1 or dim < 1:
            raise ValueError("capacity and dim must be positive")
        self.capacity = capacity
        self.dim = dim
        self._keys = np.empty((0, dim), dtype=dtype)

    @property
    def occupancy(self) -> int:
        return self._keys.shape[0]

    def __len__(self) -> int:
        return self.occupancy

    def keys(self) -> np.ndarray:
        """Stored keys, oldest first (read-only view)."""
        view = self._keys.view()
        view.flags.writeable = False
        return view

    def enqueue(self, keys) -> None:
        k = np.asarray(keys.data if isinstance(keys, Tensor) else keys)
        if k.ndim != 2 or k.shape[1] != self.dim:
            raise QueueContractError(f"expected keys of shape N×{self.dim}, got {k.shape}")
        norms = np.sqrt((k.astype(np.float64) ** 2).sum(axis=1))
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise QueueContractError("queue only accepts unit-norm keys")
        self._keys = np.concatenate([self._keys, k.astype(self._keys.dtype)])[-self.capacity :].copy()

    def snapshot(self) -> "KeyQueue":
        other = KeyQueue(self.capacity, self.dim, self._keys.dtype)
        other._keys = self._keys.copy()
        return other


@dataclass
class KeyQueuePair:
    weak: KeyQueue
    strong: KeyQueue

    @classmethod
    def create(cls, capacity: int, dim: int, dtype=np.float32) -> "KeyQueuePair":
        return cls(KeyQueue(capacity, dim, dtype), KeyQueue(capacity, dim, dtype))

    def enqueue(self, weak_keys, strong_keys) -> None:
        self.weak.enqueue(weak_keys)
        self.strong.enqueue(strong_keys)

    def snapshot(self) -> "KeyQueuePair":
        return KeyQueuePair(self.weak.snapshot(), self.strong.snapshot())


@dataclass(frozen=True)
class LossWeights:
    temperature: float = 0.2
    contrastive_scale: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.contrastive_scale < 0:
            raise ValueError("contrastive_scale must be non-negative")


Negatives = Union[KeyQueue, np.ndarray]


def _queue_array(queue: Negatives) -> np.ndarray:
    return queue.keys() if isinstance(queue, KeyQueue) else np.asarray(queue)


def _logits(q: np.ndarray, kp: np.ndarray, neg: np.ndarray, temperature: float, include_positive: bool):
    """Scaled positive logits, shifted exponentials and row log-sum-exp."""
    inv_t = q.dtype.type(1.0 / temperature)
    pos = np.einsum("ij,ij->i", q, kp) * inv_t
    negl = (q @ neg.T) * inv_t
    logits = np.concatenate([pos[:, None], negl], axis=1) if include_positive else negl
    top = logits.max(axis=1, keepdims=True)
    expd = np.exp(logits - top)
    return pos, expd, top[:, 0] + np.log(expd.sum(axis=1))


def info_nce_rows(q: np.ndarray, k_pos: np.ndarray, queue: Negatives, temperature: float,
                  include_positive: bool = True) -> np.ndarray:
    """Per-row InfoNCE values (no graph); zero for every row when the queue is empty."""
    neg = _queue_array(queue).astype(q.dtype, copy=False)
    if neg.shape[0] == 0:
        return np.zeros(q.shape[0], dtype=q.dtype)
    pos, _, lse = _logits(q, np.asarray(k_pos, dtype=q.dtype), neg, temperature, include_positive)
    return lse - pos


def info_nce(q: Tensor, k_pos, queue: Negatives, temperature: float, include_positive: bool = True) -> Tensor:
    """Mean over rows of -log(e^{q.k+/t} / (e^{q.k+/t} + sum_i e^{q.n_i/t})).

    Keys and queue entries are constants; only ``q`` receives a gradient.
    With ``include_positive=False`` the denominator holds the negatives only.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    kp = np.asarray(k_pos.data if isinstance(k_pos, Tensor) else k_pos, dtype=q.dtype)
    neg = _queue_array(queue).astype(q.dtype, copy=False)
    if kp.shape != q.shape:
        raise ValueError(f"query {q.shape} and positive keys {kp.shape} must align")
    n = q.shape[0]
    if neg.shape[0] == 0:
        return record("info_nce", np.zeros((), dtype=q.dtype), (q,), lambda g: (np.zeros_like(q.data),))

    pos, expd, lse = _logits(q.data, kp, neg, temperature, include_positive)
    loss = np.asarray((lse - pos).mean(), dtype=q.dtype)
    inv_t = q.dtype.type(1.0 / temperature)

    def backward(g):
        probs = expd / expd.sum(axis=1, keepdims=True)
        if include_positive:
            w_pos, w_neg = probs[:, :1] - 1, probs[:, 1:]
        else:
            w_pos, w_neg = -np.ones((n, 1), dtype=q.dtype), probs
        gq = (w_pos * kp + w_neg @ neg) * (inv_t * g / n)
        return (gq.astype(q.dtype, copy=False),)

    return record("info_nce", loss, (q,), backward)


def contrastive_pair_loss(q, q_strong, k, k_strong, queues: KeyQueuePair, temperature: float,
                          include_positive: bool = True) -> Tensor:
    """Weak query against strong keys plus strong query against weak keys."""
    return info_nce(q, k_strong, queues.strong, temperature, include_positive) + info_nce(
        q_strong, k, queues.weak, temperature, include_positive
    )


def combined_loss(classification, contrastive, contrastive_scale: float):
    """classification + scale * contrastive; works on tensors and plain floats."""
    if isinstance(classification, Tensor) or isinstance(contrastive, Tensor):
        return classification + contrastive * contrastive_scale
    return classification + contrastive_scale * contrastive


def contrastive_scores(
    model,
    queues: KeyQueuePair,
    images: np.ndarray,
    ids,
    seed: int,
    temperature: float = 0.2,
    include_positive: bool = True,
    augment: AugmentConfig = DEFAULT_AUGMENT,
    use_strong_aug: bool = True,
    batch_size: int = 256,
) -> np.ndarray:
    """Per-sample contrastive loss, one seeded weak and strong view per sample.

    Both branches run in eval mode, so every sample is scored independently
    of its batch neighbours. Queues are read from a snapshot.
    """
    snap = queues.snapshot()
    weak_neg, strong_neg = snap.weak.keys(), snap.strong.keys()
    ids = np.asarray(ids)
    scores = np.empty(len(ids), dtype=np.float64)
    with no_grad():
        for start in range(0, len(ids), batch_size):
            sl = slice(start, start + batch_size)
            x = images[sl]
            xw = augment_batch(x, ids[sl], seed, (), strong=False, cfg=augment)
            if use_strong_aug:
                xs = augment_batch(x, ids[sl], seed, (), strong=True, cfg=augment)
            else:
                xs = augment_batch(x, ids[sl], seed, (1,), strong=False, cfg=augment)
            _, q = model.query_forward(xw, train=False)
            _, qs = model.query_forward(xs, train=False)
            k = model.key_forward(xw, train=False)
            ks = model.key_forward(xs, train=False)
            a = info_nce_rows(q.data, ks, strong_neg, temperature, include_positive)
            b = info_nce_rows(qs.data, k, weak_neg, temperature, include_positive)
            scores[sl] = a.astype(np.float64) + b.astype(np.float64)
    return scores


def per_sample_contrastive_score(model, queues: KeyQueuePair, x: np.ndarray, image_id: int, seed: int, **kw) -> float:
    """Contrastive loss of a single C×H×W image."""
    return float(contrastive_scores(model, queues, x[None], [image_id], seed, **kw)[0])
