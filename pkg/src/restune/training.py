"""Readout heads, loss and optimizer shared by every tuning mode."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, matmul, ones, row_logsumexp, sum_all


def pooling_matrix(segments) -> np.ndarray:
    """Mean-over-tokens operator for row-stacked sequences of the given lengths."""
    segments = list(segments)
    pool = np.zeros((len(segments), int(sum(segments))))
    start = 0
    for i, n in enumerate(segments):
        pool[i, start:start + n] = 1.0 / n
        start += n
    return pool


def mean_pool(x: Tensor, segments=None) -> Tensor:
    segments = segments or (x.shape[0],)
    return matmul(Tensor(pooling_matrix(segments)), x)


@dataclass
class LinearHead:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, model_dim: int, num_classes: int, rng: np.random.Generator) -> "LinearHead":
        return cls(Tensor(rng.normal(0.0, 0.02, (model_dim, num_classes)), requires_grad=True),
                   Tensor(np.zeros(num_classes), requires_grad=True))

    def __call__(self, pooled: Tensor) -> Tensor:
        return matmul(pooled, self.weight) + self.bias

    def named_tensors(self, prefix: str = "head") -> dict[str, Tensor]:
        return {f"{prefix}/weight": self.weight, f"{prefix}/bias": self.bias}

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of B x C logits against integer labels."""
    labels = np.asarray(labels, dtype=int).reshape(-1)
    b, c = logits.shape
    if labels.shape[0] != b:
        raise ValueError(f"{b} logit rows but {labels.shape[0]} labels")
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    picked = matmul(logits * Tensor(onehot), ones(c, 1))
    return sum_all(row_logsumexp(logits) - picked) * (1.0 / b)


def accuracy(logits: np.ndarray, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


class Adam:
    """Adam over tensors' ``grad`` buffers; tensors without a grad are skipped."""

    def __init__(self, params, lr: float = 1e-2, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None or not p.requires_grad:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad ** 2
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
