"""EMA-maintained unit-length class representations.

Each class keeps one prototype vector, initialized from the first batch
mean it sees and afterwards blended with new batch means at momentum
gamma. Prototypes are renormalized after every step so the inner products
the inter-class loss takes against them stay in [-1, 1], and they never
receive gradients; the EMA is their only update path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .numerics import l2_normalize

Array = np.ndarray


@dataclass
class PrototypeBank:
    vectors: Array       # (class_count, dim)
    initialized: Array   # (class_count,) bool
    momentum: float

    @classmethod
    def create(cls, class_count: int, dim: int, momentum: float = 0.9) -> "PrototypeBank":
        if class_count < 1 or dim < 1:
            raise ValidationError("class_count and dim must be positive")
        if not 0.0 < momentum < 1.0:
            raise ValidationError("momentum must lie in (0, 1)")
        return cls(
            vectors=np.zeros((class_count, dim), dtype=np.float64),
            initialized=np.zeros(class_count, dtype=bool),
            momentum=momentum,
        )

    @property
    def class_count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def ema_update(bank: PrototypeBank, class_index: int, features: Array) -> PrototypeBank:
    """Blend the batch mean of unit features into one class prototype.

    First update of a class adopts the normalized batch mean directly;
    later updates use gamma * m + (1 - gamma) * mean, renormalized.
    Mutates and returns the bank.
    """
    if not 0 <= class_index < bank.class_count:
        raise ValidationError(
            f"class {class_index} out of range for {bank.class_count} classes")
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[None, :]
    if features.shape[0] == 0:
        raise ValidationError("empty feature batch")
    if features.shape[1] != bank.dim:
        raise ValidationError(
            f"feature dim {features.shape[1]} does not match bank dim {bank.dim}")
    batch_mean = features.mean(axis=0)
    if bank.initialized[class_index]:
        blended = bank.momentum * bank.vectors[class_index] \
            + (1.0 - bank.momentum) * batch_mean
        bank.vectors[class_index] = l2_normalize(blended)
    else:
        bank.vectors[class_index] = l2_normalize(batch_mean)
        bank.initialized[class_index] = True
    return bank
