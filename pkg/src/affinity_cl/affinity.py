"""Confusion statistics and the class-affinity model built from them.

Misclassification counts feed per-class neighbor sets (the top-K most
confused classes), which feed a pairwise-plus-contextual affinity score.
Classes whose affinity to an anchor exceeds n_a / K form that anchor's
motion family, the contrast set of the inter-class loss, and the family
size selects a piecewise temperature.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError

Array = np.ndarray


@dataclass(frozen=True)
class ConfusionStats:
    """Counts of class-i samples predicted as class j (diagonal unused).

    Instances are immutable; recording and merging return new ones, so
    per-shard accumulation followed by a merge is equivalent to a single
    recording pass.
    """

    class_count: int
    counts: Array          # (c, c) int64
    total_recorded: int    # number of off-diagonal events recorded

    @classmethod
    def empty(cls, class_count: int) -> "ConfusionStats":
        if class_count < 2:
            raise ValidationError("class_count must be >= 2")
        return cls(class_count, np.zeros((class_count, class_count), dtype=np.int64), 0)


def record_confusion(stats: ConfusionStats,
                     true_labels: Sequence[int],
                     pred_labels: Sequence[int]) -> ConfusionStats:
    """Count each misclassified (true, pred) pair; correct predictions are ignored."""
    if len(true_labels) != len(pred_labels):
        raise ValidationError("label lists must have equal length")
    counts = stats.counts.copy()
    recorded = 0
    c = stats.class_count
    for true, pred in zip(true_labels, pred_labels):
        true, pred = int(true), int(pred)
        if not (0 <= true < c and 0 <= pred < c):
            raise ValidationError(
                f"label pair ({true}, {pred}) out of range for {c} classes")
        if true != pred:
            counts[true, pred] += 1
            recorded += 1
    return ConfusionStats(c, counts, stats.total_recorded + recorded)


def merge_confusion(a: ConfusionStats, b: ConfusionStats) -> ConfusionStats:
    if a.class_count != b.class_count:
        raise ValidationError("cannot merge stats with different class counts")
    return ConfusionStats(a.class_count, a.counts + b.counts,
                          a.total_recorded + b.total_recorded)


def top_k_neighbors(stats: ConfusionStats, class_index: int, k: int) -> list[int]:
    """Up to k classes j != i with the largest strictly positive counts.

    Ties break toward the smaller class index, so the result is
    deterministic. Returned in rank order.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    c = stats.class_count
    if not 0 <= class_index < c:
        raise ValidationError(f"class {class_index} out of range for {c} classes")
    row = stats.counts[class_index]
    candidates = [j for j in range(c) if j != class_index and row[j] > 0]
    candidates.sort(key=lambda j: (-int(row[j]), j))
    return candidates[:k]


def family_temperature(family_size: int, k: int) -> float:
    """Piecewise temperature by family size: 0.1, then 0.5 above k, 1.0 above 2k."""
    if family_size < 0:
        raise ValidationError("family_size must be >= 0")
    if k < 1:
        raise ValidationError("k must be >= 1")
    if family_size <= k:
        return 0.1
    if family_size <= 2 * k:
        return 0.5
    return 1.0


def build_motion_families(w: Array, n_a: int, k: int) -> tuple[list[list[int]], list[int]]:
    """Family of each class: members j != i with w[i, j] strictly above n_a / k.

    Returns (families, sizes); sizes exclude the anchor class itself.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValidationError(f"w must be square, got shape {w.shape}")
    if not 0 < n_a <= k:
        raise ValidationError("n_a must satisfy 0 < n_a <= k")
    threshold = n_a / k
    families: list[list[int]] = []
    for i in range(w.shape[0]):
        members = [j for j in range(w.shape[1]) if j != i and w[i, j] > threshold]
        families.append(members)
    return families, [len(f) for f in families]


@dataclass(frozen=True)
class AffinityModel:
    """Neighbor sets, indicator, affinity matrix, and motion families.

    ``family_sizes`` count members only (anchor excluded); this choice is
    echoed in the serialized affinity report.
    """

    class_count: int
    k: int
    n_a: int
    neighbor_sets: tuple[tuple[int, ...], ...]
    indicator: Array         # (c, c) int64, indicator[i, j] = 1 iff j in N_k(i)
    w: Array                 # (c, c) float64 affinity similarities, zero diagonal
    families: tuple[tuple[int, ...], ...]
    family_sizes: tuple[int, ...]
    temperatures: tuple[float, ...]

    def family_of(self, class_index: int) -> tuple[int, ...]:
        return self.families[class_index]

    def temperature_of(self, class_index: int) -> float:
        return self.temperatures[class_index]


def affinity_similarity(model: AffinityModel, i: int, j: int) -> float:
    """indicator(i, j)/2 + shared-neighbor count / |N_k(i)|; 0 without neighbors."""
    if i == j:
        raise ValidationError("self-affinity undefined")
    c = model.class_count
    if not (0 <= i < c and 0 <= j < c):
        raise ValidationError(f"class pair ({i}, {j}) out of range for {c} classes")
    size = len(model.neighbor_sets[i])
    if size == 0:
        return 0.0
    shared = int(np.dot(model.indicator[i], model.indicator[j]))
    return float(model.indicator[i, j]) / 2.0 + float(shared) / float(size)


def build_affinity_model(stats: ConfusionStats, k: int, n_a: int) -> AffinityModel:
    """Full pipeline: neighbor sets -> indicator -> affinity matrix -> families."""
    if not 0 < n_a <= k:
        raise ValidationError("n_a must satisfy 0 < n_a <= k")
    c = stats.class_count
    neighbor_sets = tuple(tuple(top_k_neighbors(stats, i, k)) for i in range(c))
    indicator = np.zeros((c, c), dtype=np.int64)
    for i, neighbors in enumerate(neighbor_sets):
        indicator[i, list(neighbors)] = 1
    shared = indicator @ indicator.T        # symmetric AND-counts
    sizes = indicator.sum(axis=1)
    w = np.zeros((c, c), dtype=np.float64)
    nonempty = sizes > 0
    w[nonempty] = (indicator[nonempty].astype(np.float64) / 2.0
                   + shared[nonempty].astype(np.float64)
                   / sizes[nonempty, None].astype(np.float64))
    np.fill_diagonal(w, 0.0)
    families, family_sizes = build_motion_families(w, n_a, k)
    temperatures = tuple(family_temperature(size, k) for size in family_sizes)
    return AffinityModel(
        class_count=c,
        k=k,
        n_a=n_a,
        neighbor_sets=neighbor_sets,
        indicator=indicator,
        w=w,
        families=tuple(tuple(f) for f in families),
        family_sizes=tuple(family_sizes),
        temperatures=temperatures,
    )
