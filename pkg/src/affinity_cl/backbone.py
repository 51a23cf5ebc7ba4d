"""Toy spatial graph encoder for skeleton sequences.

A stack of graph convolution layers (spatial aggregation over joints,
channel mix, ReLU), global average pooling over frames and joints, then a
classifier head producing logits and a projection head producing a
unit-length contrastive embedding. Temporal modeling is pooling only; the
interesting behavior of this package lives in the loss heads, so the
encoder stays minimal and fully checkable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nm
from .errors import ValidationError

Array = np.ndarray

DEGENERATE_NORM = 1e-6


def normalize_adjacency(adjacency: Array) -> Array:
    """Symmetric normalization with self-loops: D^{-1/2} (A + I) D^{-1/2}.

    D is the degree matrix of A + I, so every joint has degree >= 1 and the
    spectral radius of the result is at most 1.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"adjacency must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("adjacency contains non-finite entries")
    if np.any(a < 0):
        raise ValidationError("adjacency must be non-negative")
    if not np.array_equal(a, a.T):
        raise ValidationError("adjacency must be symmetric")
    with_loops = a + np.eye(a.shape[0])
    degrees = with_loops.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(degrees)
    # outer(d, d) is bitwise symmetric, so the product stays exactly symmetric
    return np.outer(inv_sqrt, inv_sqrt) * with_loops


@dataclass(frozen=True)
class SkeletonGraph:
    """Joint graph: raw adjacency plus its normalized form."""

    adjacency: Array
    normalized: Array

    @classmethod
    def from_adjacency(cls, adjacency: Array) -> "SkeletonGraph":
        a = np.asarray(adjacency, dtype=np.float64)
        return cls(adjacency=a, normalized=normalize_adjacency(a))

    @property
    def joint_count(self) -> int:
        return self.adjacency.shape[0]


@dataclass(frozen=True)
class EncodeOutput:
    logits: Array       # (class_count,)
    embedding: Array    # (embed_dim,), unit length unless degenerate
    degenerate: bool    # projection collapsed below the normalization guard


@dataclass
class EncoderParams:
    """Named parameter tensors of the encoder.

    ``channels`` lists input channels followed by each layer's output
    channels, so len(channels) - 1 graph convolution layers.
    """

    channels: tuple[int, ...]
    class_count: int
    embed_dim: int
    tensors: dict[str, Array] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.channels) < 2:
            raise ValidationError("encoder needs at least one layer")
        if self.class_count < 2:
            raise ValidationError("class_count must be >= 2")
        if self.embed_dim < 2:
            raise ValidationError("embed_dim must be >= 2")

    @property
    def layer_count(self) -> int:
        return len(self.channels) - 1

    def layer_names(self) -> list[str]:
        return [f"layer{l}.weight" for l in range(1, self.layer_count + 1)]

    @classmethod
    def initialize(cls, channels, class_count: int, embed_dim: int,
                   seed: int = 0) -> "EncoderParams":
        """Seeded Glorot-uniform weights, biases 0.01.

        The small nonzero bias keeps the zero-input embedding away from
        the degenerate normalization guard.
        """
        params = cls(tuple(int(c) for c in channels), int(class_count), int(embed_dim))
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))

        def glorot(fan_in, fan_out, shape):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-bound, bound, size=shape)

        tensors: dict[str, Array] = {}
        for l in range(1, params.layer_count + 1):
            c_in, c_out = params.channels[l - 1], params.channels[l]
            tensors[f"layer{l}.weight"] = glorot(c_in, c_out, (c_in, c_out))
        c_last = params.channels[-1]
        tensors["classifier.weight"] = glorot(c_last, class_count, (c_last, class_count))
        tensors["classifier.bias"] = np.full(class_count, 0.01)
        tensors["projection.weight"] = glorot(c_last, embed_dim, (c_last, embed_dim))
        tensors["projection.bias"] = np.full(embed_dim, 0.01)
        params.tensors = tensors
        return params


def graph_conv_layer(x: Array, normalized_adjacency: Array, weight: Array) -> Array:
    """One layer on a (C_in, T, N) tensor: ReLU(W^T . X_t . A^T) per frame."""
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(normalized_adjacency, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64)
    if x.ndim != 3:
        raise ValidationError(f"expected (C, T, N) input, got shape {x.shape}")
    c_in, _, joints = x.shape
    if a.shape != (joints, joints):
        raise ValidationError(
            f"adjacency shape {a.shape} does not match joint count {joints}")
    if w.ndim != 2 or w.shape[0] != c_in:
        raise ValidationError(
            f"weight shape {w.shape} does not match input channels {c_in}")
    frames_first = x.transpose(1, 0, 2)              # (T, C_in, N)
    mixed = np.matmul(w.T, frames_first)             # (T, C_out, N)
    aggregated = np.matmul(mixed, a.T)               # (T, C_out, N)
    return np.maximum(aggregated, 0.0).transpose(1, 0, 2)


def encode_batch_graph(x, graph: SkeletonGraph,
                       params: Mapping[str, nm.Var],
                       layer_names: list[str]) -> tuple[nm.Var, nm.Var, nm.Var]:
    """Differentiable batched forward pass.

    ``x`` is a (B, C_in, T, N) array or Var. Returns (logits, embeddings,
    projections) as Vars of shapes (B, c), (B, d), (B, d). The normalized
    adjacency is symmetric, so right-multiplying by it aggregates joints
    exactly as the per-frame X_t A^T form does.
    """
    v = nm.as_var(x)
    if v.data.ndim != 4:
        raise ValidationError(f"expected (B, C, T, N) input, got shape {v.shape}")
    batch, _, frames, joints = v.data.shape
    if joints != graph.joint_count:
        raise ValidationError(
            f"input joint count {joints} does not match graph ({graph.joint_count})")
    adjacency = nm.Var(graph.normalized)
    h = nm.transpose(v, (0, 2, 1, 3))                          # (B, T, C, N)
    for name in layer_names:
        weight = params[name]
        if weight.data.shape[0] != h.data.shape[2]:
            raise ValidationError(
                f"'{name}' shape {weight.data.shape} does not match "
                f"incoming channels {h.data.shape[2]}")
        h = nm.relu(nm.matmul(nm.matmul(nm.transpose(weight), h), adjacency))
    pooled = nm.scale(nm.sum_along(h, axis=(1, 3)), 1.0 / (frames * joints))
    logits = nm.add(nm.matmul(pooled, params["classifier.weight"]),
                    params["classifier.bias"])
    projections = nm.add(nm.matmul(pooled, params["projection.weight"]),
                         params["projection.bias"])
    embeddings = nm.normalize(projections)
    return logits, embeddings, projections


def encode(seq: Array, graph: SkeletonGraph, params: EncoderParams) -> EncodeOutput:
    """Encode one (C_in, T, N) sequence to logits and a unit embedding."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 3:
        raise ValidationError(f"expected (C, T, N) input, got shape {seq.shape}")
    if not np.all(np.isfinite(seq)):
        raise ValidationError("input sequence contains non-finite values")
    leaves = {name: nm.Var(value) for name, value in params.tensors.items()}
    logits, embeddings, projections = encode_batch_graph(
        seq[None], graph, leaves, params.layer_names())
    proj_norm = float(np.linalg.norm(projections.data[0]))
    return EncodeOutput(
        logits=logits.data[0].copy(),
        embedding=embeddings.data[0].copy(),
        degenerate=proj_norm < DEGENERATE_NORM,
    )
