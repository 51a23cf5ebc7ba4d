"""Deterministic training loop, evaluation, and checkpointing.

SGD with Nesterov momentum, weight decay, and a per-epoch cosine learning
rate schedule. The contrastive heads are weight-gated until the affinity
start epoch so the computation keeps one shape across the whole run; from
that epoch on, training predictions feed the confusion statistics and the
affinity model is rebuilt at every epoch boundary. Given the same config,
seed, and dataset, every emitted byte (metrics JSONL and checkpoint) is
identical across runs.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nm
from .affinity import (AffinityModel, ConfusionStats, build_affinity_model,
                       record_confusion)
from .backbone import EncoderParams, SkeletonGraph, encode_batch_graph
from .data import SkeletonDataset, split_dataset
from .errors import (MagicMismatchError, NumericalError,
                     TruncatedPayloadError, ValidationError)
from .losses import ContrastConfig, batch_loss
from .prototypes import PrototypeBank, ema_update

Array = np.ndarray

CHECKPOINT_MAGIC = b"ACLCKPT1"

_RESET_POLICIES = ("none", "per_epoch")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    affinity_start_epoch: int = 10
    intra_start_epoch: int | None = None
    confusion_reset: str = "none"
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    channels: tuple[int, ...] = (3, 16, 32, 32)
    embed_dim: int = 32
    train_fraction: float = 0.3
    seed: int = 0
    prototype_grad: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if not 0 <= self.affinity_start_epoch <= self.epochs:
            raise ValidationError("affinity_start_epoch must lie in [0, epochs]")
        if self.intra_start_epoch is not None and not (
                0 <= self.intra_start_epoch <= self.epochs):
            raise ValidationError("intra_start_epoch must lie in [0, epochs]")
        if self.confusion_reset not in _RESET_POLICIES:
            raise ValidationError(
                f"confusion_reset must be one of {_RESET_POLICIES}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError("train_fraction must lie strictly in (0, 1)")
        if self.prototype_grad:
            raise ValidationError(
                "prototype_grad=true is not supported: prototypes are EMA "
                "statistics and receive no gradients")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        contrast_raw = raw.pop("contrast", {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        contrast_known = {f.name for f in dataclasses.fields(ContrastConfig)}
        contrast_unknown = set(contrast_raw) - contrast_known
        if contrast_unknown:
            raise ValidationError(
                f"unknown contrast config keys: {sorted(contrast_unknown)}")
        if "channels" in raw:
            raw["channels"] = tuple(int(c) for c in raw["channels"])
        return cls(contrast=ContrastConfig(**contrast_raw), **raw)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["channels"] = list(self.channels)
        return out


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    lr: float
    ce: float
    inter: float
    intra: float
    total: float
    train_accuracy: float
    eval_accuracy: float
    family_count: int
    mean_family_size: float
    family_recovery: float | None
    intra_anchor_sum: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    per_class_accuracy: Array
    confusion: Array


@dataclass
class Checkpoint:
    config: TrainConfig
    epoch: int
    params: EncoderParams
    prototypes: PrototypeBank
    confusion: ConfusionStats
    affinity: AffinityModel | None
    metrics_tail: EpochMetrics | None


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * epoch / total_epochs)) / 2, no warmup."""
    if not 0 <= epoch <= total_epochs:
        raise ValidationError("epoch must lie in [0, total_epochs]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def sgd_nesterov_step(params: Mapping[str, Array], grads: Mapping[str, Array],
                      velocity: Mapping[str, Array], lr: float,
                      momentum: float, weight_decay: float
                      ) -> tuple[Mapping[str, Array], Mapping[str, Array]]:
    """In-place Nesterov update: v <- mu v + g', p <- p - lr (g' + mu v).

    g' is the gradient plus coupled weight decay. Parameter and velocity
    dicts are mutated and returned.
    """
    for name, p in params.items():
        g = grads[name]
        v = velocity[name]
        if g.shape != p.shape or v.shape != p.shape:
            raise ValidationError(
                f"shape mismatch updating '{name}': param {p.shape}, "
                f"grad {g.shape}, velocity {v.shape}")
        adjusted = g + weight_decay * p
        v *= momentum
        v += adjusted
        p -= lr * (adjusted + momentum * v)
    return params, velocity


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _forward_values(params: EncoderParams, graph: SkeletonGraph,
                    samples: Array, chunk: int = 64) -> tuple[Array, Array]:
    """Value-only batched forward pass; returns (logits, embeddings)."""
    leaves = {name: nm.Var(value) for name, value in params.tensors.items()}
    logits_parts = []
    embed_parts = []
    for start in range(0, len(samples), chunk):
        piece = samples[start:start + chunk]
        logits, embeddings, _ = encode_batch_graph(
            piece, graph, leaves, params.layer_names())
        logits_parts.append(logits.data)
        embed_parts.append(embeddings.data)
    return np.concatenate(logits_parts), np.concatenate(embed_parts)


def evaluate_params(params: EncoderParams, graph: SkeletonGraph,
                    split: SkeletonDataset) -> EvalResult:
    logits, _ = _forward_values(params, graph, split.samples)
    predictions = np.argmax(logits, axis=1)  # argmax ties -> smallest index
    labels = np.asarray(split.labels)
    c = split.class_count
    confusion = np.zeros((c, c), dtype=np.int64)
    for true, pred in zip(labels, predictions):
        confusion[int(true), int(pred)] += 1
    per_class = np.zeros(c, dtype=np.float64)
    class_totals = confusion.sum(axis=1)
    nonzero = class_totals > 0
    per_class[nonzero] = confusion.diagonal()[nonzero] / class_totals[nonzero]
    accuracy = float(confusion.trace() / max(1, confusion.sum()))
    return EvalResult(accuracy=accuracy, per_class_accuracy=per_class,
                      confusion=confusion)


def evaluate(checkpoint: Checkpoint, split: SkeletonDataset) -> EvalResult:
    if split.class_count != checkpoint.params.class_count:
        raise ValidationError(
            f"dataset has {split.class_count} classes but checkpoint expects "
            f"{checkpoint.params.class_count}")
    graph = split.graph
    return evaluate_params(checkpoint.params, graph, split)


def family_recovery_score(families: Sequence[Sequence[int]],
                          planted: Sequence[Sequence[int]]) -> float:
    """Pairwise F1 between learned family pairs and planted same-superclass pairs."""
    learned = {(min(i, j), max(i, j))
               for i, members in enumerate(families) for j in members}
    truth = set()
    for block in planted:
        block = list(block)
        for a in range(len(block)):
            for b in range(a + 1, len(block)):
                truth.add((min(block[a], block[b]), max(block[a], block[b])))
    if not learned and not truth:
        return 1.0
    if not learned or not truth:
        return 0.0
    hits = len(learned & truth)
    precision = hits / len(learned)
    recall = hits / len(truth)
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train(cfg: TrainConfig, dataset: SkeletonDataset,
          metrics_path=None) -> tuple[Checkpoint, list[EpochMetrics]]:
    """Run the full loop and return the final checkpoint with metrics history.

    When ``metrics_path`` is given, one JSON line per epoch is appended as
    training progresses.
    """
    if dataset.class_count < 2:
        raise ValidationError("dataset needs at least 2 classes")
    if cfg.channels[0] != dataset.samples.shape[1]:
        raise ValidationError(
            f"encoder expects {cfg.channels[0]} input channels but dataset "
            f"has {dataset.samples.shape[1]}")

    train_split, eval_split = split_dataset(dataset, cfg.train_fraction, cfg.seed)
    if cfg.batch_size > len(train_split):
        raise ValidationError(
            f"batch_size {cfg.batch_size} exceeds train split size "
            f"{len(train_split)}")

    c = dataset.class_count
    graph = dataset.graph
    params = EncoderParams.initialize(cfg.channels, c, cfg.embed_dim, seed=cfg.seed)
    velocity = {name: np.zeros_like(t) for name, t in params.tensors.items()}
    bank = PrototypeBank.create(c, cfg.embed_dim, momentum=cfg.contrast.momentum)
    stats = ConfusionStats.empty(c)
    model: AffinityModel | None = None
    k_eff = min(cfg.contrast.k, c - 1)
    intra_start = (cfg.intra_start_epoch if cfg.intra_start_epoch is not None
                   else cfg.affinity_start_epoch)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 13]))

    metrics_file = None
    if metrics_path is not None:
        metrics_file = Path(metrics_path).open("w", encoding="utf-8")

    history: list[EpochMetrics] = []
    try:
        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
            affinity_active = epoch >= cfg.affinity_start_epoch
            intra_active = epoch >= intra_start
            effective = dataclasses.replace(
                cfg.contrast,
                lambda_inter=cfg.contrast.lambda_inter if affinity_active else 0.0,
                lambda_intra=cfg.contrast.lambda_intra if intra_active else 0.0,
            )
            if affinity_active and cfg.confusion_reset == "per_epoch":
                stats = ConfusionStats.empty(c)

            order = shuffle_rng.permutation(len(train_split))
            sums = {"ce": 0.0, "inter": 0.0, "intra": 0.0, "total": 0.0,
                    "intra_anchor_sum": 0.0}
            batches = 0
            correct = 0
            seen = 0
            for start in range(0, len(order), cfg.batch_size):
                chunk = order[start:start + cfg.batch_size]
                if len(chunk) < 2:
                    continue  # a lone trailing sample cannot form contrast pairs
                x = train_split.samples[chunk]
                batch_labels = [int(l) for l in train_split.labels[chunk]]

                leaves = {name: nm.Var(value)
                          for name, value in params.tensors.items()}
                logits, embeddings, _ = encode_batch_graph(
                    x, graph, leaves, params.layer_names())
                breakdown, grads = batch_loss(
                    logits, embeddings, batch_labels,
                    model if affinity_active else None,
                    bank, effective, wrt=leaves)
                if not math.isfinite(breakdown.total):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch}, batch {batches}")
                sgd_nesterov_step(params.tensors, grads, velocity, lr,
                                  cfg.momentum, cfg.weight_decay)

                predictions = np.argmax(logits.data, axis=1)
                correct += int(np.sum(predictions == np.asarray(batch_labels)))
                seen += len(chunk)
                if affinity_active:
                    stats = record_confusion(stats, batch_labels,
                                             [int(p) for p in predictions])
                for class_index in sorted(set(batch_labels)):
                    member_rows = [embeddings.data[b]
                                   for b, l in enumerate(batch_labels)
                                   if l == class_index]
                    ema_update(bank, class_index, np.stack(member_rows))

                sums["ce"] += breakdown.ce
                sums["inter"] += breakdown.inter
                sums["intra"] += breakdown.intra
                sums["total"] += breakdown.total
                sums["intra_anchor_sum"] += breakdown.intra * len(chunk)
                batches += 1

            if affinity_active:
                model = build_affinity_model(stats, k_eff, cfg.contrast.n_a)

            eval_result = evaluate_params(params, graph, eval_split)
            if model is not None:
                nonempty = [s for s in model.family_sizes if s > 0]
                family_count = len(nonempty)
                mean_size = float(np.mean(nonempty)) if nonempty else 0.0
                recovery = (family_recovery_score(model.families,
                                                  dataset.planted_families)
                            if dataset.planted_families is not None else None)
            else:
                family_count = 0
                mean_size = 0.0
                recovery = (0.0 if dataset.planted_families is not None else None)

            metrics = EpochMetrics(
                epoch=epoch,
                lr=float(lr),
                ce=sums["ce"] / max(1, batches),
                inter=sums["inter"] / max(1, batches),
                intra=sums["intra"] / max(1, batches),
                total=sums["total"] / max(1, batches),
                train_accuracy=correct / max(1, seen),
                eval_accuracy=eval_result.accuracy,
                family_count=family_count,
                mean_family_size=mean_size,
                family_recovery=recovery,
                intra_anchor_sum=sums["intra_anchor_sum"] / max(1, batches),
            )
            history.append(metrics)
            if metrics_file is not None:
                metrics_file.write(json.dumps(metrics.to_dict(), sort_keys=True))
                metrics_file.write("\n")
                metrics_file.flush()
    finally:
        if metrics_file is not None:
            metrics_file.close()

    checkpoint = Checkpoint(
        config=cfg,
        epoch=cfg.epochs,
        params=params,
        prototypes=bank,
        confusion=stats,
        affinity=model,
        metrics_tail=history[-1] if history else None,
    )
    return checkpoint, history


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def _pack_tensors(tensors: Mapping[str, Array]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    return b"".join(parts)


def _unpack_tensors(blob: bytes, source: str) -> dict[str, Array]:
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise MagicMismatchError(
            f"{source}: expected magic {CHECKPOINT_MAGIC!r}, "
            f"found {blob[:len(CHECKPOINT_MAGIC)]!r}")
    offset = len(CHECKPOINT_MAGIC)

    def take(count: int) -> bytes:
        nonlocal offset
        if offset + count > len(blob):
            raise TruncatedPayloadError(
                f"{source}: truncated payload, expected {offset + count} bytes "
                f"so far, found {len(blob)}")
        piece = blob[offset:offset + count]
        offset += count
        return piece

    (tensor_count,) = struct.unpack("<I", take(4))
    tensors: dict[str, Array] = {}
    for _ in range(tensor_count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(take(size * 8), dtype="<f8").astype(np.float64)
        tensors[name] = values.reshape(shape)
    if offset != len(blob):
        raise TruncatedPayloadError(
            f"{source}: {len(blob) - offset} trailing bytes after payload")
    return tensors


def _affinity_state(ckpt: Checkpoint) -> dict:
    state: dict = {
        "confusion": ckpt.confusion.counts.tolist(),
        "total_recorded": ckpt.confusion.total_recorded,
        "family_size_excludes_anchor": True,
        "model": None,
    }
    if ckpt.affinity is not None:
        m = ckpt.affinity
        state["model"] = {
            "k": m.k,
            "n_a": m.n_a,
            "neighbor_sets": [list(s) for s in m.neighbor_sets],
            "indicator": m.indicator.tolist(),
            "w": m.w.tolist(),
            "families": [list(f) for f in m.families],
            "family_sizes": list(m.family_sizes),
            "temperatures": list(m.temperatures),
        }
    return state


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "magic": CHECKPOINT_MAGIC.decode("ascii"),
        "epoch": ckpt.epoch,
        "config": ckpt.config.to_dict(),
        "metrics_tail": (ckpt.metrics_tail.to_dict()
                         if ckpt.metrics_tail is not None else None),
    }
    (out / "meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tensors = dict(ckpt.params.tensors)
    tensors["prototypes.vectors"] = ckpt.prototypes.vectors
    tensors["prototypes.initialized"] = ckpt.prototypes.initialized.astype(np.float64)
    (out / "params.bin").write_bytes(_pack_tensors(tensors))
    (out / "affinity.json").write_text(
        json.dumps(_affinity_state(ckpt), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    try:
        meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed checkpoint meta.json: {exc}") from exc
    if meta.get("magic") != CHECKPOINT_MAGIC.decode("ascii"):
        raise MagicMismatchError(
            f"meta.json: expected magic {CHECKPOINT_MAGIC.decode('ascii')!r}, "
            f"found {meta.get('magic')!r}")
    cfg = TrainConfig.from_dict(meta["config"])
    tensors = _unpack_tensors((root / "params.bin").read_bytes(), "params.bin")

    proto_vectors = tensors.pop("prototypes.vectors")
    proto_init = tensors.pop("prototypes.initialized").astype(bool)
    bank = PrototypeBank(vectors=proto_vectors, initialized=proto_init,
                         momentum=cfg.contrast.momentum)

    c = proto_vectors.shape[0]
    params = EncoderParams(channels=cfg.channels, class_count=c,
                           embed_dim=cfg.embed_dim, tensors=tensors)
    expected = set(params.layer_names()) | {
        "classifier.weight", "classifier.bias",
        "projection.weight", "projection.bias"}
    if set(tensors) != expected:
        raise ValidationError(
            f"checkpoint tensors {sorted(tensors)} do not match the encoder "
            f"layout {sorted(expected)}")

    state = json.loads((root / "affinity.json").read_text(encoding="utf-8"))
    stats = ConfusionStats(
        class_count=c,
        counts=np.asarray(state["confusion"], dtype=np.int64),
        total_recorded=int(state["total_recorded"]),
    )
    model = None
    if state["model"] is not None:
        m = state["model"]
        model = AffinityModel(
            class_count=c,
            k=int(m["k"]),
            n_a=int(m["n_a"]),
            neighbor_sets=tuple(tuple(int(j) for j in s)
                                for s in m["neighbor_sets"]),
            indicator=np.asarray(m["indicator"], dtype=np.int64),
            w=np.asarray(m["w"], dtype=np.float64),
            families=tuple(tuple(int(j) for j in f) for f in m["families"]),
            family_sizes=tuple(int(s) for s in m["family_sizes"]),
            temperatures=tuple(float(t) for t in m["temperatures"]),
        )

    tail = None
    if meta["metrics_tail"] is not None:
        tail = EpochMetrics(**meta["metrics_tail"])
    return Checkpoint(config=cfg, epoch=int(meta["epoch"]), params=params,
                      prototypes=bank, confusion=stats, affinity=model,
                      metrics_tail=tail)
