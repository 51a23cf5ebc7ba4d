"""Synthetic skeleton sequences with planted superclass structure.

Each superclass owns a smooth motion template (a per-joint baseline offset
plus a mixture of low-frequency sinusoids). Classes inside a superclass
blend that shared template with a class-specific one at weight ``overlap``
versus ``1 - overlap``, so classes in the same planted family are
structurally confusable while classes across families are not. Samples add
Gaussian noise and a small random temporal phase shift.

Datasets round-trip bit-exactly through a directory format: meta.json,
samples.bin (little-endian float32, [sample][channel][frame][joint]) and
labels.bin (little-endian uint32), each binary headed by the magic
"ACLDSET1". Generated values are float32-quantized at creation so the
in-memory dataset equals its own round trip.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import SkeletonGraph
from .errors import (MagicMismatchError, TruncatedPayloadError,
                     ValidationError)

Array = np.ndarray

MAGIC = b"ACLDSET1"

_META_FIELDS = {
    "magic", "class_count", "superclass_count", "joints", "frames",
    "channels", "samples_per_class", "overlap", "noise", "seed",
    "sample_count", "planted_families", "adjacency",
}


@dataclass(frozen=True)
class GenConfig:
    class_count: int = 12
    superclass_count: int = 3
    joints: int = 17
    frames: int = 20
    channels: int = 3
    samples_per_class: int = 40
    overlap: float = 0.8
    noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        counts = (self.class_count, self.superclass_count, self.joints,
                  self.frames, self.channels, self.samples_per_class)
        if any(v < 1 for v in counts):
            raise ValidationError("all generator counts must be positive")
        if self.superclass_count > self.class_count:
            raise ValidationError("superclass_count must not exceed class_count")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValidationError("overlap must lie in [0, 1]")
        if self.noise < 0:
            raise ValidationError("noise must be >= 0")

    @classmethod
    def from_dict(cls, raw: dict) -> "GenConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(
                f"unknown generator config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class SkeletonDataset:
    """Labeled sequences over a shared joint graph.

    ``samples`` has shape (n, channels, frames, joints); values are
    float64 but float32-representable so the file format is lossless.
    """

    samples: Array
    labels: Array
    graph: SkeletonGraph
    class_count: int
    meta: GenConfig
    planted_families: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        if self.samples.ndim != 4:
            raise ValidationError(
                f"samples must be 4-d, got shape {self.samples.shape}")
        if len(self.labels) != len(self.samples):
            raise ValidationError("labels and samples disagree in length")
        labels = np.asarray(self.labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValidationError(
                f"label {int(labels.max())} out of range for "
                f"{self.class_count} classes")
        if self.planted_families is not None:
            flat = sorted(c for fam in self.planted_families for c in fam)
            if flat != list(range(self.class_count)):
                raise ValidationError(
                    "planted families must partition the class set")

    def __len__(self) -> int:
        return len(self.samples)


def chain_plus_limbs_adjacency(joints: int) -> Array:
    """Deterministic skeleton-like tree: a spine chain with limb chains.

    Roughly a third of the joints form the spine; the rest attach as limbs
    distributed round-robin over the spine joints.
    """
    if joints < 1:
        raise ValidationError("joints must be positive")
    a = np.zeros((joints, joints), dtype=np.float64)
    spine = max(1, (joints + 2) // 3)
    for j in range(1, spine):
        a[j - 1, j] = a[j, j - 1] = 1.0
    attachment = [j % spine for j in range(joints - spine)]
    last_limb_joint: dict[int, int] = {}
    for offset, spine_joint in enumerate(attachment):
        joint = spine + offset
        parent = last_limb_joint.get(spine_joint, spine_joint)
        a[parent, joint] = a[joint, parent] = 1.0
        last_limb_joint[spine_joint] = joint
    return a


def planted_partition(class_count: int, superclass_count: int) -> tuple[tuple[int, ...], ...]:
    """Contiguous, near-even split of classes into superclasses."""
    blocks = np.array_split(np.arange(class_count), superclass_count)
    return tuple(tuple(int(c) for c in block) for block in blocks)


# Class-specific templates carry a weaker baseline posture than superclass
# templates: within-family discrimination then hinges on subtle posture and
# motion cues while families stay far apart, which is what keeps confusion
# concentrated inside planted families.
_SPECIFIC_BASELINE_SCALE = 0.6


def _motion_template(rng: np.random.Generator, channels: int, frames: int,
                     joints: int, baseline_scale: float) -> Array:
    """Baseline posture plus up to four low-frequency sinusoids per joint."""
    t = np.arange(frames) / frames
    baseline = baseline_scale * rng.normal(0.0, 1.0, size=(channels, 1, joints))
    template = np.broadcast_to(baseline, (channels, frames, joints)).copy()
    for k in range(1, 5):
        amplitude = rng.uniform(0.2, 1.0, size=(channels, 1, joints)) / k
        phase = rng.uniform(0.0, 2.0 * np.pi, size=(channels, 1, joints))
        template += amplitude * np.sin(2.0 * np.pi * k * t[None, :, None] + phase)
    return template


def generate_synthetic(cfg: GenConfig) -> SkeletonDataset:
    """Deterministic dataset with planted family structure.

    Template construction uses one seeded stream; each class then draws
    its samples from its own derived stream, so generation could be
    parallelized per class without changing a single byte.
    """
    adjacency = chain_plus_limbs_adjacency(cfg.joints)
    graph = SkeletonGraph.from_adjacency(adjacency)
    families = planted_partition(cfg.class_count, cfg.superclass_count)

    template_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    shared = [_motion_template(template_rng, cfg.channels, cfg.frames,
                               cfg.joints, baseline_scale=1.0)
              for _ in range(cfg.superclass_count)]
    specific = [_motion_template(template_rng, cfg.channels, cfg.frames,
                                 cfg.joints,
                                 baseline_scale=_SPECIFIC_BASELINE_SCALE)
                for _ in range(cfg.class_count)]
    family_of = {c: f for f, block in enumerate(families) for c in block}

    max_shift = max(1, cfg.frames // 8)
    sample_list = []
    label_list = []
    for class_index in range(cfg.class_count):
        trajectory = (cfg.overlap * shared[family_of[class_index]]
                      + (1.0 - cfg.overlap) * specific[class_index])
        class_rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 1 + class_index]))
        for _ in range(cfg.samples_per_class):
            shift = int(class_rng.integers(0, max_shift + 1))
            sample = np.roll(trajectory, shift, axis=1)
            sample = sample + cfg.noise * class_rng.standard_normal(sample.shape)
            sample_list.append(sample)
            label_list.append(class_index)

    samples = np.stack(sample_list).astype(np.float32).astype(np.float64)
    labels = np.array(label_list, dtype=np.int64)
    return SkeletonDataset(
        samples=samples,
        labels=labels,
        graph=graph,
        class_count=cfg.class_count,
        meta=cfg,
        planted_families=families,
    )


# ---------------------------------------------------------------------------
# directory format
# ---------------------------------------------------------------------------

def write_dataset(ds: SkeletonDataset, path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "magic": MAGIC.decode("ascii"),
        "class_count": ds.class_count,
        "superclass_count": ds.meta.superclass_count,
        "joints": int(ds.samples.shape[3]),
        "frames": int(ds.samples.shape[2]),
        "channels": int(ds.samples.shape[1]),
        "samples_per_class": ds.meta.samples_per_class,
        "overlap": ds.meta.overlap,
        "noise": ds.meta.noise,
        "seed": ds.meta.seed,
        "sample_count": int(len(ds)),
        "planted_families": ([list(f) for f in ds.planted_families]
                             if ds.planted_families is not None else None),
        "adjacency": ds.graph.adjacency.tolist(),
    }
    (out / "meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "samples.bin").write_bytes(
        MAGIC + ds.samples.astype("<f4").tobytes())
    (out / "labels.bin").write_bytes(
        MAGIC + ds.labels.astype("<u4").tobytes())


def _read_binary(path: Path, expected_bytes: int) -> bytes:
    blob = path.read_bytes()
    if blob[:len(MAGIC)] != MAGIC:
        raise MagicMismatchError(
            f"{path.name}: expected magic {MAGIC!r}, found {blob[:len(MAGIC)]!r}")
    payload = blob[len(MAGIC):]
    if len(payload) != expected_bytes:
        raise TruncatedPayloadError(
            f"{path.name}: truncated payload, expected {expected_bytes} bytes, "
            f"found {len(payload)}")
    return payload


def load_dataset(path) -> SkeletonDataset:
    root = Path(path)
    meta_path = root / "meta.json"
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed meta.json: {exc}") from exc
    if not isinstance(meta, dict) or set(meta) != _META_FIELDS:
        raise ValidationError("meta.json does not carry the expected fields")
    if meta["magic"] != MAGIC.decode("ascii"):
        raise MagicMismatchError(
            f"meta.json: expected magic {MAGIC.decode('ascii')!r}, "
            f"found {meta['magic']!r}")

    n = int(meta["sample_count"])
    channels, frames, joints = (int(meta["channels"]), int(meta["frames"]),
                                int(meta["joints"]))
    samples_raw = _read_binary(root / "samples.bin",
                               n * channels * frames * joints * 4)
    labels_raw = _read_binary(root / "labels.bin", n * 4)
    samples = np.frombuffer(samples_raw, dtype="<f4").astype(np.float64)
    samples = samples.reshape(n, channels, frames, joints)
    labels = np.frombuffer(labels_raw, dtype="<u4").astype(np.int64)

    cfg = GenConfig(
        class_count=int(meta["class_count"]),
        superclass_count=int(meta["superclass_count"]),
        joints=joints,
        frames=frames,
        channels=channels,
        samples_per_class=int(meta["samples_per_class"]),
        overlap=float(meta["overlap"]),
        noise=float(meta["noise"]),
        seed=int(meta["seed"]),
    )
    families = meta["planted_families"]
    if families is not None:
        families = tuple(tuple(int(c) for c in fam) for fam in families)
    adjacency = np.asarray(meta["adjacency"], dtype=np.float64)
    return SkeletonDataset(
        samples=samples,
        labels=labels,
        graph=SkeletonGraph.from_adjacency(adjacency),
        class_count=cfg.class_count,
        meta=cfg,
        planted_families=families,
    )


def split_dataset(ds: SkeletonDataset, train_fraction: float,
                  seed: int) -> tuple[SkeletonDataset, SkeletonDataset]:
    """Stratified, seeded partition into train and eval subsets."""
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError("train_fraction must lie strictly in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    train_idx: list[int] = []
    eval_idx: list[int] = []
    labels = np.asarray(ds.labels)
    for class_index in range(ds.class_count):
        members = np.flatnonzero(labels == class_index)
        if len(members) < 2:
            raise ValidationError(
                f"class {class_index} has {len(members)} samples; "
                "need at least 2 to split")
        order = members[rng.permutation(len(members))]
        n_train = int(round(train_fraction * len(members)))
        n_train = min(max(n_train, 1), len(members) - 1)
        train_idx.extend(int(i) for i in order[:n_train])
        eval_idx.extend(int(i) for i in order[n_train:])
    train_idx.sort()
    eval_idx.sort()

    def subset(indices: list[int]) -> SkeletonDataset:
        return SkeletonDataset(
            samples=ds.samples[indices].copy(),
            labels=labels[indices].copy(),
            graph=ds.graph,
            class_count=ds.class_count,
            meta=ds.meta,
            planted_families=ds.planted_families,
        )

    return subset(train_idx), subset(eval_idx)
