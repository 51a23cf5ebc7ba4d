"""Cross-entropy plus the two affinity contrastive loss heads.

The inter-class head contrasts an embedding against its own class
prototype versus the prototypes of its motion family, at a temperature
chosen by family size. The intra-class head enforces a margin between
every same-class positive and the closest different-class negative via a
LogSumExp softening of the max constraint. Both are built on the
reverse-mode engine in :mod:`affinity_cl.numerics`, so the scalar
convenience functions and the batched training path share one code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nm
from .affinity import AffinityModel
from .errors import ValidationError
from .prototypes import PrototypeBank

Array = np.ndarray

UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class ContrastConfig:
    """Hyperparameters of the contrastive heads.

    margin and temperature drive the intra-class head; k and n_a shape the
    affinity model and its temperature schedule; the lambda weights blend
    the heads into the total objective; momentum is the prototype EMA rate.
    """

    margin: float = 0.1
    temperature: float = 0.1
    k: int = 10
    n_a: int = 4
    lambda_inter: float = 0.1
    lambda_intra: float = 0.1
    momentum: float = 0.9

    def __post_init__(self):
        if self.margin < 0:
            raise ValidationError("margin must be >= 0")
        if self.temperature <= 0:
            raise ValidationError("temperature must be > 0")
        if not 0 < self.n_a <= self.k:
            raise ValidationError("n_a must satisfy 0 < n_a <= k")
        if self.lambda_inter < 0 or self.lambda_intra < 0:
            raise ValidationError("loss weights must be >= 0")
        if not 0.0 < self.momentum < 1.0:
            raise ValidationError("momentum must lie in (0, 1)")


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    inter: float
    intra: float
    total: float
    lambda_inter: float
    lambda_intra: float
    counts: dict[str, int] = field(default_factory=dict)


def cross_entropy(logits: Array, label: int) -> float:
    """-log softmax(logits)[label], fused as logsumexp(logits) - logits[label]."""
    logits = np.asarray(logits, dtype=np.float64)
    return float(nm.softmax_cross_entropy(nm.Var(logits), label).data)


def _check_unit(name: str, vec: Array) -> Array:
    vec = np.asarray(vec, dtype=np.float64)
    if abs(np.linalg.norm(vec) - 1.0) > UNIT_NORM_TOL:
        raise ValidationError(f"{name} is not unit length")
    return vec


def _inter_term(self_sim: nm.Var, member_sims: Sequence[nm.Var],
                tau_w: float) -> nm.Var:
    """logsumexp over own-prototype and family logits, minus the own logit."""
    scaled_self = nm.scale(self_sim, 1.0 / tau_w)
    logits = [scaled_self] + [nm.scale(s, 1.0 / tau_w) for s in member_sims]
    return nm.sub(nm.logsumexp(nm.stack(logits)), scaled_self)


def _intra_anchor_term(pos_sims: Sequence[nm.Var], neg_sims: Sequence[nm.Var],
                       margin: float, temperature: float) -> nm.Var:
    """Sum over positives of the margin-softened contrast against all negatives."""
    scaled_negs = [nm.scale(s, 1.0 / temperature) for s in neg_sims]
    total = None
    for pos in pos_sims:
        scaled_pos = nm.scale(pos, 1.0 / temperature)
        margin_logit = nm.scale(nm.add(pos, -margin), 1.0 / temperature)
        denom = nm.logsumexp(nm.stack([margin_logit] + scaled_negs))
        term = nm.sub(denom, scaled_pos)
        total = term if total is None else nm.add(total, term)
    return total


def inter_affinity_loss(embedding: Array, class_index: int, bank: PrototypeBank,
                        family: Sequence[int], tau_w: float) -> float:
    """Contrast against the own prototype versus family prototypes.

    Returns the neutral 0 when the family is empty or any required
    prototype has not been initialized yet; early epochs legitimately hit
    both cases.
    """
    if tau_w <= 0:
        raise ValidationError("tau_w must be > 0")
    members = list(family)
    if not members:
        return 0.0
    required = [class_index] + members
    if not all(bank.initialized[m] for m in required):
        return 0.0
    f = nm.Var(np.asarray(embedding, dtype=np.float64))
    self_sim = nm.dot(f, nm.Var(bank.vectors[class_index]))
    member_sims = [nm.dot(f, nm.Var(bank.vectors[m])) for m in members]
    return float(_inter_term(self_sim, member_sims, tau_w).data)


def intra_marginal_loss(anchor: Array, positives: Sequence[Array],
                        negatives: Sequence[Array], margin: float,
                        temperature: float) -> float:
    """Margin-based contrast of one anchor against its positives and negatives.

    All vectors must be unit length (cosine similarity is taken as a plain
    inner product). With no positives the loss is the empty sum, 0; with
    no negatives it collapses to -len(positives) * margin / temperature.
    """
    if temperature <= 0:
        raise ValidationError("temperature must be > 0")
    if margin < 0:
        raise ValidationError("margin must be >= 0")
    anchor = _check_unit("anchor", anchor)
    pos = [_check_unit(f"positive {i}", p) for i, p in enumerate(positives)]
    neg = [_check_unit(f"negative {i}", n) for i, n in enumerate(negatives)]
    if not pos:
        return 0.0
    a = nm.Var(anchor)
    pos_sims = [nm.dot(a, nm.Var(p)) for p in pos]
    neg_sims = [nm.dot(a, nm.Var(n)) for n in neg]
    return float(_intra_anchor_term(pos_sims, neg_sims, margin, temperature).data)


def total_loss(ce: float, inter: float, intra: float,
               lambda_inter: float, lambda_intra: float) -> float:
    return ce + lambda_inter * inter + lambda_intra * intra


def batch_loss(logits, embeddings, labels: Sequence[int],
               affinity_model: AffinityModel | None,
               bank: PrototypeBank | None,
               config: ContrastConfig,
               wrt: Mapping[str, nm.Var] | None = None,
               ) -> tuple[LossBreakdown, dict[str, Array]]:
    """Composite objective over one batch, with gradients.

    ``logits`` (B, c) and ``embeddings`` (B, d, unit rows) may be plain
    arrays or Vars from an encoder graph. Every sample acts as an anchor:
    cross-entropy averages over the batch, the inter head averages over
    anchors with non-empty families and fully initialized prototypes, and
    the intra head averages per-anchor positive sums over the whole batch
    (positives are same-class batch members excluding the anchor,
    negatives all different-class members). Gradients are returned for
    each entry of ``wrt``; prototypes receive none.
    """
    logits = nm.as_var(logits)
    embeddings = nm.as_var(embeddings)
    if logits.data.ndim != 2 or embeddings.data.ndim != 2:
        raise ValidationError("logits and embeddings must be 2-d (batch rows)")
    batch = logits.data.shape[0]
    if batch < 2:
        raise ValidationError("batch size must be >= 2")
    if embeddings.data.shape[0] != batch or len(labels) != batch:
        raise ValidationError("batch dimensions of logits/embeddings/labels disagree")
    class_count = logits.data.shape[1]
    labels = [int(l) for l in labels]
    for l in labels:
        if not 0 <= l < class_count:
            raise ValidationError(f"label {l} out of range for {class_count} classes")
    norms = np.linalg.norm(embeddings.data, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise ValidationError("embeddings must have unit rows")

    counts = {"ce": batch, "inter": 0, "intra": 0, "intra_positives": 0}

    ce_sum = None
    for b in range(batch):
        term = nm.softmax_cross_entropy(nm.take_row(logits, b), labels[b])
        ce_sum = term if ce_sum is None else nm.add(ce_sum, term)
    ce = nm.scale(ce_sum, 1.0 / batch)

    rows = [nm.take_row(embeddings, b) for b in range(batch)]

    inter: nm.Var | None = None
    if config.lambda_inter > 0 and affinity_model is not None and bank is not None:
        accum = None
        contributing = 0
        for b in range(batch):
            i = labels[b]
            family = affinity_model.family_of(i)
            if not family:
                continue
            if not bank.initialized[i] or not all(bank.initialized[a] for a in family):
                continue
            tau_w = affinity_model.temperature_of(i)
            self_sim = nm.dot(rows[b], nm.Var(bank.vectors[i]))
            member_sims = [nm.dot(rows[b], nm.Var(bank.vectors[a])) for a in family]
            term = _inter_term(self_sim, member_sims, tau_w)
            accum = term if accum is None else nm.add(accum, term)
            contributing += 1
        counts["inter"] = contributing
        if accum is not None:
            inter = nm.scale(accum, 1.0 / contributing)

    intra: nm.Var | None = None
    if config.lambda_intra > 0:
        sims: dict[tuple[int, int], nm.Var] = {}

        def sim(a: int, b: int) -> nm.Var:
            key = (a, b) if a < b else (b, a)
            if key not in sims:
                sims[key] = nm.dot(rows[key[0]], rows[key[1]])
            return sims[key]

        accum = None
        anchors_with_positives = 0
        total_positives = 0
        for b in range(batch):
            pos_idx = [u for u in range(batch) if u != b and labels[u] == labels[b]]
            if not pos_idx:
                continue
            neg_idx = [v for v in range(batch) if labels[v] != labels[b]]
            term = _intra_anchor_term(
                [sim(b, u) for u in pos_idx],
                [sim(b, v) for v in neg_idx],
                config.margin, config.temperature)
            accum = term if accum is None else nm.add(accum, term)
            anchors_with_positives += 1
            total_positives += len(pos_idx)
        counts["intra"] = anchors_with_positives
        counts["intra_positives"] = total_positives
        if accum is not None:
            intra = nm.scale(accum, 1.0 / batch)

    total = ce
    if inter is not None:
        total = nm.add(total, nm.scale(inter, config.lambda_inter))
    if intra is not None:
        total = nm.add(total, nm.scale(intra, config.lambda_intra))

    gradients: dict[str, Array] = {}
    if wrt:
        nm.backward(total)
        gradients = {
            name: (leaf.grad.copy() if leaf.grad is not None
                   else np.zeros_like(leaf.data))
            for name, leaf in wrt.items()
        }

    breakdown = LossBreakdown(
        ce=float(ce.data),
        inter=float(inter.data) if inter is not None else 0.0,
        intra=float(intra.data) if intra is not None else 0.0,
        total=float(total.data),
        lambda_inter=config.lambda_inter,
        lambda_intra=config.lambda_intra,
        counts=counts,
    )
    return breakdown, gradients


# ---------------------------------------------------------------------------
# gradient checking across the loss heads
# ---------------------------------------------------------------------------

def gradient_check_report(trials: int = 100, step: float = 1e-5,
                          seed: int = 0) -> dict[str, float]:
    """Finite-difference checks of every loss head at random configurations.

    Embedding parameters are taken pre-normalization, exactly as the
    encoder produces them, so probing a coordinate never violates the
    unit-length contract of the losses themselves. Returns the max
    relative error observed per head.
    """
    from .affinity import ConfusionStats, build_affinity_model, record_confusion

    rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    report: dict[str, float] = {}

    def unit(dim):
        v = rng.standard_normal(dim)
        return v / np.linalg.norm(v)

    worst = 0.0
    for _ in range(trials):
        c = int(rng.integers(2, 11))
        point = {"logits": rng.normal(0.0, 3.0, size=c)}
        label = int(rng.integers(0, c))
        worst = max(worst, nm.finite_diff_grad_check(
            lambda p, label=label: nm.grad_eval(
                lambda leaves: nm.softmax_cross_entropy(leaves["logits"], label),
                p),
            point, step))
    report["ce"] = worst

    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(4, 17))
        members = int(rng.integers(1, 7))
        protos = [unit(d) for _ in range(members + 1)]
        tau_w = float(rng.choice([0.1, 0.5, 1.0]))
        point = {"raw": rng.standard_normal(d) * 2.0}

        def build(leaves, protos=protos, tau_w=tau_w):
            f = nm.normalize(leaves["raw"])
            self_sim = nm.dot(f, nm.Var(protos[0]))
            member_sims = [nm.dot(f, nm.Var(p)) for p in protos[1:]]
            return _inter_term(self_sim, member_sims, tau_w)

        worst = max(worst, nm.finite_diff_grad_check(
            lambda p, build=build: nm.grad_eval(build, p), point, step))
    report["inter"] = worst

    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(4, 17))
        n_pos = int(rng.integers(1, 5))
        n_neg = int(rng.integers(0, 6))
        point = {
            "anchor": rng.standard_normal(d) * 2.0,
            "pos": rng.standard_normal((n_pos, d)) * 2.0,
            "neg": rng.standard_normal((max(n_neg, 1), d)) * 2.0,
        }

        def build(leaves, n_neg=n_neg):
            a = nm.normalize(leaves["anchor"])
            pos_sims = [nm.dot(a, nm.take_row(nm.normalize(leaves["pos"]), u))
                        for u in range(leaves["pos"].data.shape[0])]
            neg_sims = [nm.dot(a, nm.take_row(nm.normalize(leaves["neg"]), v))
                        for v in range(n_neg)]
            return _intra_anchor_term(pos_sims, neg_sims, 0.1, 0.1)

        worst = max(worst, nm.finite_diff_grad_check(
            lambda p, build=build: nm.grad_eval(build, p), point, step))
    report["intra"] = worst

    worst = 0.0
    config = ContrastConfig(k=3, n_a=1)
    for _ in range(trials):
        batch = int(rng.integers(2, 9))
        c = int(rng.integers(3, 7))
        d = int(rng.integers(4, 17))
        labels = [int(rng.integers(0, c)) for _ in range(batch)]
        stats = record_confusion(
            ConfusionStats.empty(c),
            [int(rng.integers(0, c)) for _ in range(40)],
            [int(rng.integers(0, c)) for _ in range(40)])
        model = build_affinity_model(stats, k=3, n_a=1)
        bank = PrototypeBank.create(c, d)
        for i in range(c):
            if rng.random() < 0.9:
                bank.vectors[i] = unit(d)
                bank.initialized[i] = True
        point = {
            "logits": rng.normal(0.0, 2.0, size=(batch, c)),
            "raw": rng.standard_normal((batch, d)) * 2.0,
        }

        def loss_fn(p, labels=labels, model=model, bank=bank):
            leaves = {name: nm.Var(value) for name, value in p.items()}
            emb = nm.normalize(leaves["raw"])
            breakdown, grads = batch_loss(leaves["logits"], emb, labels, model,
                                          bank, config, wrt=leaves)
            return nm.GradEvaluation(value=breakdown.total, gradients=grads)

        worst = max(worst, nm.finite_diff_grad_check(loss_fn, point, step))
    report["batch"] = worst

    return report
