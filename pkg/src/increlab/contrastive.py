"""Contrastive objectives over token projections.

Entity tokens are contrasted against the whole batch.  Unlabeled ("O")
tokens are pulled together only when their pairwise similarity clears an
entity threshold derived from the per-class cohesion of the exemplar
memory; new-class entity tokens serve as their negatives.  The training
loop runs an entity-only warmup phase before adding the O objective, and
recomputes the entity threshold at the start of every joint epoch.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import O_LABEL, Sentence
from .encoder import EncoderParams, EncoderSnapshot, backprop, cosine, cosine_matrix, encode_batch, sgd_step
from .errors import ConfigurationError, ContractError, TrainingError
from .memory import ExemplarMemory, exemplar_projs

log = logging.getLogger(__name__)

TRAIN_MODES = ("entity-aware", "normal-scl", "normal-scl-no-O")


@dataclass(frozen=True)
class AnchorSets:
    """Anchor indices with their positive and contrast sets."""

    anchors: tuple[int, ...]
    positives: dict[int, frozenset[int]]
    contrast: dict[int, frozenset[int]]

    def validate(self, n: int) -> None:
        for i in self.anchors:
            pos, con = self.positives[i], self.contrast[i]
            if i in con:
                raise ContractError(f"anchor {i} contrasts against itself")
            if not pos:
                raise ContractError(f"anchor {i} has no positives")
            if not pos <= con:
                raise ContractError(f"positives of anchor {i} are not in its contrast set")
            if any(j < 0 or j >= n for j in con):
                raise ContractError(f"anchor {i} references out-of-batch indices")


def select_entity_anchors(labels: Sequence[str]) -> AnchorSets:
    """Every entity token anchors against the full batch; positives share its label."""
    by_label: dict[str, list[int]] = defaultdict(list)
    for j, y in enumerate(labels):
        by_label[y].append(j)
    all_idx = frozenset(range(len(labels)))
    anchors: list[int] = []
    positives: dict[int, frozenset[int]] = {}
    contrast: dict[int, frozenset[int]] = {}
    for i, y in enumerate(labels):
        if y == O_LABEL:
            continue
        mates = frozenset(by_label[y]) - {i}
        if not mates:
            continue
        anchors.append(i)
        positives[i] = mates
        contrast[i] = all_idx - {i}
    return AnchorSets(tuple(anchors), positives, contrast)


def select_all_anchors(labels: Sequence[str]) -> AnchorSets:
    """Plain supervised contrastive selection with O treated as a class."""
    by_label: dict[str, list[int]] = defaultdict(list)
    for j, y in enumerate(labels):
        by_label[y].append(j)
    all_idx = frozenset(range(len(labels)))
    anchors: list[int] = []
    positives: dict[int, frozenset[int]] = {}
    contrast: dict[int, frozenset[int]] = {}
    for i, y in enumerate(labels):
        mates = frozenset(by_label[y]) - {i}
        if not mates:
            continue
        anchors.append(i)
        positives[i] = mates
        contrast[i] = all_idx - {i}
    return AnchorSets(tuple(anchors), positives, contrast)


def select_o_anchors(
    labels: Sequence[str],
    projs: np.ndarray,
    entity_threshold: float,
    new_classes: Iterable[str],
) -> AnchorSets:
    """O tokens anchor on other O tokens above the threshold; new-class tokens are negatives."""
    if not np.isfinite(entity_threshold):
        raise ContractError("entity threshold must be finite")
    new = set(new_classes)
    o_idx = [i for i, y in enumerate(labels) if y == O_LABEL]
    new_idx = frozenset(i for i, y in enumerate(labels) if y in new)
    anchors: list[int] = []
    positives: dict[int, frozenset[int]] = {}
    contrast: dict[int, frozenset[int]] = {}
    if len(o_idx) >= 2:
        sims = np.clip(cosine_matrix(projs[o_idx], projs[o_idx]), -1.0, 1.0)
        for a, i in enumerate(o_idx):
            mates = frozenset(o_idx[b] for b in range(len(o_idx)) if b != a and sims[a, b] > entity_threshold)
            if not mates:
                continue
            anchors.append(i)
            positives[i] = mates
            contrast[i] = mates | new_idx
    return AnchorSets(tuple(anchors), positives, contrast)


def supcon_loss(projs: np.ndarray, sets: AnchorSets, temperature: float) -> tuple[float, np.ndarray]:
    """Supervised contrastive loss and its exact gradient on the projections.

    For each anchor, the mean log-probability of its positives under a
    temperature-scaled softmax of cosine similarities over its contrast set.
    Empty anchor sets contribute zero loss and zero gradients.
    """
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    n = len(projs)
    sets.validate(n)
    d = np.zeros_like(projs)
    if not sets.anchors:
        return 0.0, d
    norms = np.linalg.norm(projs, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("cosine is undefined for zero vectors")
    unit = projs / norms[:, None]
    sims = unit @ unit.T

    coeff = np.zeros((n, n))
    loss = 0.0
    for i in sets.anchors:
        a_idx = np.array(sorted(sets.contrast[i]), dtype=np.intp)
        p_idx = np.array(sorted(sets.positives[i]), dtype=np.intp)
        logits = sims[i, a_idx] / temperature
        m = logits.max()
        lse = m + np.log(np.exp(logits - m).sum())
        inv = 1.0 / len(p_idx)
        loss -= inv * (sims[i, p_idx] / temperature - lse).sum()
        coeff[i, a_idx] += np.exp(logits - lse) / temperature
        coeff[i, p_idx] -= inv / temperature

    # d loss / d projs via d cos(u, v) / d u = (v_hat - cos * u_hat) / ||u||
    sym = coeff + coeff.T
    row = (sym * sims).sum(axis=1)
    d = (sym @ unit - row[:, None] * unit) / norms[:, None]
    return float(loss), d


def joint_loss(
    projs: np.ndarray,
    labels: Sequence[str],
    entity_threshold: float,
    temperature: float,
    new_classes: Iterable[str],
) -> tuple[float, np.ndarray, dict[str, float]]:
    """Sum of the entity loss and the thresholded O loss, with summed gradients."""
    ent_sets = select_entity_anchors(labels)
    ent_loss, ent_grad = supcon_loss(projs, ent_sets, temperature)
    o_sets = select_o_anchors(labels, projs, entity_threshold, new_classes)
    o_loss, o_grad = supcon_loss(projs, o_sets, temperature)
    parts = {
        "loss_scl": ent_loss,
        "loss_o": o_loss,
        "entity_anchors": float(len(ent_sets.anchors)),
        "o_anchors": float(len(o_sets.anchors)),
    }
    return ent_loss + o_loss, ent_grad + o_grad, parts


def mean_pairwise_cosine(vectors: np.ndarray) -> float:
    """Mean cosine similarity over all unordered pairs of rows."""
    n = len(vectors)
    if n < 2:
        raise ContractError("need at least two vectors")
    sims = [cosine(vectors[i], vectors[j]) for i in range(n) for j in range(i + 1, n)]
    return float(np.mean(sims))


def class_similarity(memory: ExemplarMemory, model: EncoderParams | EncoderSnapshot, cls: str) -> float:
    """Cohesion of a class: mean pairwise projection similarity of its exemplars."""
    projs = exemplar_projs(memory, model, [cls])[cls]
    if len(projs) < 2:
        from .errors import InsufficientExemplarsError

        raise InsufficientExemplarsError(f"class {cls!r} has fewer than 2 exemplars")
    return mean_pairwise_cosine(projs)


@dataclass(frozen=True)
class EntityThreshold:
    value: float
    class_sims: dict[str, float]
    fraction: float
    epoch: int | None = None


def entity_threshold(
    class_sims: dict[str, float], fraction: float = 0.5, epoch: int | None = None
) -> EntityThreshold:
    """Order statistic of the sorted class similarities (median by default)."""
    if not class_sims:
        raise ConfigurationError("no class similarities to derive a threshold from")
    if not 0 <= fraction <= 1:
        raise ConfigurationError("threshold fraction must be in [0, 1]")
    values = sorted(class_sims.values())
    idx = min(int(np.floor(len(values) * fraction)), len(values) - 1)
    return EntityThreshold(float(values[idx]), dict(class_sims), fraction, epoch)


def entity_threshold_from_memory(
    memory: ExemplarMemory,
    model: EncoderParams | EncoderSnapshot,
    classes: Sequence[str],
    fraction: float = 0.5,
    epoch: int | None = None,
) -> EntityThreshold:
    sims: dict[str, float] = {}
    for cls in classes:
        if len(memory.get(cls)) < 2:
            log.debug("skipping class %s for entity threshold: fewer than 2 exemplars", cls)
            continue
        sims[cls] = class_similarity(memory, model, cls)
    return entity_threshold(sims, fraction, epoch)


@dataclass(frozen=True)
class TrainSettings:
    epochs_total: int = 16
    epochs_warmup: int = 10
    batch_size: int = 16
    temperature: float = 0.1
    lr: float = 0.05
    mode: str = "entity-aware"
    threshold_fraction: float = 0.5

    def __post_init__(self):
        if self.epochs_warmup > self.epochs_total:
            raise ConfigurationError("warmup epochs cannot exceed total epochs")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be positive")
        if self.mode not in TRAIN_MODES:
            raise ConfigurationError(f"unknown training mode {self.mode!r}")


def train_contrastive(
    params: EncoderParams,
    sentences: Sequence[Sentence],
    *,
    new_classes: Iterable[str],
    memory: ExemplarMemory,
    settings: TrainSettings,
    seed: int | Sequence[int],
    epoch_hook: Callable[[int, EncoderParams], None] | None = None,
) -> tuple[EncoderParams, list[dict]]:
    """Minibatch SGD over shuffled sentences with the configured objective.

    Entity-aware mode minimizes the entity loss alone for the warmup epochs
    and the joint objective afterwards.  Returns the trained params and one
    log record per epoch.
    """
    if not sentences:
        raise TrainingError("no training sentences")
    new = set(new_classes)
    rng = np.random.default_rng(seed)
    logs: list[dict] = []
    for epoch in range(settings.epochs_total):
        joint = settings.mode == "entity-aware" and epoch >= settings.epochs_warmup
        threshold = None
        if joint:
            threshold = entity_threshold_from_memory(
                memory, params, sorted(memory.classes()), settings.threshold_fraction, epoch
            ).value
        order = rng.permutation(len(sentences))
        loss_scl = loss_o = 0.0
        anchors_scl = anchors_o = 0
        for start in range(0, len(sentences), settings.batch_size):
            batch_sents = [sentences[k] for k in order[start : start + settings.batch_size]]
            batch = encode_batch(params, batch_sents, keep_cache=True)
            if settings.mode == "normal-scl":
                sets = select_all_anchors(batch.labels)
                loss, grad = supcon_loss(batch.projs, sets, settings.temperature)
                loss_scl += loss
                anchors_scl += len(sets.anchors)
            elif joint:
                loss, grad, parts = joint_loss(
                    batch.projs, batch.labels, threshold, settings.temperature, new
                )
                loss_scl += parts["loss_scl"]
                loss_o += parts["loss_o"]
                anchors_scl += int(parts["entity_anchors"])
                anchors_o += int(parts["o_anchors"])
            else:  # entity-only: warmup epochs, or the whole run without the O objective
                sets = select_entity_anchors(batch.labels)
                loss, grad = supcon_loss(batch.projs, sets, settings.temperature)
                loss_scl += loss
                anchors_scl += len(sets.anchors)
            grads = backprop(params, batch, grad)
            sgd_step(params, grads, settings.lr)
        logs.append(
            {
                "epoch": epoch,
                "phase": "joint" if joint else "scl",
                "loss_scl": loss_scl,
                "loss_o": loss_o,
                "entity_threshold": threshold,
                "anchor_counts": {"entity": anchors_scl, "o": anchors_o},
            }
        )
        if epoch_hook is not None:
            epoch_hook(epoch, params)
    return params, logs
