"""Distance-based recovery of old-class entities hidden under "O" labels.

Both strategies run once at the start of a step, on the frozen model from
the previous step.  The prototype strategy relabels an O token when its
best similarity to an old-class prototype clears that class's task
threshold; the nearest-neighbor strategy compares against individual
exemplar representations instead.  Thresholds are per old task: a scaling
factor that decays with task age, times the weakest exemplar agreement
within that task's classes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import O_LABEL, Sentence
from .encoder import EncoderParams, EncoderSnapshot, cosine, cosine_matrix, encode_batch
from .errors import ContractError, MissingClassError
from .memory import ExemplarMemory

log = logging.getLogger(__name__)

RELABEL_STRATEGIES = ("proto", "nn", "none")


def beta_schedule(current_step: int, old_task: int) -> float:
    """Default threshold scaling: 0.98 - 0.05 * (current_step - old_task)."""
    if not 0 <= old_task < current_step:
        raise ContractError(f"old task {old_task} is not before current step {current_step}")
    return 0.98 - 0.05 * (current_step - old_task)


@dataclass(frozen=True)
class BetaConfig:
    """Scaling schedule for relabeling thresholds; older tasks get lower scales."""

    fixed: float | None = None
    base: float = 0.98
    slope: float = -0.05
    floor: float = 0.5


def scheduled_beta(config: BetaConfig, current_step: int, old_task: int) -> float:
    if not 0 <= old_task < current_step:
        raise ContractError(f"old task {old_task} is not before current step {current_step}")
    if config.fixed is not None:
        raw = config.fixed
    else:
        raw = config.base + config.slope * (current_step - old_task)
    if raw < config.floor:
        log.warning(
            "beta %.3f for old task %d clamped to floor %.2f at step %d",
            raw,
            old_task,
            config.floor,
            current_step,
        )
        return config.floor
    return raw


@dataclass(frozen=True)
class TaskThreshold:
    beta: float
    value: float


@dataclass(frozen=True)
class RelabelThresholds:
    strategy: str
    per_task: dict[int, TaskThreshold]


@dataclass
class RelabelOutcome:
    strategy: str
    assignments: dict[tuple[str, int], str]  # (sentence id, position) -> class
    counts: dict[str, int]
    skipped: int  # O tokens examined but left as O


def proto_threshold(
    exemplar_reps_of_task: Mapping[str, np.ndarray],
    protos: Mapping[str, np.ndarray],
    beta: float,
) -> float:
    """beta times the lowest exemplar-to-own-prototype similarity in the task."""
    sims: list[float] = []
    for cls, rows in exemplar_reps_of_task.items():
        for row in rows:
            sims.append(cosine(row, protos[cls]))
    if not sims:
        raise MissingClassError("no exemplars available for this task")
    return beta * min(sims)


def nn_threshold(exemplar_reps_of_task: Mapping[str, np.ndarray], beta: float) -> float | None:
    """beta times the lowest within-class exemplar pair similarity in the task.

    Classes with fewer than two exemplars are skipped with a warning; returns
    None when no class of the task has a defined pairwise minimum.
    """
    sims: list[float] = []
    for cls, rows in exemplar_reps_of_task.items():
        if len(rows) < 2:
            log.warning("class %s has fewer than 2 exemplars; skipped for NN threshold", cls)
            continue
        pair = cosine_matrix(rows, rows)
        for i in range(len(rows)):
            for j in range(len(rows)):
                if i != j:
                    sims.append(float(pair[i, j]))
    if not sims:
        return None
    return beta * min(sims)


def _reps_by_task(
    reps: Mapping[str, np.ndarray], class_to_task: Mapping[str, int], tasks: Iterable[int]
) -> dict[int, dict[str, np.ndarray]]:
    grouped: dict[int, dict[str, np.ndarray]] = {t: {} for t in tasks}
    for cls, rows in reps.items():
        task = class_to_task[cls]
        if task in grouped:
            grouped[task][cls] = rows
    return grouped


def build_thresholds(
    strategy: str,
    reps: Mapping[str, np.ndarray],
    protos: Mapping[str, np.ndarray],
    class_to_task: Mapping[str, int],
    current_step: int,
    beta_config: BetaConfig,
) -> RelabelThresholds:
    """One threshold per old task, from that task's classes only."""
    old_tasks = sorted({class_to_task[c] for c in reps})
    grouped = _reps_by_task(reps, class_to_task, old_tasks)
    per_task: dict[int, TaskThreshold] = {}
    for task in old_tasks:
        beta = scheduled_beta(beta_config, current_step, task)
        if strategy == "proto":
            value = proto_threshold(grouped[task], protos, beta)
        elif strategy == "nn":
            maybe = nn_threshold(grouped[task], beta)
            if maybe is None:
                log.warning("old task %d has no usable exemplar pairs; relabeling skipped", task)
                continue
            value = maybe
        else:
            raise ContractError(f"unknown relabel strategy {strategy!r}")
        per_task[task] = TaskThreshold(beta, value)
    return RelabelThresholds(strategy, per_task)


def relabel_proto(
    sentences: Sequence[Sentence],
    model: EncoderParams | EncoderSnapshot,
    protos: Mapping[str, np.ndarray],
    thresholds: RelabelThresholds,
    class_to_task: Mapping[str, int],
) -> RelabelOutcome:
    """Assign each O token its most similar old-class prototype when the
    similarity beats that class's task threshold; entity tokens are never touched."""
    classes = list(protos)
    if not classes:
        return RelabelOutcome("proto", {}, {}, 0)
    proto_matrix = np.stack([protos[c] for c in classes])
    assignments: dict[tuple[str, int], str] = {}
    counts: dict[str, int] = {}
    skipped = 0
    for sentence in sentences:
        o_positions = [p for p, t in enumerate(sentence.tokens) if t.label == O_LABEL]
        if not o_positions:
            continue
        batch = encode_batch(model, [sentence])
        sims = cosine_matrix(batch.reps[o_positions], proto_matrix)
        for row, pos in enumerate(o_positions):
            best = int(np.argmax(sims[row]))
            cls = classes[best]
            threshold = thresholds.per_task.get(class_to_task[cls])
            if threshold is not None and sims[row, best] > threshold.value:
                assignments[(sentence.id, pos)] = cls
                counts[cls] = counts.get(cls, 0) + 1
            else:
                skipped += 1
    return RelabelOutcome("proto", assignments, counts, skipped)


def relabel_nn(
    sentences: Sequence[Sentence],
    model: EncoderParams | EncoderSnapshot,
    reps: Mapping[str, np.ndarray],
    thresholds: RelabelThresholds,
    class_to_task: Mapping[str, int],
) -> RelabelOutcome:
    """Assign each O token the class of its most similar old-class exemplar when
    the similarity beats that class's task threshold."""
    owners: list[str] = []
    rows: list[np.ndarray] = []
    for cls, arr in reps.items():
        for row in arr:
            owners.append(cls)
            rows.append(row)
    if not rows:
        return RelabelOutcome("nn", {}, {}, 0)
    exemplar_matrix = np.stack(rows)
    assignments: dict[tuple[str, int], str] = {}
    counts: dict[str, int] = {}
    skipped = 0
    for sentence in sentences:
        o_positions = [p for p, t in enumerate(sentence.tokens) if t.label == O_LABEL]
        if not o_positions:
            continue
        batch = encode_batch(model, [sentence])
        sims = cosine_matrix(batch.reps[o_positions], exemplar_matrix)
        for row, pos in enumerate(o_positions):
            best = int(np.argmax(sims[row]))
            cls = owners[best]
            threshold = thresholds.per_task.get(class_to_task[cls])
            if threshold is not None and sims[row, best] > threshold.value:
                assignments[(sentence.id, pos)] = cls
                counts[cls] = counts.get(cls, 0) + 1
            else:
                skipped += 1
    return RelabelOutcome("nn", assignments, counts, skipped)


def apply_relabeling(sentences: Sequence[Sentence], outcome: RelabelOutcome) -> list[Sentence]:
    out: list[Sentence] = []
    for sentence in sentences:
        labels = sentence.labels()
        changed = False
        for pos in range(len(labels)):
            cls = outcome.assignments.get((sentence.id, pos))
            if cls is not None:
                if labels[pos] != O_LABEL:
                    raise ContractError(
                        f"relabeling would overwrite entity label at {(sentence.id, pos)}"
                    )
                labels[pos] = cls
                changed = True
        out.append(sentence.with_labels(labels) if changed else sentence)
    return out


def relabel_stats(
    outcome: RelabelOutcome,
    masked: Sequence[Sentence],
    gold: Sequence[Sentence],
    old_classes: Iterable[str],
) -> dict[str, float | int]:
    """Token-level precision/recall/micro-F1 of the relabeling decisions.

    Candidates are tokens whose gold label is an old class but were masked
    to O; a relabel counts as correct only when it matches the gold class.
    Undefined ratios are reported as 0.
    """
    old = set(old_classes)
    gold_by_id = {s.id: s for s in gold}
    tp = fp = 0
    candidates = 0
    for sentence in masked:
        gold_sentence = gold_by_id.get(sentence.id)
        if gold_sentence is None:
            raise ContractError(f"gold corpus is missing sentence {sentence.id!r}")
        for pos, token in enumerate(sentence.tokens):
            gold_label = gold_sentence.tokens[pos].label
            if token.label == O_LABEL and gold_label in old:
                candidates += 1
            assigned = outcome.assignments.get((sentence.id, pos))
            if assigned is not None:
                if assigned == gold_label:
                    tp += 1
                else:
                    fp += 1
    fn = candidates - tp
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / candidates if candidates else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "relabeled": tp + fp,
        "candidates": candidates,
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "precision": precision,
        "recall": recall,
        "micro_f1": f1,
    }


def thresholds_report(thresholds: RelabelThresholds) -> dict:
    return {
        "strategy": thresholds.strategy,
        "per_task": {
            str(task): {"beta": th.beta, "threshold": th.value}
            for task, th in sorted(thresholds.per_task.items())
        },
    }
