"""Nearest-class-mean classification and sequence-labeling metrics.

Prediction is the cosine argmax over class prototypes computed from the
exemplar memory under the current encoder.  Because prototypes alone cannot
emit O, an O prototype is added by default: the mean representation of a
seeded sample of O tokens from the step's training data.  Metrics cover
token-level micro/macro F1, span-level micro F1 (maximal same-label runs,
exact match), and an errors-only confusion matrix grouped by the task that
introduced each class.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import O_LABEL, Corpus, Sentence
from .encoder import EncoderParams, EncoderSnapshot, cosine_matrix, encode_batch
from .errors import ConfigurationError
from .memory import ExemplarMemory, prototypes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NcmModel:
    classes: tuple[str, ...]  # prediction order; O last when present
    prototypes: np.ndarray  # (len(classes), rep_dim)
    step_index: int


def build_ncm(
    memory: ExemplarMemory,
    model: EncoderParams | EncoderSnapshot,
    classes: Sequence[str],
    *,
    step_index: int,
    o_sentences: Sequence[Sentence] | None = None,
    o_sample_size: int = 500,
    include_o: bool = True,
    rng: np.random.Generator | None = None,
) -> NcmModel:
    """Prototype per learnt class, plus an O prototype sampled from training data."""
    if not classes:
        raise ConfigurationError("cannot build a classifier without classes")
    protos = prototypes(memory, model, classes)
    names = list(classes)
    rows = [protos[c] for c in names]
    if include_o:
        if o_sentences is None:
            raise ConfigurationError("O prototype requested but no sentences to sample from")
        refs = [
            (s, p) for s in o_sentences for p, t in enumerate(s.tokens) if t.label == O_LABEL
        ]
        if refs:
            if rng is None:
                rng = np.random.default_rng(0)
            take = min(o_sample_size, len(refs))
            chosen = rng.choice(len(refs), size=take, replace=False)
            by_sentence: dict[str, np.ndarray] = {}
            picked = []
            for i in chosen:
                sentence, pos = refs[int(i)]
                if sentence.id not in by_sentence:
                    by_sentence[sentence.id] = encode_batch(model, [sentence]).reps
                picked.append(by_sentence[sentence.id][pos])
            names.append(O_LABEL)
            rows.append(np.mean(picked, axis=0))
        else:
            log.warning("no O tokens available; classifier will never predict O")
    return NcmModel(tuple(names), np.stack(rows), step_index)


def classify(model: NcmModel, rep: np.ndarray) -> str:
    """Cosine argmax over prototypes; ties break toward the earliest class."""
    if np.linalg.norm(rep) == 0.0:
        raise ValueError("cannot classify the zero vector")
    sims = cosine_matrix(rep[None, :], model.prototypes)[0]
    return model.classes[int(np.argmax(sims))]


def classify_batch(model: NcmModel, reps: np.ndarray) -> list[str]:
    if len(reps) == 0:
        return []
    sims = cosine_matrix(reps, model.prototypes)
    return [model.classes[i] for i in np.argmax(sims, axis=1)]


# ---------------------------------------------------------------------------
# Metrics over aligned gold/predicted label sequences.


def token_prf(
    gold: Sequence[str], pred: Sequence[str], positive: Iterable[str]
) -> dict[str, float]:
    """Micro precision/recall/F1 counting only classes in `positive`."""
    pos = set(positive)
    tp = fp = fn = 0
    for g, p in zip(gold, pred, strict=True):
        if p in pos and p == g:
            tp += 1
        if p in pos and p != g:
            fp += 1
        if g in pos and p != g:
            fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1, "tp": tp, "fp": fp, "fn": fn}


def per_class_f1(gold: Sequence[str], pred: Sequence[str], classes: Iterable[str]) -> dict[str, float]:
    return {c: token_prf(gold, pred, [c])["f1"] for c in classes}


def extract_spans(labels: Sequence[str]) -> list[tuple[int, int, str]]:
    """Maximal runs of one non-O label as (start, end_exclusive, label)."""
    spans: list[tuple[int, int, str]] = []
    start = None
    current = None
    for i, label in enumerate(labels):
        if label == current and label != O_LABEL:
            continue
        if current is not None and current != O_LABEL:
            spans.append((start, i, current))
        start, current = i, label
    if current is not None and current != O_LABEL:
        spans.append((start, len(labels), current))
    return spans


def span_prf(
    gold_sentences: Sequence[Sequence[str]], pred_sentences: Sequence[Sequence[str]]
) -> dict[str, float]:
    """Exact-match micro precision/recall/F1 over spans."""
    tp = fp = fn = 0
    for gold, pred in zip(gold_sentences, pred_sentences, strict=True):
        g = set(extract_spans(gold))
        p = set(extract_spans(pred))
        tp += len(g & p)
        fp += len(p - g)
        fn += len(g - p)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1, "tp": tp, "fp": fp, "fn": fn}


def error_confusion(
    gold: Sequence[str],
    pred: Sequence[str],
    group_of: Callable[[str], str],
    groups: Sequence[str],
) -> np.ndarray:
    """Errors-only confusion counts: cell (g, p) counts tokens of group g
    wrongly predicted as a class of group p."""
    index = {g: i for i, g in enumerate(groups)}
    matrix = np.zeros((len(groups), len(groups)), dtype=np.int64)
    for g, p in zip(gold, pred, strict=True):
        if g != p:
            matrix[index[group_of(g)], index[group_of(p)]] += 1
    return matrix


@dataclass
class MetricsReport:
    step: int
    token_micro_f1: float
    token_macro_f1: float
    span_micro_f1: float
    per_class_f1: dict[str, float]
    token_accuracy: float
    total_tokens: int
    correct_tokens: int
    old_token_micro_f1: float | None
    new_token_micro_f1: float | None
    confusion: list[list[int]]
    group_labels: list[str]
    o_as_entity_errors: int

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "token_micro_f1": self.token_micro_f1,
            "token_macro_f1": self.token_macro_f1,
            "span_micro_f1": self.span_micro_f1,
            "per_class_f1": dict(sorted(self.per_class_f1.items())),
            "token_accuracy": self.token_accuracy,
            "total_tokens": self.total_tokens,
            "correct_tokens": self.correct_tokens,
            "old_token_micro_f1": self.old_token_micro_f1,
            "new_token_micro_f1": self.new_token_micro_f1,
            "confusion": self.confusion,
            "group_labels": self.group_labels,
            "o_as_entity_errors": self.o_as_entity_errors,
        }

    def confusion_csv(self) -> str:
        lines = ["gold\\pred," + ",".join(self.group_labels)]
        for label, row in zip(self.group_labels, self.confusion):
            lines.append(label + "," + ",".join(str(c) for c in row))
        return "\n".join(lines) + "\n"


def metrics_from_predictions(
    gold_sentences: Sequence[Sequence[str]],
    pred_sentences: Sequence[Sequence[str]],
    *,
    entity_classes: Sequence[str],
    class_to_task: Mapping[str, int],
    step: int,
    old_classes: Iterable[str] = (),
    new_classes: Iterable[str] = (),
) -> MetricsReport:
    gold = [y for sent in gold_sentences for y in sent]
    pred = [y for sent in pred_sentences for y in sent]
    micro = token_prf(gold, pred, entity_classes)
    per_class = per_class_f1(gold, pred, entity_classes)
    macro = float(np.mean(list(per_class.values()))) if per_class else 0.0
    spans = span_prf(gold_sentences, pred_sentences)
    correct = sum(1 for g, p in zip(gold, pred) if g == p)
    old = sorted(set(old_classes))
    new = sorted(set(new_classes))

    tasks = sorted({class_to_task[c] for c in entity_classes})
    groups = [O_LABEL] + [f"task{t}" for t in tasks]

    def group_of(label: str) -> str:
        return O_LABEL if label == O_LABEL else f"task{class_to_task[label]}"

    confusion = error_confusion(gold, pred, group_of, groups)
    o_row = confusion[0] if len(groups) else np.zeros(0, dtype=np.int64)
    return MetricsReport(
        step=step,
        token_micro_f1=micro["f1"],
        token_macro_f1=macro,
        span_micro_f1=spans["f1"],
        per_class_f1=per_class,
        token_accuracy=correct / len(gold) if gold else 0.0,
        total_tokens=len(gold),
        correct_tokens=correct,
        old_token_micro_f1=token_prf(gold, pred, old)["f1"] if old else None,
        new_token_micro_f1=token_prf(gold, pred, new)["f1"] if new else None,
        confusion=confusion.tolist(),
        group_labels=groups,
        o_as_entity_errors=int(o_row[1:].sum()) if len(groups) > 1 else 0,
    )


def evaluate(
    ncm: NcmModel,
    model: EncoderParams | EncoderSnapshot,
    test: Corpus,
    *,
    class_to_task: Mapping[str, int],
    step: int,
    old_classes: Iterable[str] = (),
    new_classes: Iterable[str] = (),
) -> MetricsReport:
    """Classify every test token and score against the gold labels."""
    gold_sentences: list[list[str]] = []
    pred_sentences: list[list[str]] = []
    for sentence in test.sentences:
        batch = encode_batch(model, [sentence])
        gold_sentences.append(sentence.labels())
        pred_sentences.append(classify_batch(ncm, batch.reps))
    entity_classes = [c for c in ncm.classes if c != O_LABEL]
    return metrics_from_predictions(
        gold_sentences,
        pred_sentences,
        entity_classes=entity_classes,
        class_to_task=class_to_task,
        step=step,
        old_classes=old_classes,
        new_classes=new_classes,
    )
