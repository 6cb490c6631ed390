"""Per-class exemplar storage and class prototypes.

An exemplar is one entity token kept together with its context sentence,
where every other token is relabeled O.  Exemplars are chosen by surface
frequency and replayed as extra training sentences in later steps; their
encoded representations feed the entity threshold, the relabeling
thresholds, and the nearest-class-mean prototypes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import O_LABEL, Corpus, Sentence, Token
from .errors import ConfigurationError, ContractError, MissingClassError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Exemplar:
    surface: str
    label: str
    context: Sentence  # all tokens except `position` carry O
    position: int

    def __post_init__(self):
        if self.label == O_LABEL:
            raise ContractError("exemplars must carry an entity class")
        if not 0 <= self.position < len(self.context.tokens):
            raise ContractError("exemplar position outside its context")
        if self.context.tokens[self.position].surface != self.surface:
            raise ContractError("exemplar surface does not match its context")


class ExemplarMemory:
    """Class-keyed exemplar lists, at most `k` per class, in learnt order."""

    def __init__(self, k: int = 5):
        if k < 1:
            raise ConfigurationError("k must be at least 1")
        self.k = k
        self.per_class: dict[str, list[Exemplar]] = {}

    def classes(self) -> list[str]:
        return list(self.per_class)

    def get(self, cls: str) -> list[Exemplar]:
        if cls not in self.per_class:
            raise MissingClassError(f"no exemplars stored for class {cls!r}")
        return self.per_class[cls]

    def merge(self, new: Mapping[str, Sequence[Exemplar]]) -> None:
        for cls, exemplars in new.items():
            self.per_class[cls] = list(exemplars)

    def size(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    def replay_sentences(self) -> list[Sentence]:
        """Exemplar contexts as standalone training sentences with fresh ids."""
        out: list[Sentence] = []
        for cls, exemplars in self.per_class.items():
            for i, ex in enumerate(exemplars):
                out.append(Sentence(f"mem:{cls}:{i}:{ex.context.id}", ex.context.tokens))
        return out

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "classes": [
                {
                    "label": cls,
                    "exemplars": [
                        {
                            "surface": ex.surface,
                            "position": ex.position,
                            "context_id": ex.context.id,
                            "tokens": [[t.surface, t.label] for t in ex.context.tokens],
                        }
                        for ex in exemplars
                    ],
                }
                for cls, exemplars in self.per_class.items()
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExemplarMemory":
        mem = cls(k=data["k"])
        for entry in data["classes"]:
            exemplars = [
                Exemplar(
                    surface=e["surface"],
                    label=entry["label"],
                    context=Sentence(e["context_id"], tuple(Token(s, y) for s, y in e["tokens"])),
                    position=e["position"],
                )
                for e in entry["exemplars"]
            ]
            mem.per_class[entry["label"]] = exemplars
        return mem


def _exemplar_context(sentence: Sentence, position: int, cls: str) -> Sentence:
    tokens = tuple(
        Token(t.surface, cls if p == position else O_LABEL) for p, t in enumerate(sentence.tokens)
    )
    return Sentence(sentence.id, tokens)


def build_exemplars(
    train: Corpus,
    new_classes: Sequence[str],
    k: int,
    rng: np.random.Generator,
) -> dict[str, list[Exemplar]]:
    """Pick up to k exemplars per class: the k most frequent surfaces, each
    with a uniformly chosen containing sentence as context.

    Frequency ties break lexicographically.  Classes with fewer than k
    distinct surfaces fall back to repeated surfaces with other occurrence
    records before truncating (logged).
    """
    if k < 1:
        raise ConfigurationError("k must be at least 1")
    occurrences: dict[str, dict[str, list[tuple[Sentence, int]]]] = {c: {} for c in new_classes}
    for sentence in train.sentences:
        for pos, token in enumerate(sentence.tokens):
            if token.label in occurrences:
                occurrences[token.label].setdefault(token.surface, []).append((sentence, pos))

    out: dict[str, list[Exemplar]] = {}
    for cls in new_classes:
        by_surface = occurrences[cls]
        if not by_surface:
            raise MissingClassError(f"class {cls!r} does not occur in the training corpus")
        ranked = sorted(by_surface.items(), key=lambda kv: (-len(kv[1]), kv[0]))
        chosen: list[Exemplar] = []
        used: set[tuple[str, int]] = set()
        for surface, places in ranked[:k]:
            sent, pos = places[int(rng.integers(len(places)))]
            chosen.append(Exemplar(surface, cls, _exemplar_context(sent, pos, cls), pos))
            used.add((sent.id, pos))
        if len(chosen) < k:
            log.warning(
                "class %s has only %d distinct surfaces; reusing surfaces with other contexts",
                cls,
                len(chosen),
            )
            pool = [
                (surface, sent, pos)
                for surface, places in ranked
                for sent, pos in places
                if (sent.id, pos) not in used
            ]
            while len(chosen) < k and pool:
                surface, sent, pos = pool.pop(int(rng.integers(len(pool))))
                chosen.append(Exemplar(surface, cls, _exemplar_context(sent, pos, cls), pos))
                used.add((sent.id, pos))
            if len(chosen) < k:
                log.warning("class %s: only %d exemplar records available", cls, len(chosen))
        out[cls] = chosen
    return out


def exemplar_reps(memory: ExemplarMemory, model, classes: Iterable[str]) -> dict[str, np.ndarray]:
    """Pre-projection representations of each class's exemplars, encoded in context."""
    from .encoder import encode_batch

    out: dict[str, np.ndarray] = {}
    for cls in classes:
        rows = []
        for ex in memory.get(cls):
            batch = encode_batch(model, [ex.context])
            rows.append(batch.reps[ex.position])
        out[cls] = np.stack(rows)
    return out


def exemplar_projs(memory: ExemplarMemory, model, classes: Iterable[str]) -> dict[str, np.ndarray]:
    """Unit-norm projections of each class's exemplars, encoded in context."""
    from .encoder import encode_batch

    out: dict[str, np.ndarray] = {}
    for cls in classes:
        rows = []
        for ex in memory.get(cls):
            batch = encode_batch(model, [ex.context])
            rows.append(batch.projs[ex.position])
        out[cls] = np.stack(rows)
    return out


def prototypes_from_reps(reps: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {cls: rows.mean(axis=0) for cls, rows in reps.items()}


def prototypes(memory: ExemplarMemory, model, classes: Iterable[str]) -> dict[str, np.ndarray]:
    """Arithmetic mean of each class's exemplar representations under `model`."""
    classes = list(classes)
    for cls in classes:
        if not memory.get(cls):
            raise MissingClassError(f"class {cls!r} has an empty exemplar list")
    return prototypes_from_reps(exemplar_reps(memory, model, classes))
