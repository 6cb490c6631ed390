"""CoNLL-style corpora, label masking, and incremental task streams.

A corpus is a flat list of sentences with one label per token (IO scheme:
plain class names, no B-/I- prefixes; spans are maximal runs of the same
non-O label).  A task stream slices a corpus into an ordered sequence of
tasks: each task's train/dev splits are annotated only with that task's new
classes, while its test split keeps every class learnt so far.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, EmptyCorpusError, ParseError

O_LABEL = "O"


@dataclass(frozen=True)
class Token:
    surface: str
    label: str

    def __post_init__(self):
        if not self.surface:
            raise ParseError("token surface must be non-empty")


@dataclass(frozen=True)
class Sentence:
    id: str
    tokens: tuple[Token, ...]

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise ParseError(f"sentence {self.id!r} has no tokens")

    def labels(self) -> list[str]:
        return [t.label for t in self.tokens]

    def surfaces(self) -> list[str]:
        return [t.surface for t in self.tokens]

    def with_labels(self, labels: Sequence[str]) -> "Sentence":
        if len(labels) != len(self.tokens):
            raise ParseError(f"label count mismatch for sentence {self.id!r}")
        return Sentence(self.id, tuple(Token(t.surface, y) for t, y in zip(self.tokens, labels)))


@dataclass(frozen=True)
class Corpus:
    sentences: tuple[Sentence, ...]
    label_inventory: frozenset[str]

    @classmethod
    def from_sentences(cls, sentences: Iterable[Sentence]) -> "Corpus":
        sents = tuple(sentences)
        ids = [s.id for s in sents]
        if len(set(ids)) != len(ids):
            raise ParseError("duplicate sentence ids in corpus")
        inventory = frozenset(t.label for s in sents for t in s.tokens if t.label != O_LABEL)
        return cls(sents, inventory)

    def __len__(self) -> int:
        return len(self.sentences)


def parse_conll(text: str, *, allow_empty: bool = False) -> Corpus:
    """Parse "surface<TAB>label" lines; blank lines separate sentences."""
    sentences: list[Sentence] = []
    tokens: list[Token] = []

    def flush():
        if tokens:
            sentences.append(Sentence(f"s{len(sentences)}", tuple(tokens)))
            tokens.clear()

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            flush()
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(f"expected 2 tab-separated fields, got {len(parts)}: {line!r}", line=lineno)
        surface, label = parts
        if not surface:
            raise ParseError("empty token surface", line=lineno)
        if not label:
            raise ParseError("empty label", line=lineno)
        tokens.append(Token(surface, label))
    flush()

    if not sentences and not allow_empty:
        raise EmptyCorpusError("input contains no sentences")
    return Corpus.from_sentences(sentences)


def read_conll(path: str | Path, *, allow_empty: bool = False) -> Corpus:
    return parse_conll(Path(path).read_text(encoding="utf-8"), allow_empty=allow_empty)


def conll_text(sentences: Iterable[Sentence]) -> str:
    blocks = ["\n".join(f"{t.surface}\t{t.label}" for t in s.tokens) for s in sentences]
    return "\n\n".join(blocks) + ("\n" if blocks else "")


def write_conll(sentences: Iterable[Sentence], path: str | Path) -> None:
    Path(path).write_text(conll_text(sentences), encoding="utf-8")


def mask_labels(sentence: Sentence, visible: Iterable[str]) -> Sentence:
    """Relabel every token whose class is not in `visible` as O."""
    vis = set(visible)
    return sentence.with_labels(
        [t.label if (t.label == O_LABEL or t.label in vis) else O_LABEL for t in sentence.tokens]
    )


@dataclass(frozen=True)
class TaskSpec:
    index: int
    new_classes: frozenset[str]
    old_classes: frozenset[str]  # includes O

    @property
    def all_classes(self) -> frozenset[str]:
        return self.new_classes | self.old_classes

    @property
    def learnt_entities(self) -> frozenset[str]:
        return self.all_classes - {O_LABEL}


@dataclass(frozen=True)
class Task:
    spec: TaskSpec
    train: Corpus
    dev: Corpus
    test: Corpus
    # Unmasked copies of the train sentences, kept for relabeling diagnostics.
    train_gold: Corpus | None = None


@dataclass
class TaskStream:
    tasks: tuple[Task, ...]
    class_to_task: dict[str, int]
    class_order: tuple[str, ...]
    seed: int
    dev_fraction: float
    test_fraction: float
    cumulative_dev: bool = False

    def new_classes_in_order(self, index: int) -> list[str]:
        n = len(self.tasks[index].spec.new_classes)
        per = len(self.class_order) // len(self.tasks)
        return list(self.class_order[index * per : index * per + n])


def build_task_stream(
    corpus: Corpus,
    task_count: int,
    classes_per_task: int,
    seed: int = 0,
    *,
    class_order: Sequence[str] | None = None,
    dev_fraction: float = 0.15,
    test_fraction: float = 0.15,
    cumulative_dev: bool = False,
) -> TaskStream:
    """Partition the corpus into `task_count` incremental tasks.

    Classes are permuted by a seeded RNG (or taken from an explicit
    `class_order`) and split into consecutive groups of `classes_per_task`.
    Sentences are first partitioned into train/dev/test pools; a sentence
    enters a task's train/dev split iff it contains at least one token of
    that task's new classes, and a task's test split iff it contains at
    least one token of any class learnt so far.  The same sentence may
    therefore appear in several tasks' splits.
    """
    if task_count < 1 or classes_per_task < 1:
        raise ConfigurationError("task_count and classes_per_task must be positive")
    needed = task_count * classes_per_task
    inventory = sorted(corpus.label_inventory)
    if needed > len(inventory):
        raise ConfigurationError(
            f"need {needed} classes ({task_count} tasks x {classes_per_task}), "
            f"corpus has {len(inventory)}"
        )
    if dev_fraction < 0 or test_fraction < 0 or dev_fraction + test_fraction >= 1:
        raise ConfigurationError("dev/test fractions must be in [0, 1) and sum below 1")

    if class_order is not None:
        order = list(class_order)
        if len(set(order)) != len(order):
            raise ConfigurationError("class_order contains duplicates")
        unknown = [c for c in order if c not in corpus.label_inventory]
        if unknown:
            raise ConfigurationError(f"class_order names unknown classes: {unknown}")
        if len(order) < needed:
            raise ConfigurationError("class_order lists fewer classes than required")
    else:
        rng_cls = np.random.default_rng([seed, 0])
        idx = rng_cls.permutation(len(inventory))
        order = [inventory[i] for i in idx]
    order = order[:needed]

    rng_pool = np.random.default_rng([seed, 1])
    draw = rng_pool.random(len(corpus.sentences))
    test_pool = [s for s, u in zip(corpus.sentences, draw) if u < test_fraction]
    dev_pool = [
        s for s, u in zip(corpus.sentences, draw) if test_fraction <= u < test_fraction + dev_fraction
    ]
    train_pool = [s for s, u in zip(corpus.sentences, draw) if u >= test_fraction + dev_fraction]

    tasks: list[Task] = []
    class_to_task: dict[str, int] = {}
    for t in range(task_count):
        new = order[t * classes_per_task : (t + 1) * classes_per_task]
        old = frozenset(order[: t * classes_per_task]) | {O_LABEL}
        spec = TaskSpec(t, frozenset(new), old)
        for c in new:
            class_to_task[c] = t

        def has_any(sentence: Sentence, classes: frozenset[str]) -> bool:
            return any(tok.label in classes for tok in sentence.tokens)

        train_sents = [s for s in train_pool if has_any(s, spec.new_classes)]
        dev_visible = spec.learnt_entities if cumulative_dev else spec.new_classes
        dev_sents = [s for s in dev_pool if has_any(s, dev_visible)]
        test_sents = [s for s in test_pool if has_any(s, spec.learnt_entities)]

        tasks.append(
            Task(
                spec=spec,
                train=Corpus.from_sentences(mask_labels(s, spec.new_classes) for s in train_sents),
                dev=Corpus.from_sentences(mask_labels(s, dev_visible) for s in dev_sents),
                test=Corpus.from_sentences(mask_labels(s, spec.learnt_entities) for s in test_sents),
                train_gold=Corpus.from_sentences(train_sents),
            )
        )

    return TaskStream(
        tasks=tuple(tasks),
        class_to_task=class_to_task,
        class_order=tuple(order),
        seed=seed,
        dev_fraction=dev_fraction,
        test_fraction=test_fraction,
        cumulative_dev=cumulative_dev,
    )


def validate_task_stream(stream: TaskStream) -> list[str]:
    """Check stream invariants; returns a list of problems (empty = valid)."""
    problems: list[str] = []
    seen: set[str] = set()
    prior: set[str] = set()
    for task in stream.tasks:
        spec = task.spec
        if spec.new_classes & seen:
            problems.append(f"task {spec.index}: new classes overlap earlier tasks")
        expected_old = frozenset(prior) | {O_LABEL}
        if spec.old_classes != expected_old:
            problems.append(f"task {spec.index}: old classes are not the union of earlier tasks")
        train_labels = {t.label for s in task.train.sentences for t in s.tokens} - {O_LABEL}
        if not train_labels <= spec.new_classes:
            problems.append(f"task {spec.index}: train split leaks non-new labels")
        dev_visible = spec.learnt_entities if stream.cumulative_dev else spec.new_classes
        dev_labels = {t.label for s in task.dev.sentences for t in s.tokens} - {O_LABEL}
        if not dev_labels <= dev_visible:
            problems.append(f"task {spec.index}: dev split leaks invisible labels")
        test_labels = {t.label for s in task.test.sentences for t in s.tokens} - {O_LABEL}
        if not test_labels <= spec.learnt_entities:
            problems.append(f"task {spec.index}: test split leaks unlearnt labels")
        missing = spec.learnt_entities - test_labels
        if missing:
            problems.append(
                f"task {spec.index}: test split misses learnt classes {sorted(missing)}"
            )
        seen |= spec.new_classes
        prior |= spec.new_classes
    return problems


def synthesize_corpus(
    class_count: int,
    tokens_per_class: int,
    cluster_separation: float,
    noise: float = 0.0,
    seed: int = 0,
    *,
    o_vocab: int = 40,
) -> Corpus:
    """Generate a synthetic IO-labeled corpus with controllable class overlap.

    Each class owns a segment of a 1-D surface lattice centred at
    ``class_index * cluster_separation``; entity surfaces are drawn from a
    truncated unit Gaussian around the centre (half-unit lattice cells), so
    with ``cluster_separation >= 3.5`` and ``noise == 0`` the class
    vocabularies are disjoint and the classes are separable from surface
    identity alone.  With probability ``noise`` a surface is drawn uniformly
    over the whole lattice instead.  Non-entity tokens use a separate filler
    vocabulary.  Deterministic for a fixed seed.
    """
    if cluster_separation <= 0:
        raise ConfigurationError("cluster_separation must be positive")
    if not 0 <= noise <= 1:
        raise ConfigurationError("noise must be in [0, 1]")
    rng = np.random.default_rng(seed)
    names = [f"type{c:02d}" for c in range(class_count)]
    span_hi = (class_count - 1) * cluster_separation + 2.0

    def entity_surface(center: float) -> str:
        if noise > 0 and rng.random() < noise:
            x = rng.uniform(-2.0, span_hi)
        else:
            off = rng.normal()
            while abs(off) > 1.5:
                off = rng.normal()
            x = center + off
        return f"e{int(np.floor(2.0 * x))}"

    def filler() -> Token:
        return Token(f"w{int(rng.integers(o_vocab))}", O_LABEL)

    mentions: list[tuple[str, list[str]]] = []
    for c, name in enumerate(names):
        center = c * cluster_separation
        left = tokens_per_class
        while left > 0:
            m = int(min(rng.integers(1, 3), left))
            mentions.append((name, [entity_surface(center) for _ in range(m)]))
            left -= m

    order = rng.permutation(len(mentions))
    sentences: list[Sentence] = []
    pos = 0
    while pos < len(order):
        take = int(rng.integers(1, 4))
        chunk = [mentions[i] for i in order[pos : pos + take]]
        pos += take
        tokens: list[Token] = []
        for name, surfaces in chunk:
            tokens.extend(filler() for _ in range(int(rng.integers(1, 4))))
            tokens.extend(Token(s, name) for s in surfaces)
        tokens.extend(filler() for _ in range(int(rng.integers(1, 3))))
        sentences.append(Sentence(f"syn{len(sentences)}", tuple(tokens)))
    return Corpus.from_sentences(sentences)


# ---------------------------------------------------------------------------
# Manifest serialization: one JSON document plus TSV split files per task.

MANIFEST_VERSION = 1


def save_task_stream(stream: TaskStream, out_dir: str | Path) -> Path:
    """Write split TSVs and a manifest.json describing the stream."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for task in stream.tasks:
        idx = task.spec.index
        files = {
            "train": f"task{idx:02d}.train.tsv",
            "train_gold": f"task{idx:02d}.train_gold.tsv",
            "dev": f"task{idx:02d}.dev.tsv",
            "test": f"task{idx:02d}.test.tsv",
        }
        write_conll(task.train.sentences, out / files["train"])
        gold = task.train_gold.sentences if task.train_gold is not None else ()
        write_conll(gold, out / files["train_gold"])
        write_conll(task.dev.sentences, out / files["dev"])
        write_conll(task.test.sentences, out / files["test"])
        entries.append(
            {"index": idx, "new_classes": stream.new_classes_in_order(idx), "files": files}
        )
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": stream.seed,
        "task_count": len(stream.tasks),
        "classes_per_task": len(stream.tasks[0].spec.new_classes) if stream.tasks else 0,
        "class_order": list(stream.class_order),
        "dev_fraction": stream.dev_fraction,
        "test_fraction": stream.test_fraction,
        "cumulative_dev": stream.cumulative_dev,
        "tasks": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_task_stream(manifest_path: str | Path) -> TaskStream:
    path = Path(manifest_path)
    if not path.is_file():
        raise ConfigurationError(f"manifest not found: {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    base = path.parent
    tasks: list[Task] = []
    class_to_task: dict[str, int] = {}
    prior: list[str] = []
    for entry in sorted(manifest["tasks"], key=lambda e: e["index"]):
        idx = entry["index"]
        new = list(entry["new_classes"])
        spec = TaskSpec(idx, frozenset(new), frozenset(prior) | {O_LABEL})
        for c in new:
            class_to_task[c] = idx
        files = entry["files"]

        def load(name: str) -> Corpus:
            return read_conll(base / files[name], allow_empty=True)

        gold_path = base / files.get("train_gold", "")
        tasks.append(
            Task(
                spec=spec,
                train=load("train"),
                dev=load("dev"),
                test=load("test"),
                train_gold=read_conll(gold_path, allow_empty=True) if gold_path.is_file() else None,
            )
        )
        prior.extend(new)
    return TaskStream(
        tasks=tuple(tasks),
        class_to_task=class_to_task,
        class_order=tuple(manifest["class_order"]),
        seed=manifest["seed"],
        dev_fraction=manifest["dev_fraction"],
        test_fraction=manifest["test_fraction"],
        cumulative_dev=manifest.get("cumulative_dev", False),
    )


def task_statistics(stream: TaskStream) -> list[dict[str, object]]:
    """Per-task class lists and split sizes, manifest order."""
    return [
        {
            "task": task.spec.index,
            "classes": stream.new_classes_in_order(task.spec.index),
            "train": len(task.train.sentences),
            "dev": len(task.dev.sentences),
            "test": len(task.test.sentences),
        }
        for task in stream.tasks
    ]
