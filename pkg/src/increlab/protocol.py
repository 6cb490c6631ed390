"""The incremental loop: snapshot, relabel, rehearse, train, evaluate.

Each step freezes the previous model, optionally relabels O tokens of the
incoming train split against it, replays stored exemplar sentences, builds
exemplars for the new classes, trains the contrastive objective with
best-epoch selection on the new-class dev split, and evaluates a
nearest-class-mean classifier on the cumulative test split.  All ablation
arms are plain configuration values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .classifier import MetricsReport, NcmModel, build_ncm, classify_batch, evaluate, token_prf
from .contrastive import TRAIN_MODES, TrainSettings, train_contrastive
from .corpus import O_LABEL, Corpus, Sentence, Task, TaskStream
from .encoder import EncoderConfig, EncoderParams, EncoderSnapshot, encode_batch, init_encoder, make_snapshot
from .errors import ConfigurationError, ProtocolError
from .memory import ExemplarMemory, build_exemplars, exemplar_reps, prototypes_from_reps
from .relabel import (
    RELABEL_STRATEGIES,
    BetaConfig,
    apply_relabeling,
    build_thresholds,
    relabel_nn,
    relabel_proto,
    relabel_stats,
    thresholds_report,
)

log = logging.getLogger(__name__)

# The class-cohesion statistic behind the entity threshold averages over
# unordered exemplar pairs; recorded in every run report.
FIDELITY_NOTES = (
    "class similarity is the mean cosine over unordered exemplar pairs",
    "the O prototype is the mean representation of a seeded sample of O training tokens",
)

DEFAULT_FLAT_CONFIG: dict[str, object] = {
    "encoder.embed_dim": 32,
    "encoder.buckets": 4096,
    "encoder.window": 1,
    "encoder.hidden_dim": 64,
    "encoder.rep_dim": 64,
    "encoder.proj_hidden_dim": 32,
    "encoder.proj_dim": 32,
    "train.lr": 0.05,
    "train.batch_size": 16,
    "train.epochs_total": 16,
    "train.epochs_warmup": 10,
    "train.tau": 0.1,
    "train.mode": "entity-aware",
    "train.replay_exemplars": True,
    "train.select_best_epoch": True,
    "relabel.strategy": "proto",
    "relabel.beta_fixed": None,
    "relabel.beta_base": 0.98,
    "relabel.beta_slope": -0.05,
    "relabel.beta_floor": 0.5,
    "threshold.fraction": 0.5,
    "memory.exemplars_per_class": 5,
    "classifier.use_o_prototype": True,
    "classifier.o_sample_size": 500,
    "seeds.data": 101,
    "seeds.init": 202,
    "seeds.order": 303,
}


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = EncoderConfig()
    lr: float = 0.05
    batch_size: int = 16
    epochs_total: int = 16
    epochs_warmup: int = 10
    tau: float = 0.1
    mode: str = "entity-aware"
    replay_exemplars: bool = True
    select_best_epoch: bool = True
    strategy: str = "proto"
    beta_fixed: float | None = None
    beta_base: float = 0.98
    beta_slope: float = -0.05
    beta_floor: float = 0.5
    threshold_fraction: float = 0.5
    exemplars_per_class: int = 5
    use_o_prototype: bool = True
    o_sample_size: int = 500
    seed_data: int = 101
    seed_init: int = 202
    seed_order: int = 303

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ConfigurationError(f"unknown training mode {self.mode!r}")
        if self.strategy not in RELABEL_STRATEGIES:
            raise ConfigurationError(f"unknown relabel strategy {self.strategy!r}")
        if self.epochs_warmup > self.epochs_total:
            raise ConfigurationError("warmup epochs cannot exceed total epochs")
        if self.exemplars_per_class < 1:
            raise ConfigurationError("exemplars_per_class must be at least 1")
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")

    @classmethod
    def from_flat(cls, flat: Mapping[str, object]) -> "RunConfig":
        merged = dict(DEFAULT_FLAT_CONFIG)
        unknown = [k for k in flat if k not in merged]
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        merged.update(flat)

        def num(key: str) -> float:
            return float(merged[key])  # type: ignore[arg-type]

        def integer(key: str) -> int:
            value = merged[key]
            if isinstance(value, bool) or int(value) != value:  # type: ignore[arg-type]
                raise ConfigurationError(f"{key} must be an integer, got {value!r}")
            return int(value)  # type: ignore[arg-type]

        def boolean(key: str) -> bool:
            value = merged[key]
            if not isinstance(value, bool):
                raise ConfigurationError(f"{key} must be true or false, got {value!r}")
            return value

        beta_fixed = merged["relabel.beta_fixed"]
        return cls(
            encoder=EncoderConfig(
                embed_dim=integer("encoder.embed_dim"),
                buckets=integer("encoder.buckets"),
                window=integer("encoder.window"),
                hidden_dim=integer("encoder.hidden_dim"),
                rep_dim=integer("encoder.rep_dim"),
                proj_hidden_dim=integer("encoder.proj_hidden_dim"),
                proj_dim=integer("encoder.proj_dim"),
            ),
            lr=num("train.lr"),
            batch_size=integer("train.batch_size"),
            epochs_total=integer("train.epochs_total"),
            epochs_warmup=integer("train.epochs_warmup"),
            tau=num("train.tau"),
            mode=str(merged["train.mode"]),
            replay_exemplars=boolean("train.replay_exemplars"),
            select_best_epoch=boolean("train.select_best_epoch"),
            strategy=str(merged["relabel.strategy"]),
            beta_fixed=None if beta_fixed is None else float(beta_fixed),  # type: ignore[arg-type]
            beta_base=num("relabel.beta_base"),
            beta_slope=num("relabel.beta_slope"),
            beta_floor=num("relabel.beta_floor"),
            threshold_fraction=num("threshold.fraction"),
            exemplars_per_class=integer("memory.exemplars_per_class"),
            use_o_prototype=boolean("classifier.use_o_prototype"),
            o_sample_size=integer("classifier.o_sample_size"),
            seed_data=integer("seeds.data"),
            seed_init=integer("seeds.init"),
            seed_order=integer("seeds.order"),
        )

    def to_flat(self) -> dict[str, object]:
        return {
            "encoder.embed_dim": self.encoder.embed_dim,
            "encoder.buckets": self.encoder.buckets,
            "encoder.window": self.encoder.window,
            "encoder.hidden_dim": self.encoder.hidden_dim,
            "encoder.rep_dim": self.encoder.rep_dim,
            "encoder.proj_hidden_dim": self.encoder.proj_hidden_dim,
            "encoder.proj_dim": self.encoder.proj_dim,
            "train.lr": self.lr,
            "train.batch_size": self.batch_size,
            "train.epochs_total": self.epochs_total,
            "train.epochs_warmup": self.epochs_warmup,
            "train.tau": self.tau,
            "train.mode": self.mode,
            "train.replay_exemplars": self.replay_exemplars,
            "train.select_best_epoch": self.select_best_epoch,
            "relabel.strategy": self.strategy,
            "relabel.beta_fixed": self.beta_fixed,
            "relabel.beta_base": self.beta_base,
            "relabel.beta_slope": self.beta_slope,
            "relabel.beta_floor": self.beta_floor,
            "threshold.fraction": self.threshold_fraction,
            "memory.exemplars_per_class": self.exemplars_per_class,
            "classifier.use_o_prototype": self.use_o_prototype,
            "classifier.o_sample_size": self.o_sample_size,
            "seeds.data": self.seed_data,
            "seeds.init": self.seed_init,
            "seeds.order": self.seed_order,
        }

    def beta_config(self) -> BetaConfig:
        return BetaConfig(
            fixed=self.beta_fixed, base=self.beta_base, slope=self.beta_slope, floor=self.beta_floor
        )


@dataclass
class RunState:
    step: int  # last completed step, -1 before the first
    params: EncoderParams
    snapshot: EncoderSnapshot | None
    memory: ExemplarMemory
    learnt: list[list[str]]  # new classes per completed step, in order
    history: list[MetricsReport] = field(default_factory=list)

    def learnt_classes(self) -> list[str]:
        return [c for group in self.learnt for c in group]


def initial_state(config: RunConfig) -> RunState:
    params = init_encoder(config.encoder, config.seed_init)
    return RunState(
        step=-1,
        params=params,
        snapshot=None,
        memory=ExemplarMemory(k=config.exemplars_per_class),
        learnt=[],
    )


def new_class_probe(
    ncm: NcmModel,
    model: EncoderParams | EncoderSnapshot,
    dev: Corpus,
    new_classes: Sequence[str],
) -> float | None:
    """Token micro-F1 counting only the new classes, on the new-class dev split."""
    if not dev.sentences:
        return None
    gold: list[str] = []
    pred: list[str] = []
    for sentence in dev.sentences:
        batch = encode_batch(model, [sentence])
        gold.extend(sentence.labels())
        pred.extend(classify_batch(ncm, batch.reps))
    return token_prf(gold, pred, new_classes)["f1"]


def run_step(state: RunState, task: Task, config: RunConfig) -> tuple[RunState, dict]:
    """Execute one incremental step and return the new state plus a report."""
    t = task.spec.index
    if t != state.step + 1:
        raise ProtocolError(f"expected step {state.step + 1}, got task index {t}")
    new_classes = sorted(task.spec.new_classes)
    old_classes = state.learnt_classes()
    snapshot = make_snapshot(state.params, t - 1)

    train_sentences: list[Sentence] = list(task.train.sentences)
    relabel_block: dict | None = None
    if t > 0 and config.strategy != "none" and old_classes:
        class_to_task = {c: i for i, group in enumerate(state.learnt) for c in group}
        reps = exemplar_reps(state.memory, snapshot, old_classes)
        protos = prototypes_from_reps(reps)
        thresholds = build_thresholds(
            config.strategy, reps, protos, class_to_task, t, config.beta_config()
        )
        if config.strategy == "proto":
            outcome = relabel_proto(train_sentences, snapshot, protos, thresholds, class_to_task)
        else:
            outcome = relabel_nn(train_sentences, snapshot, reps, thresholds, class_to_task)
        train_sentences = apply_relabeling(train_sentences, outcome)
        relabel_block = thresholds_report(thresholds)
        relabel_block["counts"] = dict(sorted(outcome.counts.items()))
        relabel_block["skipped"] = outcome.skipped
        if task.train_gold is not None:
            relabel_block["stats"] = relabel_stats(
                outcome, task.train.sentences, task.train_gold.sentences, old_classes
            )

    if config.replay_exemplars:
        train_sentences.extend(state.memory.replay_sentences())

    rng_exemplars = np.random.default_rng([config.seed_order, t, 11])
    state.memory.merge(
        build_exemplars(task.train, new_classes, config.exemplars_per_class, rng_exemplars)
    )
    learnt_order = old_classes + new_classes

    settings = TrainSettings(
        epochs_total=config.epochs_total,
        epochs_warmup=config.epochs_warmup,
        batch_size=config.batch_size,
        temperature=config.tau,
        lr=config.lr,
        mode=config.mode,
        threshold_fraction=config.threshold_fraction,
    )

    best: dict = {"f1": None, "params": None, "epoch": None}

    def ncm_for(params: EncoderParams, tag: int) -> NcmModel:
        return build_ncm(
            state.memory,
            params,
            learnt_order,
            step_index=t,
            o_sentences=train_sentences,
            o_sample_size=config.o_sample_size,
            include_o=config.use_o_prototype,
            rng=np.random.default_rng([config.seed_order, t, 33, tag]),
        )

    def hook(epoch: int, params: EncoderParams) -> None:
        if not config.select_best_epoch or not task.dev.sentences:
            return
        score = new_class_probe(ncm_for(params, epoch), params, task.dev, new_classes)
        if score is not None and (best["f1"] is None or score > best["f1"]):
            best.update(f1=score, params=params.copy(), epoch=epoch)

    params, epoch_logs = train_contrastive(
        state.params,
        train_sentences,
        new_classes=task.spec.new_classes,
        memory=state.memory,
        settings=settings,
        seed=[config.seed_order, t, 22],
        epoch_hook=hook,
    )
    if best["params"] is not None:
        params = best["params"]

    ncm = ncm_for(params, 1_000_003)
    metrics = evaluate(
        ncm,
        params,
        task.test,
        class_to_task={**{c: i for i, group in enumerate(state.learnt) for c in group},
                       **{c: t for c in new_classes}},
        step=t,
        old_classes=old_classes,
        new_classes=new_classes,
    )
    probe = new_class_probe(ncm, params, task.dev, new_classes)

    state.step = t
    state.params = params
    state.snapshot = snapshot
    state.learnt.append(new_classes)
    state.history.append(metrics)

    report = {
        "step": t,
        "classes_new": new_classes,
        "classes_old": old_classes,
        "metrics": metrics.to_dict(),
        "relabel": relabel_block,
        "probe_new_class_f1": probe,
        "selected_epoch": best["epoch"],
        "epoch_logs": epoch_logs,
    }
    return state, report


def run_stream(stream: TaskStream, config: RunConfig) -> dict:
    """Fold run_step over every task; returns the full run report."""
    state = initial_state(config)
    steps = []
    for task in stream.tasks:
        state, report = run_step(state, task, config)
        steps.append(report)
    return {
        "config": config.to_flat(),
        "notes": list(FIDELITY_NOTES),
        "tasks": [
            {"index": task.spec.index, "new_classes": sorted(task.spec.new_classes)}
            for task in stream.tasks
        ],
        "steps": steps,
    }
