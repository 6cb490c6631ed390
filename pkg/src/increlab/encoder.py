"""A small trainable token encoder with a unit-norm projection head.

Surfaces are hashed into a bucketed embedding table; the embeddings of a
token and its context window feed a two-layer tanh MLP producing the token
representation (used for prototypes, relabeling, and classification).  A
second tanh MLP maps that representation to a vector that is L2-normalized
for the contrastive losses.  Forward and backward passes are plain numpy
with exact analytic gradients, including the normalization Jacobian.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Sentence
from .errors import ConfigurationError, ContractError, TrainingError


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 32
    buckets: int = 4096
    window: int = 1
    hidden_dim: int = 64
    rep_dim: int = 64
    proj_hidden_dim: int = 32
    proj_dim: int = 32

    def __post_init__(self):
        if self.rep_dim < 2 or self.proj_dim < 2:
            raise ConfigurationError("rep_dim and proj_dim must be at least 2")
        if min(self.embed_dim, self.buckets, self.hidden_dim, self.proj_hidden_dim) < 1:
            raise ConfigurationError("encoder dimensions must be positive")
        if self.window < 0:
            raise ConfigurationError("window radius must be non-negative")


WEIGHT_NAMES = ("emb", "w1", "b1", "w2", "b2", "p1", "c1", "p2", "c2")


@dataclass
class EncoderParams:
    config: EncoderConfig
    emb: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    p1: np.ndarray
    c1: np.ndarray
    p2: np.ndarray
    c2: np.ndarray

    def named(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in WEIGHT_NAMES}

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, *(getattr(self, n).copy() for n in WEIGHT_NAMES))


def init_encoder(config: EncoderConfig, seed: int | Sequence[int]) -> EncoderParams:
    """Seeded uniform(-0.1, 0.1) initialization of every weight."""
    rng = np.random.default_rng(seed)
    k = 2 * config.window + 1

    def u(*shape: int) -> np.ndarray:
        return rng.uniform(-0.1, 0.1, size=shape)

    return EncoderParams(
        config,
        emb=u(config.buckets, config.embed_dim),
        w1=u(config.hidden_dim, k * config.embed_dim),
        b1=u(config.hidden_dim),
        w2=u(config.rep_dim, config.hidden_dim),
        b2=u(config.rep_dim),
        p1=u(config.proj_hidden_dim, config.rep_dim),
        c1=u(config.proj_hidden_dim),
        p2=u(config.proj_dim, config.proj_hidden_dim),
        c2=u(config.proj_dim),
    )


@dataclass(frozen=True)
class EncoderSnapshot:
    """Immutable copy of encoder parameters taken at a given step."""

    params: EncoderParams
    step_index: int


def make_snapshot(params: EncoderParams, step_index: int) -> EncoderSnapshot:
    frozen = params.copy()
    for arr in frozen.named().values():
        arr.flags.writeable = False
    return EncoderSnapshot(frozen, step_index)


def _params_of(model: EncoderParams | EncoderSnapshot) -> EncoderParams:
    return model.params if isinstance(model, EncoderSnapshot) else model


def surface_bucket(surface: str, buckets: int) -> int:
    return zlib.crc32(surface.encode("utf-8")) % buckets


@dataclass(frozen=True)
class TokenRep:
    rep: np.ndarray  # pre-projection representation
    proj: np.ndarray  # unit-norm projection
    token_ref: tuple[str, int]
    label: str


@dataclass
class EncodedBatch:
    ids: np.ndarray  # (n, 2*window+1) bucket ids, -1 marks padding
    reps: np.ndarray  # (n, rep_dim)
    projs: np.ndarray  # (n, proj_dim), unit rows
    labels: list[str]
    refs: list[tuple[str, int]]
    cache: dict | None = None

    def __len__(self) -> int:
        return len(self.labels)


def _context_ids(config: EncoderConfig, sentence: Sentence) -> np.ndarray:
    ids = np.array([surface_bucket(t.surface, config.buckets) for t in sentence.tokens], dtype=np.int64)
    n = len(ids)
    k = 2 * config.window + 1
    out = np.full((n, k), -1, dtype=np.int64)
    for off in range(-config.window, config.window + 1):
        lo, hi = max(0, -off), min(n, n - off)
        out[lo:hi, off + config.window] = ids[lo + off : hi + off]
    return out


def _forward(params: EncoderParams, ids: np.ndarray, keep_cache: bool):
    n, k = ids.shape
    x = params.emb[np.maximum(ids, 0)].copy()
    x[ids < 0] = 0.0
    x = x.reshape(n, k * params.config.embed_dim)
    a1 = np.tanh(x @ params.w1.T + params.b1)
    reps = a1 @ params.w2.T + params.b2
    ap = np.tanh(reps @ params.p1.T + params.c1)
    pre = ap @ params.p2.T + params.c2
    norms = np.linalg.norm(pre, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise TrainingError("projection collapsed to the zero vector")
    projs = pre / norms
    cache = {"x": x, "a1": a1, "reps": reps, "ap": ap, "norms": norms, "projs": projs} if keep_cache else None
    return reps, projs, cache


def encode_batch(
    model: EncoderParams | EncoderSnapshot,
    sentences: Iterable[Sentence],
    *,
    keep_cache: bool = False,
) -> EncodedBatch:
    """Encode every token of every sentence into one flat batch."""
    params = _params_of(model)
    id_blocks: list[np.ndarray] = []
    labels: list[str] = []
    refs: list[tuple[str, int]] = []
    for s in sentences:
        id_blocks.append(_context_ids(params.config, s))
        labels.extend(s.labels())
        refs.extend((s.id, p) for p in range(len(s.tokens)))
    if not id_blocks:
        k = 2 * params.config.window + 1
        ids = np.empty((0, k), dtype=np.int64)
        empty_r = np.empty((0, params.config.rep_dim))
        empty_p = np.empty((0, params.config.proj_dim))
        return EncodedBatch(ids, empty_r, empty_p, [], [], None)
    ids = np.concatenate(id_blocks, axis=0)
    reps, projs, cache = _forward(params, ids, keep_cache)
    return EncodedBatch(ids, reps, projs, labels, refs, cache)


def encode(model: EncoderParams | EncoderSnapshot, sentence: Sentence) -> list[TokenRep]:
    batch = encode_batch(model, [sentence])
    return [
        TokenRep(rep=batch.reps[i], proj=batch.projs[i], token_ref=batch.refs[i], label=batch.labels[i])
        for i in range(len(batch))
    ]


def backprop(
    params: EncoderParams,
    batch: EncodedBatch,
    d_projs: np.ndarray,
    d_reps: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Exact gradients of sum(d_projs * projs) + sum(d_reps * reps) w.r.t. all weights."""
    if batch.cache is None:
        raise ContractError("batch was encoded without keep_cache=True")
    cache = batch.cache
    n = len(batch)
    if d_projs.shape != (n, params.config.proj_dim):
        raise ContractError(f"d_projs has shape {d_projs.shape}, expected {(n, params.config.proj_dim)}")
    if d_reps is not None and d_reps.shape != (n, params.config.rep_dim):
        raise ContractError(f"d_reps has shape {d_reps.shape}, expected {(n, params.config.rep_dim)}")

    z, norms, ap = cache["projs"], cache["norms"], cache["ap"]
    # Normalization Jacobian: (I - z z^T) / ||pre||
    d_pre = (d_projs - np.sum(d_projs * z, axis=1, keepdims=True) * z) / norms
    dc2 = d_pre.sum(axis=0)
    dp2 = d_pre.T @ ap
    d_ap = d_pre @ params.p2
    d_hp = d_ap * (1.0 - ap**2)
    dc1 = d_hp.sum(axis=0)
    dp1 = d_hp.T @ cache["reps"]
    d_rep_total = d_hp @ params.p1
    if d_reps is not None:
        d_rep_total = d_rep_total + d_reps
    db2 = d_rep_total.sum(axis=0)
    dw2 = d_rep_total.T @ cache["a1"]
    d_a1 = d_rep_total @ params.w2
    d_h1 = d_a1 * (1.0 - cache["a1"] ** 2)
    db1 = d_h1.sum(axis=0)
    dw1 = d_h1.T @ cache["x"]
    k = 2 * params.config.window + 1
    d_x = (d_h1 @ params.w1).reshape(n, k, params.config.embed_dim)
    demb = np.zeros_like(params.emb)
    valid = batch.ids >= 0
    np.add.at(demb, batch.ids[valid], d_x[valid])
    return {
        "emb": demb,
        "w1": dw1,
        "b1": db1,
        "w2": dw2,
        "b2": db2,
        "p1": dp1,
        "c1": dc1,
        "p2": dp2,
        "c2": dc2,
    }


def sgd_step(params: EncoderParams, grads: dict[str, np.ndarray], lr: float) -> EncoderParams:
    """In-place params <- params - lr * grads."""
    if lr <= 0:
        raise ConfigurationError("learning rate must be positive")
    if set(grads) != set(WEIGHT_NAMES):
        raise ContractError(f"gradient keys {sorted(grads)} do not match weights")
    for name in WEIGHT_NAMES:
        g = grads[name]
        arr = getattr(params, name)
        if g.shape != arr.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, expected {arr.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        arr -= lr * g
    return params


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine is undefined for zero vectors")
    return float(np.dot(a, b) / (na * nb))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between the rows of a and b."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("cosine is undefined for zero vectors")
    return (a / na) @ (b / nb).T


# ---------------------------------------------------------------------------
# Serialization: a single .npz holding every weight tensor plus a JSON header,
# bit-exact on round trip.

PARAMS_FORMAT_VERSION = 1


def save_params(params: EncoderParams, path: str | Path, *, step_index: int | None = None) -> None:
    header = {
        "version": PARAMS_FORMAT_VERSION,
        "config": asdict(params.config),
        "step_index": step_index,
    }
    np.savez(Path(path), header=np.array(json.dumps(header)), **params.named())


def load_params(path: str | Path) -> tuple[EncoderParams, int | None]:
    with np.load(Path(path)) as data:
        header = json.loads(str(data["header"]))
        if header["version"] != PARAMS_FORMAT_VERSION:
            raise ConfigurationError(f"unsupported params format version {header['version']}")
        config = EncoderConfig(**header["config"])
        arrays = {name: data[name].copy() for name in WEIGHT_NAMES}
    return EncoderParams(config, **arrays), header["step_index"]


def save_snapshot(snapshot: EncoderSnapshot, path: str | Path) -> None:
    save_params(snapshot.params, path, step_index=snapshot.step_index)


def load_snapshot(path: str | Path) -> EncoderSnapshot:
    params, step_index = load_params(path)
    if step_index is None:
        raise ConfigurationError("file does not contain a snapshot step index")
    return make_snapshot(params, step_index)
