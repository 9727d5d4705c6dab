"""Trainable biencoder over hashed bag-of-ngram features.

Texts are hashed into a fixed bucket space (stable 64-bit hash), embedded as
the count-weighted mean of bucket rows, projected, and L2-normalized, so dot
products are cosines. Training minimizes the softmax negative log likelihood
of the positive output against in-batch, random, and synthetic negatives,
multitasked with a binary prefilter classifier that later screens corpus
records before mining. All gradients are exact and the whole procedure is
bit-deterministic given the seed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .corpus import (
    CorpusHandle,
    Record,
    SeedExample,
    SpotterConfig,
    TASK_READING_COMPREHENSION,
    normalize_for_match,
    record_feature_text,
    spot_spans,
    tokenize,
)
from .errors import (
    ConfigError,
    CorpusFormatError,
    DegenerateEmbeddingError,
    DimensionMismatchError,
    NumericError,
    UnembeddableRecordError,
)

logger = logging.getLogger(__name__)

_HASH_KEY = b"pairmine.features.v1"

CHECKPOINT_MAGIC = b"PMBI"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class HashedFeatures:
    """Sparse bucket -> count map for one text."""

    entries: dict[int, int]
    num_buckets: int

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Bucket indices (sorted ascending) and matching counts as arrays."""
        buckets = np.array(sorted(self.entries), dtype=np.int64)
        counts = np.array([self.entries[b] for b in buckets], dtype=np.float64)
        return buckets, counts

    def __bool__(self) -> bool:
        return bool(self.entries)


def _hash_token(token: str) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=_HASH_KEY).digest()
    return int.from_bytes(digest, "little")


def featurize(text: str, num_buckets: int = 2**18) -> HashedFeatures:
    """Hashed counts of lowercased word unigrams and bigrams.

    Stable across runs and platforms; empty text yields an empty feature set.
    """
    if num_buckets <= 0 or num_buckets & (num_buckets - 1):
        raise ConfigError(f"num_buckets must be a power of two, got {num_buckets}")
    tokens = tokenize(text)
    mask = num_buckets - 1
    entries: dict[int, int] = {}
    for gram in tokens:
        b = _hash_token(gram) & mask
        entries[b] = entries.get(b, 0) + 1
    for t1, t2 in zip(tokens, tokens[1:]):
        b = _hash_token(f"{t1} {t2}") & mask
        entries[b] = entries.get(b, 0) + 1
    return HashedFeatures(entries=entries, num_buckets=num_buckets)


def featurize_record(record: Record, num_buckets: int) -> HashedFeatures:
    return featurize(record_feature_text(record), num_buckets)


@dataclass
class BiencoderModel:
    """Hashed embedding table plus linear projection; outputs unit vectors."""

    embedding: np.ndarray  # (num_buckets, dim) float64
    projection: np.ndarray  # (dim, dim) float64
    rng_seed: int

    @property
    def num_buckets(self) -> int:
        return self.embedding.shape[0]

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    @classmethod
    def create(cls, num_buckets: int = 2**18, dim: int = 256, rng_seed: int = 0) -> "BiencoderModel":
        rng = np.random.default_rng(rng_seed)
        scale = 1.0 / math.sqrt(dim)
        embedding = rng.normal(0.0, scale, size=(num_buckets, dim))
        # Identity start: shared-token structure reaches the cosine untrained,
        # and training bends the projection away from it as needed.
        projection = np.eye(dim)
        return cls(embedding=embedding, projection=projection, rng_seed=rng_seed)


@dataclass
class PrefilterModel:
    """Logistic screen on top of biencoder vectors."""

    weight: np.ndarray  # (dim,) float64
    bias: float

    @classmethod
    def create(cls, dim: int, rng_seed: int = 0) -> "PrefilterModel":
        rng = np.random.default_rng(rng_seed)
        return cls(weight=rng.normal(0.0, 1.0 / math.sqrt(dim), size=dim), bias=0.0)


@dataclass
class TrainInstance:
    x: HashedFeatures
    y_pos: HashedFeatures
    y_negs: list[HashedFeatures]


@dataclass
class TrainConfig:
    """Gradient-descent settings shared by the biencoder and crossencoder."""

    learning_rate: float = 1e-2
    steps: int = 500
    batch_size: int = 32
    n_random_negs: int = 4
    multitask_weight: float = 1.0
    rng_seed: int = 0
    num_buckets: int = 2**18
    dim: int = 256
    synth_negs_per_type: int = 2

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")


@dataclass
class BiencoderGrads:
    """Loss gradients: sparse embedding rows plus dense projection."""

    emb: dict[int, np.ndarray]
    proj: np.ndarray


@dataclass
class _Embedded:
    """Forward-pass intermediates kept for the backward pass."""

    buckets: np.ndarray
    weights: np.ndarray  # counts / sum(counts)
    mean: np.ndarray
    norm: float
    unit: np.ndarray


def _forward(model: BiencoderModel, feats: HashedFeatures) -> _Embedded:
    if not feats:
        raise UnembeddableRecordError("unembeddable record: empty feature set")
    if feats.num_buckets != model.num_buckets:
        raise DimensionMismatchError(
            f"features hashed into {feats.num_buckets} buckets, model has {model.num_buckets}"
        )
    buckets, counts = feats.arrays()
    weights = counts / counts.sum()
    mean = weights @ model.embedding[buckets]
    u = model.projection @ mean
    norm = float(np.linalg.norm(u))
    if norm < 1e-12:
        raise DegenerateEmbeddingError("degenerate embedding: pre-normalization norm below 1e-12")
    return _Embedded(buckets=buckets, weights=weights, mean=mean, norm=norm, unit=u / norm)


def embed(model: BiencoderModel, feats: HashedFeatures) -> np.ndarray:
    """Unit-norm vector for one feature set."""
    return _forward(model, feats).unit


def _backward(model: BiencoderModel, emb: _Embedded, g_unit: np.ndarray, grads: BiencoderGrads) -> None:
    # Through v = u / ||u||: g_u = (g_v - v (v . g_v)) / ||u||.
    g_u = (g_unit - emb.unit * float(emb.unit @ g_unit)) / emb.norm
    grads.proj += np.outer(g_u, emb.mean)
    g_mean = model.projection.T @ g_u
    for b, w in zip(emb.buckets, emb.weights):
        key = int(b)
        row = grads.emb.get(key)
        if row is None:
            grads.emb[key] = w * g_mean
        else:
            row += w * g_mean


def _softmax_nll(scores: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss = -log softmax(scores)[0]; returns (loss, dloss/dscores)."""
    shifted = scores - scores.max()
    exps = np.exp(shifted)
    z = exps.sum()
    loss = float(np.log(z) - shifted[0])
    p = exps / z
    dscores = p.copy()
    dscores[0] -= 1.0
    return loss, dscores


def nll_loss_and_grad(model: BiencoderModel, inst: TrainInstance) -> tuple[float, BiencoderGrads]:
    """Softmax NLL of the positive output and its exact analytic gradient.

    Scores are cosines (dots of unit vectors); gradients flow through the
    normalization into both the projection and the touched embedding rows.
    """
    ex = _forward(model, inst.x)
    ey = [_forward(model, inst.y_pos)] + [_forward(model, n) for n in inst.y_negs]
    scores = np.array([float(ex.unit @ e.unit) for e in ey])
    loss, dscores = _softmax_nll(scores)

    grads = BiencoderGrads(emb={}, proj=np.zeros_like(model.projection))
    g_x = np.zeros(model.dim)
    for ds, e in zip(dscores, ey):
        g_x += ds * e.unit
        _backward(model, e, ds * ex.unit, grads)
    _backward(model, ex, g_x, grads)

    if not math.isfinite(loss):
        raise NumericError("non-finite loss in nll_loss_and_grad")
    if not np.isfinite(grads.proj).all():
        raise NumericError("non-finite gradient in parameter block 'projection'")
    for key, row in grads.emb.items():
        if not np.isfinite(row).all():
            raise NumericError(f"non-finite gradient in parameter block 'embedding_table' (bucket {key})")
    return loss, grads


def prefilter(model: PrefilterModel, feats: HashedFeatures, bimodel: BiencoderModel) -> float:
    """Probability that a record resembles the seed set."""
    v = embed(bimodel, feats)
    return float(1.0 / (1.0 + math.exp(-(model.weight @ v + model.bias))))


def prefilter_threshold(scores: np.ndarray, retention: float) -> float:
    """Score cutoff that keeps approximately the top ``retention`` fraction."""
    if not 0.0 < retention <= 1.0:
        raise ConfigError(f"retention must be in (0, 1], got {retention}")
    if retention == 1.0:
        return -np.inf
    return float(np.quantile(np.asarray(scores, dtype=np.float64), 1.0 - retention))


def synthesize_negatives(
    example: SeedExample,
    spotter: SpotterConfig | None,
    corpus: CorpusHandle,
    n_per_type: int = 2,
    rng: np.random.Generator | None = None,
) -> list[Record]:
    """Synthetic reading-comprehension negatives.

    Type (a): the gold passage paired with a different spotted span.
    Type (b): the gold answer string paired with a uniformly sampled
    different passage. Returns an empty list (with a warning) when neither
    type is constructible.
    """
    if example.task != TASK_READING_COMPREHENSION:
        raise ConfigError("synthetic negatives are defined for reading comprehension only")
    rng = rng or np.random.default_rng(0)
    passage = example.y.text
    gold_span = example.y.answer_span()
    gold_answer = example.y.answer_text() or ""

    negatives: list[Record] = []
    alt_spans = [s for s in spot_spans(passage, spotter) if (s[0], s[1]) != gold_span]
    if alt_spans and n_per_type > 0:
        take = min(n_per_type, len(alt_spans))
        for idx in rng.choice(len(alt_spans), size=take, replace=False):
            begin, end, span_type = alt_spans[int(idx)]
            negatives.append(
                Record(
                    id=-1,
                    text=passage,
                    side=example.y.side,
                    meta={"answer_span": f"{begin}:{end}", "answer_type": span_type, "synthetic": "a"},
                )
            )

    gold_norm = normalize_for_match(passage)
    others = [rec for rec in corpus if normalize_for_match(rec.text) != gold_norm]
    if others and n_per_type > 0 and gold_answer:
        take = min(n_per_type, len(others))
        for idx in rng.choice(len(others), size=take, replace=False):
            other = others[int(idx)]
            negatives.append(
                Record(
                    id=-1,
                    text=other.text,
                    side=example.y.side,
                    meta={"answer_text": gold_answer, "synthetic": "b"},
                )
            )

    if not negatives:
        logger.warning("no synthetic negatives constructible for seed example x=%d", example.x.id)
    return negatives


@dataclass
class TrainOutput:
    biencoder: BiencoderModel
    prefilter: PrefilterModel
    loss_trace: list[float] = field(default_factory=list)


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def train(
    seed: list[SeedExample],
    output_corpus: CorpusHandle,
    cfg: TrainConfig,
    prefilter_corpus: CorpusHandle | None = None,
    spotter: SpotterConfig | None = None,
) -> TrainOutput:
    """Minibatch gradient descent on L_nll + multitask_weight * L_prefilter.

    Negatives per instance are the other in-batch positives, ``n_random_negs``
    uniform samples from the output corpus, and (for reading comprehension)
    synthetic span/passage negatives. Prefilter positives are the seed records
    of the side being screened (inputs for reading comprehension, outputs for
    summarization); its negatives are uniform samples from
    ``prefilter_corpus`` (defaults to the output corpus).

    Deterministic given ``cfg.rng_seed``: model init, batch order, and all
    sampling derive from it.
    """
    if not seed:
        raise ConfigError("seed set is empty")
    if len(output_corpus) == 0:
        raise ConfigError("output corpus is empty")
    task = seed[0].task
    if any(ex.task != task for ex in seed):
        raise CorpusFormatError("seed examples mix tasks")
    prefilter_corpus = prefilter_corpus or output_corpus

    ss = np.random.SeedSequence(cfg.rng_seed)
    s_model, s_pre, s_synth, s_train = ss.spawn(4)
    model = BiencoderModel.create(cfg.num_buckets, cfg.dim, rng_seed=s_model.generate_state(1)[0])
    pre_model = PrefilterModel.create(cfg.dim, rng_seed=s_pre.generate_state(1)[0])
    rng = np.random.default_rng(s_train)

    nb = cfg.num_buckets
    seed_x = [featurize_record(ex.x, nb) for ex in seed]
    seed_y = [featurize_record(ex.y, nb) for ex in seed]

    synth_feats: list[list[HashedFeatures]] = [[] for _ in seed]
    if task == TASK_READING_COMPREHENSION and cfg.synth_negs_per_type > 0:
        synth_rng = np.random.default_rng(s_synth)
        for i, ex in enumerate(seed):
            negs = synthesize_negatives(ex, spotter, output_corpus, cfg.synth_negs_per_type, synth_rng)
            synth_feats[i] = [featurize_record(r, nb) for r in negs]

    # Prefilter screens inputs for RC, outputs for summarization.
    pre_positives = seed_x if task == TASK_READING_COMPREHENSION else seed_y

    corpus_records = list(output_corpus)
    pre_records = list(prefilter_corpus)
    feat_cache: dict[tuple[str, int], HashedFeatures] = {}

    def corpus_feats(pool: str, rec: Record) -> HashedFeatures:
        key = (pool, rec.id)
        cached = feat_cache.get(key)
        if cached is None:
            cached = featurize_record(rec, nb)
            feat_cache[key] = cached
        return cached

    lam = cfg.multitask_weight
    lr = cfg.learning_rate
    trace: list[float] = []
    m = len(seed)
    batch_size = min(cfg.batch_size, m)

    for step in range(cfg.steps):
        batch = rng.choice(m, size=batch_size, replace=False)
        grads = BiencoderGrads(emb={}, proj=np.zeros_like(model.projection))
        g_w = np.zeros(cfg.dim)
        g_b = 0.0

        fwd_cache: dict[int, _Embedded] = {}

        def forward_cached(feats: HashedFeatures) -> _Embedded:
            key = id(feats)
            got = fwd_cache.get(key)
            if got is None:
                got = _forward(model, feats)
                fwd_cache[key] = got
            return got

        # Pending unit-vector cotangents, accumulated per unique record so the
        # backward pass through the normalization runs once each.
        pending: dict[int, list] = {}

        def add_cotangent(feats: HashedFeatures, g: np.ndarray) -> None:
            key = id(feats)
            got = pending.get(key)
            if got is None:
                pending[key] = [forward_cached(feats), g.copy()]
            else:
                got[1] += g

        nll_total = 0.0
        inv_batch = 1.0 / batch_size
        batch_ys = [seed_y[i] for i in batch]
        for pos, i in enumerate(batch):
            negs: list[HashedFeatures] = [f for j, f in enumerate(batch_ys) if j != pos]
            if cfg.n_random_negs > 0:
                for idx in rng.integers(0, len(corpus_records), size=cfg.n_random_negs):
                    negs.append(corpus_feats("out", corpus_records[int(idx)]))
            negs.extend(synth_feats[i])
            negs = [f for f in negs if f]
            if not negs:
                raise ConfigError("no negatives available for training instance")

            ex = forward_cached(seed_x[i])
            eys = [forward_cached(seed_y[i])] + [forward_cached(f) for f in negs]
            scores = np.array([float(ex.unit @ e.unit) for e in eys])
            loss, dscores = _softmax_nll(scores)
            nll_total += loss

            g_x = np.zeros(cfg.dim)
            feats_list = [seed_y[i]] + negs
            for ds, e, f in zip(dscores, eys, feats_list):
                ds *= inv_batch
                g_x += ds * e.unit
                add_cotangent(f, ds * ex.unit)
            add_cotangent(seed_x[i], g_x)

        # Multitask prefilter BCE: batch positives vs uniform corpus samples.
        pre_loss = 0.0
        if lam > 0.0:
            pre_batch: list[tuple[HashedFeatures, float]] = []
            for i in batch:
                pre_batch.append((pre_positives[i], 1.0))
            for idx in rng.integers(0, len(pre_records), size=4 * batch_size):
                pre_batch.append((corpus_feats("pre", pre_records[int(idx)]), 0.0))
            inv_n = 1.0 / len(pre_batch)
            for feats, label in pre_batch:
                if not feats:
                    continue
                e = forward_cached(feats)
                z = float(pre_model.weight @ e.unit + pre_model.bias)
                p = _sigmoid(z)
                eps = 1e-12
                pre_loss -= (label * math.log(p + eps) + (1.0 - label) * math.log(1.0 - p + eps)) * inv_n
                dz = (p - label) * inv_n * lam
                g_w += dz * e.unit
                g_b += dz
                add_cotangent(feats, dz * pre_model.weight)

        total = nll_total * inv_batch + lam * pre_loss
        if not math.isfinite(total):
            raise NumericError(f"training diverged: non-finite loss at step {step}")
        trace.append(total)

        for emb_state, g in pending.values():
            _backward(model, emb_state, g, grads)

        model.projection -= lr * grads.proj
        if grads.emb:
            rows = np.fromiter(grads.emb.keys(), dtype=np.int64)
            updates = np.stack([grads.emb[int(r)] for r in rows])
            model.embedding[rows] -= lr * updates
        pre_model.weight -= lr * g_w
        pre_model.bias -= lr * g_b

    return TrainOutput(biencoder=model, prefilter=pre_model, loss_trace=trace)


# --- checkpoint io ----------------------------------------------------------


def save_checkpoint(
    model: BiencoderModel,
    pre_model: PrefilterModel,
    path: str,
    meta: dict | None = None,
) -> None:
    """Versioned binary checkpoint (magic PMBI, little-endian f32 blocks) plus
    a JSON metadata sidecar at ``<path>.meta.json``."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<III", CHECKPOINT_VERSION, model.num_buckets, model.dim))
        fh.write(model.embedding.astype("<f4").tobytes(order="C"))
        fh.write(model.projection.astype("<f4").tobytes(order="C"))
        fh.write(pre_model.weight.astype("<f4").tobytes(order="C"))
        fh.write(struct.pack("<f", pre_model.bias))
    sidecar = dict(meta or {})
    sidecar.setdefault("rng_seed", model.rng_seed)
    with open(path + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str) -> tuple[BiencoderModel, PrefilterModel, dict]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CorpusFormatError(f"{path}: not a biencoder checkpoint (bad magic)")
    version, num_buckets, dim = struct.unpack_from("<III", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CorpusFormatError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    n_emb = num_buckets * dim
    emb = np.frombuffer(blob, dtype="<f4", count=n_emb, offset=off).reshape(num_buckets, dim)
    off += 4 * n_emb
    proj = np.frombuffer(blob, dtype="<f4", count=dim * dim, offset=off).reshape(dim, dim)
    off += 4 * dim * dim
    weight = np.frombuffer(blob, dtype="<f4", count=dim, offset=off)
    off += 4 * dim
    (bias,) = struct.unpack_from("<f", blob, off)
    meta: dict = {}
    try:
        with open(path + ".meta.json", "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except OSError:
        pass
    model = BiencoderModel(
        embedding=emb.astype(np.float64),
        projection=proj.astype(np.float64),
        rng_seed=int(meta.get("rng_seed", 0)),
    )
    return model, PrefilterModel(weight=weight.astype(np.float64), bias=float(bias)), meta
