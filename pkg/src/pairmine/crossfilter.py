"""Precision-oriented re-ranker over mined candidates.

Each (input, output) pair is turned into an explicit interaction-feature
vector (cosine, n-gram overlap precision/recall, lengths, novelty, span
type) and scored by a small 2-layer tanh MLP. Binary mode fits a logistic
classifier (seed pairs vs mined negatives); pairwise mode maximizes the
score of the gold output over retrieved hard negatives and reranks by the
raw, unnormalized score. An external-scorer JSONL exchange lets a heavier
model substitute for the MLP.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .corpus import (
    CorpusHandle,
    Record,
    SeedExample,
    classify_span_text,
    normalize_for_match,
    record_feature_text,
    tokenize,
)
from .encoder import BiencoderModel, TrainConfig, embed, featurize
from .errors import (
    ConfigError,
    CorpusFormatError,
    DimensionMismatchError,
    NumericError,
    UnresolvableRecordError,
)
from .miner import PairCandidate, with_cross_score

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PMCX"
CHECKPOINT_VERSION = 1

MODE_BINARY = "binary"
MODE_PAIRWISE = "pairwise"

FEATURE_NAMES = (
    "cosine",
    "unigram_precision",
    "unigram_recall",
    "bigram_precision",
    "bigram_recall",
    "log_len_x",
    "log_len_y",
    "len_ratio",
    "novel_fraction",
    "span_type",
)
NUM_FEATURES = len(FEATURE_NAMES)

_SPAN_TYPE_CODE = {"entity": 1.0, "number": 2.0, "date": 3.0}


def _clipped_overlap(cand: list, ref: list) -> int:
    cc, rc = Counter(cand), Counter(ref)
    return sum(min(n, rc[g]) for g, n in cc.items())


def interaction_features(x: Record, y: Record, x_vec: np.ndarray, y_vec: np.ndarray) -> np.ndarray:
    """Deterministic interaction-feature vector for one candidate pair."""
    tx = tokenize(record_feature_text(x))
    ty = tokenize(record_feature_text(y))
    bx = list(zip(tx, tx[1:]))
    by = list(zip(ty, ty[1:]))

    uni = _clipped_overlap(ty, tx)
    bi = _clipped_overlap(by, bx)
    uni_prec = uni / len(ty) if ty else 0.0
    uni_rec = uni / len(tx) if tx else 0.0
    bi_prec = bi / len(by) if by else 0.0
    bi_rec = bi / len(bx) if bx else 0.0
    span_type = _SPAN_TYPE_CODE.get(y.meta.get("answer_type", ""), 0.0)
    if span_type == 0.0 and y.answer_text() is not None:
        span_type = _SPAN_TYPE_CODE.get(classify_span_text(y.answer_text() or ""), 0.0)

    return np.array(
        [
            float(x_vec @ y_vec),
            uni_prec,
            uni_rec,
            bi_prec,
            bi_rec,
            math.log1p(len(tx)),
            math.log1p(len(ty)),
            (1.0 + len(ty)) / (1.0 + len(tx)),
            1.0 - uni_prec,
            span_type,
        ],
        dtype=np.float64,
    )


@dataclass
class CrossModel:
    """2-layer tanh MLP producing a raw scalar score."""

    w1: np.ndarray  # (hidden, in) float64
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: float
    mode: str = MODE_BINARY
    rng_seed: int = 0

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def create(
        cls,
        in_dim: int = NUM_FEATURES,
        hidden: int = 16,
        mode: str = MODE_BINARY,
        rng_seed: int = 0,
    ) -> "CrossModel":
        if mode not in (MODE_BINARY, MODE_PAIRWISE):
            raise ConfigError(f"unknown crossencoder mode {mode!r}")
        rng = np.random.default_rng(rng_seed)
        return cls(
            w1=rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(hidden, in_dim)),
            b1=np.zeros(hidden),
            w2=rng.normal(0.0, 1.0 / math.sqrt(hidden), size=hidden),
            b2=0.0,
            mode=mode,
            rng_seed=rng_seed,
        )


def score(model: CrossModel, feats: np.ndarray) -> float:
    """Raw scalar score of a feature vector."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape != (model.in_dim,):
        raise DimensionMismatchError(
            f"feature width {feats.shape} does not match model input width {model.in_dim}"
        )
    h = np.tanh(model.w1 @ feats + model.b1)
    return float(model.w2 @ h + model.b2)


@dataclass
class CrossGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float


def score_with_grads(model: CrossModel, feats: np.ndarray) -> tuple[float, CrossGrads, np.ndarray]:
    """Score plus exact gradients w.r.t. parameters and the input features."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape != (model.in_dim,):
        raise DimensionMismatchError("feature width does not match model input width")
    h = np.tanh(model.w1 @ feats + model.b1)
    s = float(model.w2 @ h + model.b2)
    dz = model.w2 * (1.0 - h * h)
    grads = CrossGrads(w1=np.outer(dz, feats), b1=dz.copy(), w2=h.copy(), b2=1.0)
    return s, grads, model.w1.T @ dz


@dataclass
class RankTriple:
    x: Record
    y_pos: Record
    y_neg: Record

    def __post_init__(self) -> None:
        if self.y_pos is self.y_neg or (
            self.y_pos.id == self.y_neg.id and self.y_pos.text == self.y_neg.text
        ):
            raise CorpusFormatError("rank triple has identical positive and negative")


class FeatureSource:
    """Resolves candidate ids to records/vectors and builds feature vectors."""

    def __init__(
        self,
        x_corpus: CorpusHandle,
        y_corpus: CorpusHandle,
        bimodel: BiencoderModel,
        x_vectors: dict[int, np.ndarray] | None = None,
        y_vectors: dict[int, np.ndarray] | None = None,
    ) -> None:
        self.x_corpus = x_corpus
        self.y_corpus = y_corpus
        self.bimodel = bimodel
        self.x_vectors = x_vectors or {}
        self.y_vectors = y_vectors or {}

    def _vec(self, record: Record, cache: dict[int, np.ndarray]) -> np.ndarray:
        vec = cache.get(record.id)
        if vec is None:
            vec = embed(self.bimodel, featurize(record_feature_text(record), self.bimodel.num_buckets))
            cache[record.id] = vec
        return vec

    def features_for_records(self, x: Record, y: Record) -> np.ndarray:
        x_vec = embed(self.bimodel, featurize(record_feature_text(x), self.bimodel.num_buckets))
        y_vec = embed(self.bimodel, featurize(record_feature_text(y), self.bimodel.num_buckets))
        return interaction_features(x, y, x_vec, y_vec)

    def resolve(self, x_id: int, y_id: int) -> tuple[Record, Record]:
        x = self.x_corpus.get(x_id)
        if x is None:
            raise UnresolvableRecordError(f"unknown input record id {x_id}")
        y = self.y_corpus.get(y_id)
        if y is None:
            raise UnresolvableRecordError(f"unknown output record id {y_id}")
        return x, y

    def features_for_pair(self, x_id: int, y_id: int) -> np.ndarray:
        x, y = self.resolve(x_id, y_id)
        return interaction_features(x, y, self._vec(x, self.x_vectors), self._vec(y, self.y_vectors))


@dataclass
class CrossTrainOutput:
    model: CrossModel
    loss_trace: list[float] = field(default_factory=list)


def _apply_update(model: CrossModel, grads: CrossGrads, lr: float) -> None:
    model.w1 -= lr * grads.w1
    model.b1 -= lr * grads.b1
    model.w2 -= lr * grads.w2
    model.b2 -= lr * grads.b2


def _accumulate(total: CrossGrads, grads: CrossGrads, scale: float) -> None:
    total.w1 += scale * grads.w1
    total.b1 += scale * grads.b1
    total.w2 += scale * grads.w2
    total.b2 += scale * grads.b2


def _zero_grads(model: CrossModel) -> CrossGrads:
    return CrossGrads(
        w1=np.zeros_like(model.w1), b1=np.zeros_like(model.b1), w2=np.zeros_like(model.w2), b2=0.0
    )


def train_binary(
    positives: list[SeedExample],
    negatives: list[PairCandidate],
    feature_source: FeatureSource,
    cfg: TrainConfig,
    hidden: int = 16,
) -> CrossTrainOutput:
    """Logistic-loss training: seed pairs as positives, mined pairs as negatives."""
    if not positives or not negatives:
        raise ConfigError("binary crossencoder training needs positives and negatives")
    feats = [feature_source.features_for_records(ex.x, ex.y) for ex in positives]
    labels = [1.0] * len(positives)
    for cand in negatives:
        feats.append(feature_source.features_for_pair(cand.x_id, cand.y_id))
        labels.append(0.0)
    return _train_logistic(np.stack(feats), np.array(labels), cfg, hidden, MODE_BINARY)


def _train_logistic(
    X: np.ndarray, labels: np.ndarray, cfg: TrainConfig, hidden: int, mode: str
) -> CrossTrainOutput:
    ss = np.random.SeedSequence(cfg.rng_seed)
    s_model, s_batch = ss.spawn(2)
    model = CrossModel.create(X.shape[1], hidden, mode, rng_seed=s_model.generate_state(1)[0])
    rng = np.random.default_rng(s_batch)
    n = X.shape[0]
    batch_size = min(cfg.batch_size, n)
    trace: list[float] = []
    for step in range(cfg.steps):
        batch = rng.choice(n, size=batch_size, replace=False)
        total = _zero_grads(model)
        loss = 0.0
        for i in batch:
            s, grads, _ = score_with_grads(model, X[i])
            p = 1.0 / (1.0 + math.exp(-s)) if s >= 0 else math.exp(s) / (1.0 + math.exp(s))
            eps = 1e-12
            t = labels[i]
            loss -= t * math.log(p + eps) + (1.0 - t) * math.log(1.0 - p + eps)
            _accumulate(total, grads, (p - t) / batch_size)
        loss /= batch_size
        if not math.isfinite(loss):
            raise NumericError(f"crossencoder training diverged at step {step}")
        trace.append(loss)
        _apply_update(model, total, cfg.learning_rate)
    return CrossTrainOutput(model=model, loss_trace=trace)


def pairwise_loss(score_pos: float, score_neg: float) -> float:
    """log(1 + exp(score_neg - score_pos)); ln 2 when the scores tie."""
    return float(np.logaddexp(0.0, score_neg - score_pos))


def build_rank_triples(
    seed: list[SeedExample],
    retrieve,
    negs_per_pos: int = 4,
) -> tuple[list[RankTriple], int]:
    """Construct pairwise training triples from biencoder retrieval.

    ``retrieve(x_record)`` returns candidate output records, best first; the
    top non-gold ones become hard negatives. Seed documents with no usable
    negative are skipped (counted, with a warning).
    """
    triples: list[RankTriple] = []
    skipped = 0
    for ex in seed:
        gold_norm = normalize_for_match(ex.y.text)
        negs = [r for r in retrieve(ex.x) if normalize_for_match(r.text) != gold_norm]
        if not negs:
            skipped += 1
            logger.warning("no retrievable negatives for seed input %d; skipped", ex.x.id)
            continue
        for neg in negs[:negs_per_pos]:
            triples.append(RankTriple(x=ex.x, y_pos=ex.y, y_neg=neg))
    return triples, skipped


def train_pairwise(
    triples: list[RankTriple],
    feature_source: FeatureSource,
    cfg: TrainConfig,
    hidden: int = 16,
) -> CrossTrainOutput:
    """Pairwise logistic training: push score(x, y+) above score(x, y-)."""
    if not triples:
        raise ConfigError("pairwise crossencoder training needs at least one triple")
    pos_feats = np.stack([feature_source.features_for_records(t.x, t.y_pos) for t in triples])
    neg_feats = np.stack([feature_source.features_for_records(t.x, t.y_neg) for t in triples])

    ss = np.random.SeedSequence(cfg.rng_seed)
    s_model, s_batch = ss.spawn(2)
    model = CrossModel.create(pos_feats.shape[1], hidden, MODE_PAIRWISE, rng_seed=s_model.generate_state(1)[0])
    rng = np.random.default_rng(s_batch)
    n = len(triples)
    batch_size = min(cfg.batch_size, n)
    trace: list[float] = []
    for step in range(cfg.steps):
        batch = rng.choice(n, size=batch_size, replace=False)
        total = _zero_grads(model)
        loss = 0.0
        for i in batch:
            s_pos, g_pos, _ = score_with_grads(model, pos_feats[i])
            s_neg, g_neg, _ = score_with_grads(model, neg_feats[i])
            delta = s_neg - s_pos
            loss += pairwise_loss(s_pos, s_neg)
            sig = 1.0 / (1.0 + math.exp(-delta)) if delta >= 0 else math.exp(delta) / (1.0 + math.exp(delta))
            _accumulate(total, g_neg, sig / batch_size)
            _accumulate(total, g_pos, -sig / batch_size)
        loss /= batch_size
        if not math.isfinite(loss):
            raise NumericError(f"crossencoder training diverged at step {step}")
        trace.append(loss)
        _apply_update(model, total, cfg.learning_rate)
    return CrossTrainOutput(model=model, loss_trace=trace)


def sample_binary_negatives(
    candidates: list[PairCandidate],
    num_positives: int,
    rng: np.random.Generator,
    per_positive: int = 8,
) -> list[PairCandidate]:
    """Stratified negative sample from the margin-ranked candidate list: half
    from the top decile, half uniform from the remainder."""
    if not candidates:
        return []
    ranked = sorted(candidates, key=lambda c: (-c.margin, c.x_id, c.y_id))
    decile = max(1, len(ranked) // 10)
    top, rest = ranked[:decile], ranked[decile:] or ranked
    n_top = per_positive // 2 * num_positives
    n_rest = (per_positive - per_positive // 2) * num_positives
    picks: list[PairCandidate] = []
    picks.extend(top[int(i)] for i in rng.integers(0, len(top), size=n_top))
    picks.extend(rest[int(i)] for i in rng.integers(0, len(rest), size=n_rest))
    return picks


def rerank(
    model: CrossModel,
    candidates: list[PairCandidate],
    feature_source: FeatureSource,
    top_n: int,
) -> list[PairCandidate]:
    """Score candidates with the crossencoder and re-order.

    Output is a permutation-then-truncation of the input: cross score
    descending, ties by margin descending then ascending (x_id, y_id).
    """
    if top_n < 0:
        raise ConfigError("top_n must be >= 0")
    scored = [
        with_cross_score(c, score(model, feature_source.features_for_pair(c.x_id, c.y_id)))
        for c in candidates
    ]
    return order_by_cross_score(scored, top_n)


def order_by_cross_score(candidates: list[PairCandidate], top_n: int) -> list[PairCandidate]:
    ordered = sorted(candidates, key=lambda c: (-(c.cross_score or 0.0), -c.margin, c.x_id, c.y_id))
    return ordered[:top_n]


# --- external scorer exchange -------------------------------------------------


def pair_key(c: PairCandidate) -> str:
    return f"{c.x_id}:{c.y_id}"


def export_pairs_for_scoring(
    candidates: list[PairCandidate], feature_source: FeatureSource, path: str
) -> None:
    """Write candidates as JSONL (pair key + texts) for an external scorer."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for c in candidates:
            x, y = feature_source.resolve(c.x_id, c.y_id)
            fh.write(
                json.dumps({"pair": pair_key(c), "x_text": x.text, "y_text": y.text}, ensure_ascii=False)
                + "\n"
            )


def import_external_scores(candidates: list[PairCandidate], path: str) -> list[PairCandidate]:
    """Attach externally produced scores (JSONL of pair key + score) as
    cross scores; every candidate must be covered."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read score file {path}: {exc}") from exc
    scores: dict[str, float] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            scores[str(obj["pair"])] = float(obj["score"])
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise CorpusFormatError(f"{path}: bad score line {lineno}: {exc}") from exc
    out = []
    for c in candidates:
        key = pair_key(c)
        if key not in scores:
            raise CorpusFormatError(f"{path}: no score for pair {key}")
        out.append(with_cross_score(c, scores[key]))
    return out


# --- checkpoint io --------------------------------------------------------------


def save_cross_checkpoint(model: CrossModel, path: str, meta: dict | None = None) -> None:
    """Binary checkpoint (magic PMCX): mode byte, layer dims, f32 parameters."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        mode_byte = 0 if model.mode == MODE_BINARY else 1
        fh.write(struct.pack("<IBII", CHECKPOINT_VERSION, mode_byte, model.in_dim, model.hidden))
        fh.write(model.w1.astype("<f4").tobytes(order="C"))
        fh.write(model.b1.astype("<f4").tobytes(order="C"))
        fh.write(model.w2.astype("<f4").tobytes(order="C"))
        fh.write(struct.pack("<f", model.b2))
    if meta is not None:
        with open(path + ".meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_cross_checkpoint(path: str) -> CrossModel:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CorpusFormatError(f"{path}: not a crossencoder checkpoint (bad magic)")
    version, mode_byte, in_dim, hidden = struct.unpack_from("<IBII", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CorpusFormatError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<IBII")
    w1 = np.frombuffer(blob, dtype="<f4", count=hidden * in_dim, offset=off).reshape(hidden, in_dim)
    off += 4 * hidden * in_dim
    b1 = np.frombuffer(blob, dtype="<f4", count=hidden, offset=off)
    off += 4 * hidden
    w2 = np.frombuffer(blob, dtype="<f4", count=hidden, offset=off)
    off += 4 * hidden
    (b2,) = struct.unpack_from("<f", blob, off)
    return CrossModel(
        w1=w1.astype(np.float64),
        b1=b1.astype(np.float64),
        w2=w2.astype(np.float64),
        b2=float(b2),
        mode=MODE_BINARY if mode_byte == 0 else MODE_PAIRWISE,
    )
