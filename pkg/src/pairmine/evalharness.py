"""Synthetic corpora with planted gold pairs, plus mining-quality diagnostics.

``generate`` plants gold input/output pairs that share a contiguous token
span, surrounded by distractors that copy a span from some *other* input
(the lexical traps that fool overlap-driven rankers). ROUGE precision of an
output against its paired input measures extractiveness: the lower the
precision, the more abstractive the pair.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .corpus import (
    CorpusHandle,
    Record,
    SIDE_INPUT,
    SIDE_OUTPUT,
    export_jsonl,
    tokenize,
)
from .errors import ConfigError

HISTOGRAM_WIDTH = 0.05


@dataclass
class SyntheticSpec:
    """Shape of a planted-pair synthetic corpus."""

    num_pairs: int
    vocab_size: int
    x_len: int
    y_len: int
    signal_overlap: float
    distractor_count: int = 0
    distractor_overlap: float = 0.0
    distractor_len: int | None = None
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.signal_overlap <= 1.0 and 0.0 <= self.distractor_overlap <= 1.0):
            raise ConfigError("overlap fractions must lie in [0, 1]")
        d_len = self.distractor_len or self.y_len
        if self.vocab_size < self.x_len + max(self.y_len, d_len):
            raise ConfigError("vocab_size too small for the requested record lengths")
        if self.num_pairs < 1:
            raise ConfigError("num_pairs must be >= 1")


@dataclass
class GoldPairs:
    """Injective map from input id to its planted gold output id."""

    pairs: dict[int, int]

    def __post_init__(self) -> None:
        if len(set(self.pairs.values())) != len(self.pairs):
            raise ConfigError("gold pair map is not injective")

    def __len__(self) -> int:
        return len(self.pairs)


def _compose(rng: np.random.Generator, vocab: np.ndarray, source: list[str], n_copy: int, length: int) -> str:
    """Build a record of ``length`` tokens embedding a contiguous ``n_copy``-token
    span copied from ``source``; filler tokens avoid the source's vocabulary."""
    if n_copy > 0:
        start = int(rng.integers(0, len(source) - n_copy + 1))
        copied = source[start : start + n_copy]
    else:
        copied = []
    n_fill = length - len(copied)
    source_set = set(source)
    pool = np.array([t for t in vocab if t not in source_set])
    filler = [str(t) for t in rng.choice(pool, size=n_fill, replace=False)] if n_fill else []
    offset = int(rng.integers(0, len(filler) + 1)) if copied else 0
    tokens = filler[:offset] + list(copied) + filler[offset:]
    return " ".join(tokens)


def generate(spec: SyntheticSpec, seed: int | None = None) -> tuple[CorpusHandle, CorpusHandle, GoldPairs]:
    """Deterministically generate (input corpus, output corpus, gold map).

    Gold output i copies ``floor(signal_overlap * y_len)`` contiguous tokens
    from input i; each distractor copies ``floor(distractor_overlap * len)``
    contiguous tokens from a random input it is *not* paired with.
    """
    rng = np.random.default_rng(spec.rng_seed if seed is None else seed)
    vocab = np.array([f"w{i:05d}" for i in range(spec.vocab_size)])

    x_records: list[Record] = []
    y_records: list[Record] = []
    gold: dict[int, int] = {}
    x_tokens: list[list[str]] = []
    for i in range(spec.num_pairs):
        toks = [str(t) for t in rng.choice(vocab, size=spec.x_len, replace=False)]
        x_tokens.append(toks)
        x_records.append(Record(id=i, text=" ".join(toks), side=SIDE_INPUT, meta={"kind": "source"}))

    n_signal = int(spec.signal_overlap * spec.y_len)
    for i in range(spec.num_pairs):
        text = _compose(rng, vocab, x_tokens[i], n_signal, spec.y_len)
        y_records.append(Record(id=i, text=text, side=SIDE_OUTPUT, meta={"kind": "gold"}))
        gold[i] = i

    d_len = spec.distractor_len or spec.y_len
    n_trap = int(spec.distractor_overlap * d_len)
    for j in range(spec.distractor_count):
        src = int(rng.integers(0, spec.num_pairs))
        text = _compose(rng, vocab, x_tokens[src], n_trap, d_len)
        y_records.append(
            Record(
                id=spec.num_pairs + j,
                text=text,
                side=SIDE_OUTPUT,
                meta={"kind": "distractor", "trap_source": str(src)},
            )
        )

    return (
        CorpusHandle(records=x_records, side=SIDE_INPUT),
        CorpusHandle(records=y_records, side=SIDE_OUTPUT),
        GoldPairs(pairs=gold),
    )


# --- ROUGE precision ---------------------------------------------------------


def _ngrams(tokens: list[str], n: int) -> dict[tuple, int]:
    grams: dict[tuple, int] = {}
    for i in range(len(tokens) - n + 1):
        g = tuple(tokens[i : i + n])
        grams[g] = grams.get(g, 0) + 1
    return grams


def _lcs_len(a: list[str], b: list[str]) -> int:
    """Classic O(len(a)*len(b)) longest-common-subsequence length."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for tok_a in a:
        cur = [0] * (len(b) + 1)
        for j, tok_b in enumerate(b, start=1):
            if tok_a == tok_b:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_precision(candidate: str, source: str, n: int | str) -> Fraction:
    """Clipped n-gram precision of candidate against source, exact rational.

    ``n`` is 1, 2, or "L" (longest common subsequence / candidate length).
    The denominator is always the candidate's n-gram count; a candidate too
    short to form any n-gram scores 0. Empty candidates are an error.
    """
    cand = tokenize(candidate)
    src = tokenize(source)
    if not cand:
        raise ConfigError("rouge_precision: candidate is empty after tokenization")
    if n == "L":
        return Fraction(_lcs_len(cand, src), len(cand))
    if n not in (1, 2):
        raise ConfigError(f"unsupported ROUGE order {n!r}")
    cand_grams = _ngrams(cand, int(n))
    total = sum(cand_grams.values())
    if total == 0:
        return Fraction(0)
    src_grams = _ngrams(src, int(n))
    clipped = sum(min(c, src_grams.get(g, 0)) for g, c in cand_grams.items())
    return Fraction(clipped, total)


@dataclass
class RougeReport:
    """Mean ROUGE-1/2/L precision of outputs against their paired inputs."""

    mean_r1: float
    mean_r2: float
    mean_rl: float
    per_pair: list[tuple[float, float, float]] = field(default_factory=list)
    by_stage: dict[str, dict[str, float]] = field(default_factory=dict)
    histograms: dict[str, list[int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "mean": {"r1": self.mean_r1, "r2": self.mean_r2, "rl": self.mean_rl},
            "by_stage": self.by_stage,
            "histograms": self.histograms,
            "histogram_bucket_width": HISTOGRAM_WIDTH,
            "num_pairs": len(self.per_pair),
        }


def _histogram(values: list[float]) -> list[int]:
    buckets = [0] * int(round(1.0 / HISTOGRAM_WIDTH))
    for v in values:
        idx = min(len(buckets) - 1, int(v / HISTOGRAM_WIDTH))
        buckets[idx] += 1
    return buckets


def abstractiveness_report(pairs) -> RougeReport:
    """ROUGE precision diagnostics for a mined dataset.

    ``pairs`` is anything with ``entries`` of (x, y, stage) shape — in
    practice a :class:`pairmine.pipeline.MinedDataset`. When both biencoder
    and crossencoder provenance are present the report carries per-stage
    means so the two selections can be compared.
    """
    entries = getattr(pairs, "entries", pairs)
    if not entries:
        raise ConfigError("abstractiveness_report: no pairs")
    per_pair: list[tuple[float, float, float]] = []
    stages: dict[str, list[tuple[float, float, float]]] = {}
    for entry in entries:
        x, y, stage = entry.x, entry.y, entry.stage
        triple = (
            float(rouge_precision(y.text, x.text, 1)),
            float(rouge_precision(y.text, x.text, 2)),
            float(rouge_precision(y.text, x.text, "L")),
        )
        per_pair.append(triple)
        stages.setdefault(stage, []).append(triple)

    def means(vals: list[tuple[float, float, float]]) -> tuple[float, float, float]:
        arr = np.array(vals)
        return float(arr[:, 0].mean()), float(arr[:, 1].mean()), float(arr[:, 2].mean())

    r1, r2, rl = means(per_pair)
    by_stage = {}
    for stage, vals in sorted(stages.items()):
        s1, s2, sl = means(vals)
        by_stage[stage] = {"r1": s1, "r2": s2, "rl": sl}
    histograms = {
        "r1": _histogram([v[0] for v in per_pair]),
        "r2": _histogram([v[1] for v in per_pair]),
        "rl": _histogram([v[2] for v in per_pair]),
    }
    return RougeReport(
        mean_r1=r1, mean_r2=r2, mean_rl=rl, per_pair=per_pair, by_stage=by_stage, histograms=histograms
    )


# --- presets and workspace materialization ------------------------------------

PRESETS: dict[str, SyntheticSpec] = {
    # Planted signal clearly above the trap overlap: the biencoder alone
    # should recover essentially all gold pairs.
    "separable": SyntheticSpec(
        num_pairs=1000,
        vocab_size=6000,
        x_len=16,
        y_len=10,
        signal_overlap=0.6,
        distractor_count=5000,
        distractor_overlap=0.2,
        rng_seed=7,
    ),
    # Traps overlap their (wrong) source more than gold outputs overlap
    # theirs, and run long; only pair-level features can sort this out.
    "lexical_trap": SyntheticSpec(
        num_pairs=1000,
        vocab_size=6000,
        x_len=16,
        y_len=10,
        signal_overlap=0.35,
        distractor_count=5000,
        distractor_overlap=0.5,
        distractor_len=20,
        rng_seed=11,
    ),
    # 200-record corpus for smoke tests and determinism checks.
    "toy": SyntheticSpec(
        num_pairs=100,
        vocab_size=800,
        x_len=12,
        y_len=8,
        signal_overlap=0.6,
        distractor_count=100,
        distractor_overlap=0.2,
        rng_seed=3,
    ),
}


def preset(name: str) -> SyntheticSpec:
    try:
        return replace(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def write_synthetic_workspace(
    spec: SyntheticSpec,
    out_dir: str,
    seed_size: int = 100,
    seed: int | None = None,
) -> dict[str, str]:
    """Materialize a synthetic corpus as pipeline-ready files.

    Writes ``x.jsonl``, ``y.jsonl`` (corpus format), ``seed.jsonl`` (the first
    ``seed_size`` gold pairs), and ``gold.json``. Returns the path map.
    """
    os.makedirs(out_dir, exist_ok=True)
    x_corpus, y_corpus, gold = generate(spec, seed)
    paths = {
        "x_corpus": os.path.join(out_dir, "x.jsonl"),
        "y_corpus": os.path.join(out_dir, "y.jsonl"),
        "seed_set": os.path.join(out_dir, "seed.jsonl"),
        "gold": os.path.join(out_dir, "gold.json"),
    }
    export_jsonl(x_corpus, paths["x_corpus"])
    export_jsonl(y_corpus, paths["y_corpus"])
    n_seed = min(seed_size, len(gold))
    with open(paths["seed_set"], "w", encoding="utf-8", newline="\n") as fh:
        for x_id in sorted(gold.pairs)[:n_seed]:
            x = x_corpus.get(x_id)
            y = y_corpus.get(gold.pairs[x_id])
            fh.write(
                json.dumps(
                    {"x": {"text": x.text, "meta": x.meta}, "y": {"text": y.text, "meta": y.meta}},
                    ensure_ascii=False,
                )
                + "\n"
            )
    with open(paths["gold"], "w", encoding="utf-8", newline="\n") as fh:
        json.dump({str(k): v for k, v in sorted(gold.pairs.items())}, fh, indent=0, sort_keys=True)
        fh.write("\n")
    return paths


def load_gold(path: str) -> GoldPairs:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read gold file {path}: {exc}") from exc
    return GoldPairs(pairs={int(k): int(v) for k, v in raw.items()})
