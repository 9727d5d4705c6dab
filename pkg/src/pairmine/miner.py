"""Recall-oriented candidate mining: forward/reverse kNN plus margin scoring.

For every input vector the miner retrieves nearest outputs, normalizes each
pair's cosine by the average cosine of both elements' k-nearest neighborhoods
in the opposing corpus, applies the caller's overlap predicate, keeps the
best few candidates per input, and emits a globally margin-ranked list.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import ConfigError, CorpusFormatError, DegenerateMarginError
from .knn import Index, VectorStore, search

logger = logging.getLogger(__name__)

STAGE_BIENCODER = "biencoder"
STAGE_CROSSENCODER = "crossencoder"

_DENOM_GUARD = 1e-9


@dataclass
class MarginConfig:
    """Neighborhood and fan-out settings for margin mining."""

    k: int = 4
    top_per_input: int = 4
    max_candidates: int = 0  # 0 = no global cap
    nprobe: int = 0  # 0 = probe every list (exact for IVF)

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 1 <= self.top_per_input <= self.k:
            raise ConfigError("top_per_input must be in [1, k]")


@dataclass(frozen=True)
class PairCandidate:
    """A mined (x, y) pair; the currency flowing between pipeline stages."""

    x_id: int
    y_id: int
    cosine: float
    margin: float
    cross_score: float | None = None
    stage: str = STAGE_BIENCODER


def margin_score(cos_xy: float, nx_cosines: list[float], ny_cosines: list[float], k: int) -> float:
    """Cosine of the pair normalized by the average neighborhood cosines.

    Each neighborhood list normally has length ``k``; shorter lists are
    allowed when a corpus holds fewer than ``k`` items and are averaged over
    their actual length. A near-zero denominator raises
    :class:`DegenerateMarginError` so callers can exclude the pair.
    """
    if not nx_cosines or not ny_cosines:
        raise ConfigError("neighborhood cosine lists must be non-empty")
    if len(nx_cosines) > k or len(ny_cosines) > k:
        raise ConfigError("neighborhood lists longer than k")
    denom = float(np.mean(nx_cosines)) / 2.0 + float(np.mean(ny_cosines)) / 2.0
    if abs(denom) < _DENOM_GUARD:
        raise DegenerateMarginError(f"margin denominator {denom!r} below guard")
    return cos_xy / denom


@dataclass
class MineResult:
    candidates: list[PairCandidate]
    counters: dict[str, int]


def mine(
    x_store: VectorStore,
    y_store: VectorStore,
    x_index: Index,
    y_index: Index,
    cfg: MarginConfig,
    overlap_filter: Callable[[int, int], bool] | None = None,
) -> MineResult:
    """Mine margin-ranked candidate pairs from encoded corpora.

    ``overlap_filter(x_id, y_id)`` returning True drops the pair (the pipeline
    wires this to the verbatim-overlap rule). The forward search over-fetches
    ``k + top_per_input`` neighbors so filtering cannot starve the per-input
    quota. Reverse neighborhoods are computed only for surfaced candidates.

    Ordering is total: margin descending, ties by ascending (x_id, y_id);
    the list is truncated to ``max_candidates`` when that cap is set.
    """
    counters = {
        "pairs_scored": 0,
        "overlap_filtered": 0,
        "degenerate": 0,
        "truncated_per_input": 0,
        "truncated_global": 0,
        "pairs_out": 0,
    }
    if len(x_store) == 0 or len(y_store) == 0:
        logger.warning("mining over an empty store: returning no candidates")
        return MineResult(candidates=[], counters=counters)

    fanout = cfg.k + cfg.top_per_input
    nprobe_y = _effective_nprobe(y_index, cfg.nprobe)
    nprobe_x = _effective_nprobe(x_index, cfg.nprobe)
    forward = search(y_index, x_store, k=fanout, nprobe=nprobe_y)

    # Reverse neighborhoods for every surfaced candidate y, batched.
    surfaced: list[int] = sorted({yid for hood in forward for yid in hood.neighbor_ids})
    y_pos = {int(i): p for p, i in enumerate(y_store.ids)}
    q_rows = y_store.vectors[[y_pos[yid] for yid in surfaced]]
    reverse = search(
        x_index,
        VectorStore(ids=np.array(surfaced, dtype=np.int64), vectors=q_rows),
        k=cfg.k,
        nprobe=nprobe_x,
    )
    ny_means: dict[int, list[float]] = {h.query_id: h.cosines for h in reverse}

    per_input: list[PairCandidate] = []
    for hood in forward:
        nx = hood.cosines[: cfg.k]
        kept: list[PairCandidate] = []
        for yid, cos in zip(hood.neighbor_ids, hood.cosines):
            counters["pairs_scored"] += 1
            if overlap_filter is not None and overlap_filter(hood.query_id, yid):
                counters["overlap_filtered"] += 1
                continue
            try:
                margin = margin_score(cos, nx, ny_means[yid], cfg.k)
            except DegenerateMarginError:
                counters["degenerate"] += 1
                continue
            kept.append(PairCandidate(x_id=hood.query_id, y_id=yid, cosine=cos, margin=margin))
        kept.sort(key=lambda c: (-c.margin, c.y_id))
        counters["truncated_per_input"] += max(0, len(kept) - cfg.top_per_input)
        per_input.extend(kept[: cfg.top_per_input])

    per_input.sort(key=lambda c: (-c.margin, c.x_id, c.y_id))
    if cfg.max_candidates and len(per_input) > cfg.max_candidates:
        counters["truncated_global"] = len(per_input) - cfg.max_candidates
        per_input = per_input[: cfg.max_candidates]
    counters["pairs_out"] = len(per_input)
    return MineResult(candidates=per_input, counters=counters)


def _effective_nprobe(index: Index, nprobe: int) -> int:
    nlist = getattr(index, "nlist", None)
    if nlist is None:
        return 1
    return nlist if nprobe == 0 else min(nprobe, nlist)


# --- candidate file io --------------------------------------------------------


def save_candidates(candidates: list[PairCandidate], path: str) -> None:
    """Candidate JSONL: x_id, y_id, cosine, margin, stage (+ cross_score)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for c in candidates:
            obj = {"x_id": c.x_id, "y_id": c.y_id, "cosine": c.cosine, "margin": c.margin}
            if c.cross_score is not None:
                obj["cross_score"] = c.cross_score
            obj["stage"] = c.stage
            fh.write(json.dumps(obj) + "\n")


def load_candidates(path: str) -> list[PairCandidate]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read candidate file {path}: {exc}") from exc
    out = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"{path}: malformed JSON on line {lineno}: {exc}") from exc
        out.append(
            PairCandidate(
                x_id=int(obj["x_id"]),
                y_id=int(obj["y_id"]),
                cosine=float(obj["cosine"]),
                margin=float(obj["margin"]),
                cross_score=float(obj["cross_score"]) if "cross_score" in obj else None,
                stage=str(obj.get("stage", STAGE_BIENCODER)),
            )
        )
    return out


def with_cross_score(candidate: PairCandidate, score: float) -> PairCandidate:
    return replace(candidate, cross_score=score, stage=STAGE_CROSSENCODER)
