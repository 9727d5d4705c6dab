"""Corpus ingestion, normalization, sharding, and output decomposition.

Raw corpora arrive as JSONL (one object per line, required ``text``, optional
flat string ``meta`` and unsigned ``id``). This module turns them into
:class:`Record` collections, splits documents into candidate outputs
(sentences, or passage/answer-span pairs found by a rule-based span spotter),
and provides the normalized-substring check used to reject pairs whose output
already appears verbatim in the input.
"""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field, replace

from .errors import ConfigError, CorpusFormatError

SIDE_INPUT = "input"
SIDE_OUTPUT = "output"
TASK_READING_COMPREHENSION = "reading_comprehension"
TASK_SUMMARIZATION = "summarization"
UNKEYED_SHARD = "_unkeyed"

_WS_RE = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """NFC normalization plus whitespace collapse; casing is preserved."""
    return _WS_RE.sub(" ", unicodedata.normalize("NFC", text)).strip()


def normalize_for_match(text: str) -> str:
    """Normalization used for overlap checks and tokenization: NFC, case-fold,
    whitespace collapse. Stored record text never goes through the case-fold."""
    return normalize_text(text).casefold()


def tokenize(text: str) -> list[str]:
    return normalize_for_match(text).split()


def verbatim_overlap(needle: str, haystack: str) -> bool:
    """True iff the normalized needle is a contiguous substring of the
    normalized haystack."""
    return normalize_for_match(needle) in normalize_for_match(haystack)


@dataclass
class Record:
    """One corpus item: a question, passage+answer-span, document, or sentence."""

    id: int
    text: str
    side: str
    meta: dict[str, str] = field(default_factory=dict)

    def answer_span(self) -> tuple[int, int] | None:
        """Parse the ``answer_span`` meta entry ("begin:end" character offsets)."""
        raw = self.meta.get("answer_span")
        if raw is None:
            return None
        begin_s, _, end_s = raw.partition(":")
        begin, end = int(begin_s), int(end_s)
        if not (0 <= begin < end <= len(self.text)):
            raise CorpusFormatError(
                f"record {self.id}: answer_span {raw!r} out of range for text of length {len(self.text)}"
            )
        return begin, end

    def answer_text(self) -> str | None:
        """Answer string for reading-comprehension outputs: either the spanned
        slice of the passage or an explicit ``answer_text`` meta entry
        (used by synthetic negatives that pair an answer with a foreign passage)."""
        explicit = self.meta.get("answer_text")
        if explicit is not None:
            return explicit
        span = self.answer_span()
        if span is None:
            return None
        return self.text[span[0] : span[1]]


def record_feature_text(record: Record) -> str:
    """Text a model should consume for this record.

    Reading-comprehension outputs are scored as answer-then-passage, so the
    answer string is prepended when one is present.
    """
    answer = record.answer_text()
    if answer:
        return f"{answer} {record.text}"
    return record.text


@dataclass
class CorpusHandle:
    """Immutable-by-convention collection of records sharing one side.

    Iteration order is ascending id; construction sorts and validates
    uniqueness.
    """

    records: list[Record]
    side: str
    shard_key: str | None = None
    skipped: int = 0

    def __post_init__(self) -> None:
        self.records = sorted(self.records, key=lambda r: r.id)
        seen: set[int] = set()
        for rec in self.records:
            if rec.id in seen:
                raise CorpusFormatError(f"duplicate record id {rec.id} in corpus")
            seen.add(rec.id)
            if rec.side != self.side:
                raise CorpusFormatError(
                    f"record {rec.id} has side {rec.side!r}, corpus expects {self.side!r}"
                )
        self._by_id = {rec.id: rec for rec in self.records}

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def get(self, record_id: int) -> Record | None:
        return self._by_id.get(record_id)

    def ids(self) -> list[int]:
        return [rec.id for rec in self.records]


@dataclass
class Shard:
    key_value: str
    record_ids: list[int]


@dataclass
class SeedExample:
    """Labeled (input, output) pair from the supervision seed set."""

    x: Record
    y: Record
    task: str


def ingest_jsonl(path: str, side: str, id_offset: int = 0) -> CorpusHandle:
    """Read a JSONL corpus file into a :class:`CorpusHandle`.

    Each line needs a ``text`` field; ``meta`` (flat string map) and ``id``
    are optional. Records without an explicit id get sequential ids starting
    at ``id_offset``. Lines whose text is empty after normalization are
    skipped and counted on the returned handle.
    """
    if side not in (SIDE_INPUT, SIDE_OUTPUT):
        raise ConfigError(f"unknown corpus side {side!r}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read corpus file {path}: {exc}") from exc

    records: list[Record] = []
    skipped = 0
    next_id = id_offset
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            skipped += 1
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"{path}: malformed JSON on line {lineno}: {exc}") from exc
        if not isinstance(obj, dict) or "text" not in obj:
            raise CorpusFormatError(f"{path}: line {lineno} lacks a 'text' field")
        text = normalize_text(str(obj["text"]))
        if not text:
            skipped += 1
            continue
        meta = {str(k): str(v) for k, v in (obj.get("meta") or {}).items()}
        if "id" in obj:
            rec_id = int(obj["id"])
        else:
            rec_id = next_id
            next_id += 1
        records.append(Record(id=rec_id, text=text, side=side, meta=meta))
    return CorpusHandle(records=records, side=side, skipped=skipped)


def export_jsonl(corpus: CorpusHandle, path: str) -> None:
    """Write a corpus back out in the ingest format (id, text, meta)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in corpus:
            obj = {"id": rec.id, "text": rec.text}
            if rec.meta:
                obj["meta"] = dict(sorted(rec.meta.items()))
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def shard_by_key(corpus: CorpusHandle, key: str) -> list[Shard]:
    """Partition a corpus by a meta key; records missing the key land in the
    ``_unkeyed`` shard. Shards are ordered by key value ascending."""
    buckets: dict[str, list[int]] = {}
    for rec in corpus:
        value = rec.meta.get(key, UNKEYED_SHARD)
        buckets.setdefault(value, []).append(rec.id)
    return [Shard(key_value=k, record_ids=sorted(v)) for k, v in sorted(buckets.items())]


# --- sentence splitting -----------------------------------------------------

# Tokens that end with a period but do not terminate a sentence.
_ABBREVIATIONS = {
    "mr", "mrs", "ms", "dr", "prof", "st", "jr", "sr", "vs", "etc",
    "e.g", "i.e", "inc", "co", "corp", "no", "fig", "al", "u.s", "u.k",
}

_SENT_BOUNDARY = re.compile(r"[.!?]+[\"'\)\]]*\s+(?=[\"'\(\[]?[A-Z0-9])")


def split_sentences(text: str) -> list[str]:
    """Rule-based sentence splitter: break after terminal punctuation when the
    continuation starts capitalized (or with a digit) and the preceding token
    is not a known abbreviation."""
    boundaries = []
    for match in _SENT_BOUNDARY.finditer(text):
        before = text[: match.start() + 1]
        last_token = before.split()[-1] if before.split() else ""
        core = last_token.rstrip(".!?\"')]").lstrip("\"'([").lower()
        if core in _ABBREVIATIONS:
            continue
        boundaries.append(match.end())
    parts = []
    start = 0
    for b in boundaries:
        parts.append(text[start:b].strip())
        start = b
    parts.append(text[start:].strip())
    return [p for p in parts if p]


# --- span spotting ----------------------------------------------------------


@dataclass
class SpotterConfig:
    """Rule-based answer-span spotter settings.

    Spans are maximal runs of adjacent tokens that are capitalized or numeric
    (covering names, numbers, and dates). Runs longer than
    ``max_span_tokens`` are discarded as likely title-casing noise.
    """

    max_span_tokens: int = 8


SPAN_ENTITY = "entity"
SPAN_NUMBER = "number"
SPAN_DATE = "date"

_MONTHS = {
    "january", "february", "march", "april", "may", "june", "july",
    "august", "september", "october", "november", "december",
    "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept",
    "oct", "nov", "dec",
}

_TOKEN_RE = re.compile(r"\S+")
_NUMERIC_RE = re.compile(r"^\d[\d,.\-/:]*$")
_DATE_TOKEN_RE = re.compile(r"^\d{1,4}([/\-.]\d{1,4}){1,2}$")


def _token_core(token: str, start: int) -> tuple[str, int, int]:
    """Strip enclosing punctuation, returning (core, begin, end) offsets."""
    begin, end = start, start + len(token)
    while begin < end and not token[begin - start].isalnum():
        begin += 1
    while end > begin and not token[end - start - 1].isalnum():
        end -= 1
    return token[begin - start : end - start], begin, end


def classify_span_text(span_text: str) -> str:
    """Categorize a spotted span as entity, number, or date."""
    tokens = [_token_core(m.group(), m.start())[0] for m in _TOKEN_RE.finditer(span_text)]
    tokens = [t for t in tokens if t]
    if not tokens:
        return SPAN_ENTITY
    numeric = [t for t in tokens if _NUMERIC_RE.match(t)]
    if any(t.lower() in _MONTHS for t in tokens) and numeric:
        return SPAN_DATE
    if len(numeric) == len(tokens):
        if any(_DATE_TOKEN_RE.match(t) for t in tokens):
            return SPAN_DATE
        return SPAN_NUMBER
    return SPAN_ENTITY


def spot_spans(text: str, cfg: SpotterConfig | None = None) -> list[tuple[int, int, str]]:
    """Find candidate answer spans as (begin, end, type) character offsets.

    A token qualifies if its core (enclosing punctuation stripped) starts with
    an uppercase letter or a digit; a span is a maximal run of adjacent
    qualifying tokens.
    """
    cfg = cfg or SpotterConfig()
    runs: list[list[tuple[int, int]]] = []
    current: list[tuple[int, int]] = []
    for match in _TOKEN_RE.finditer(text):
        core, begin, end = _token_core(match.group(), match.start())
        qualifies = bool(core) and (core[0].isupper() or core[0].isdigit())
        if qualifies:
            current.append((begin, end))
        elif current:
            runs.append(current)
            current = []
    if current:
        runs.append(current)

    spans = []
    for run in runs:
        if cfg.max_span_tokens and len(run) > cfg.max_span_tokens:
            continue
        begin, end = run[0][0], run[-1][1]
        spans.append((begin, end, classify_span_text(text[begin:end])))
    return spans


def split_outputs(
    record: Record,
    task: str,
    spotter: SpotterConfig | None = None,
    id_offset: int = 0,
) -> list[Record]:
    """Decompose a raw output-side document into candidate output records.

    Summarization: one record per sentence. Reading comprehension: one record
    per (passage, spotted span). Zero sentences or spans yield an empty list.
    Produced ids are sequential from ``id_offset``; every record carries
    ``source_doc_id`` and inherits the parent's ``date`` when present.
    """
    inherited = {}
    if "date" in record.meta:
        inherited["date"] = record.meta["date"]
    out: list[Record] = []
    if task == TASK_SUMMARIZATION:
        for i, sent in enumerate(split_sentences(record.text)):
            meta = {"source_doc_id": str(record.id), **inherited}
            out.append(Record(id=id_offset + i, text=sent, side=SIDE_OUTPUT, meta=meta))
    elif task == TASK_READING_COMPREHENSION:
        for i, (begin, end, span_type) in enumerate(spot_spans(record.text, spotter)):
            meta = {
                "source_doc_id": str(record.id),
                "answer_span": f"{begin}:{end}",
                "answer_type": span_type,
                **inherited,
            }
            out.append(Record(id=id_offset + i, text=record.text, side=SIDE_OUTPUT, meta=meta))
    else:
        raise ConfigError(f"unknown task {task!r}")
    return out


def with_side(record: Record, side: str) -> Record:
    return replace(record, side=side)
