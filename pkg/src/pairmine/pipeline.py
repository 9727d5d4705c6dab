"""End-to-end orchestration: ingest -> train -> embed -> index -> mine ->
train_cross -> filter -> export, with persisted per-stage artifacts.

Every stage reads only files written by upstream stages, writes its outputs
atomically, and records input/output hashes plus flow counters in the work
directory's manifest, so reruns are reproducible byte-for-byte, stale or
missing artifacts are detected, and running stages one at a time equals one
``run_all`` process.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import corpus as corpus_mod
from . import crossfilter, encoder, knn, miner
from .corpus import (
    CorpusHandle,
    Record,
    SIDE_INPUT,
    SIDE_OUTPUT,
    SeedExample,
    TASK_READING_COMPREHENSION,
    TASK_SUMMARIZATION,
    verbatim_overlap,
)
from .errors import (
    ConfigError,
    CorpusFormatError,
    MissingArtifactError,
    StaleArtifactError,
)
from .evalharness import GoldPairs
from .miner import MarginConfig, PairCandidate

logger = logging.getLogger(__name__)

STAGE_INGEST = "ingest"
STAGE_TRAIN = "train"
STAGE_EMBED = "embed"
STAGE_INDEX = "index"
STAGE_MINE = "mine"
STAGE_TRAIN_CROSS = "train_cross"
STAGE_FILTER = "filter"
STAGE_EXPORT = "export"

STAGES = (
    STAGE_INGEST,
    STAGE_TRAIN,
    STAGE_EMBED,
    STAGE_INDEX,
    STAGE_MINE,
    STAGE_TRAIN_CROSS,
    STAGE_FILTER,
    STAGE_EXPORT,
)

_DEPS: dict[str, tuple[str, ...]] = {
    STAGE_INGEST: (),
    STAGE_TRAIN: (STAGE_INGEST,),
    STAGE_EMBED: (STAGE_INGEST, STAGE_TRAIN),
    STAGE_INDEX: (STAGE_INGEST, STAGE_EMBED),
    STAGE_MINE: (STAGE_INGEST, STAGE_EMBED, STAGE_INDEX),
    STAGE_TRAIN_CROSS: (STAGE_INGEST, STAGE_TRAIN, STAGE_EMBED, STAGE_MINE),
    STAGE_FILTER: (STAGE_INGEST, STAGE_TRAIN, STAGE_EMBED, STAGE_MINE, STAGE_TRAIN_CROSS),
    STAGE_EXPORT: (STAGE_INGEST, STAGE_FILTER),
}

MANIFEST_NAME = "manifest.json"

# Flat configuration schema: key -> default. Dotted keys group sub-configs.
CONFIG_DEFAULTS: dict[str, object] = {
    "task": TASK_SUMMARIZATION,
    "x_corpus": "",
    "y_corpus": "",
    "seed_set": "",
    "workdir": "",
    "rng_seed": 0,
    "shard_key": "date",
    "split_outputs": True,
    "min_doc_sentences": 4,
    "retention": 0.2,
    "final_top_n": 500,
    "index.kind": knn.KIND_EXACT,
    "index.nlist": 16,
    "margin.k": 4,
    "margin.top_per_input": 4,
    "margin.max_candidates": 0,
    "margin.nprobe": 0,
    "bi.learning_rate": 1e-2,
    "bi.steps": 500,
    "bi.batch_size": 32,
    "bi.n_random_negs": 4,
    "bi.multitask_weight": 1.0,
    "bi.num_buckets": 2**18,
    "bi.dim": 256,
    "bi.synth_negs_per_type": 2,
    "cross.learning_rate": 1e-2,
    "cross.steps": 500,
    "cross.batch_size": 32,
    "cross.hidden": 16,
    "cross.mode": "",  # empty = choose by task (rc -> binary, sum -> pairwise)
    "cross.negs_per_positive": 8,
    "cross.retrieval_negs": 4,
}

_REQUIRED_KEYS = ("task", "x_corpus", "seed_set", "workdir")


def _coerce(key: str, value: object) -> object:
    default = CONFIG_DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("true", "1", "yes"):
            return True
        if text in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {key!r}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {key!r}: cannot coerce {value!r}") from exc
    return str(value)


@dataclass
class PipelineConfig:
    """Validated view over the flat key-value configuration."""

    flat: dict[str, object]

    def __post_init__(self) -> None:
        unknown = set(self.flat) - set(CONFIG_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged = dict(CONFIG_DEFAULTS)
        merged.update({k: _coerce(k, v) for k, v in self.flat.items()})
        self.flat = merged
        for key in _REQUIRED_KEYS:
            if not merged[key]:
                raise ConfigError(f"config key {key!r} is required")
        if merged["task"] not in (TASK_READING_COMPREHENSION, TASK_SUMMARIZATION):
            raise ConfigError(f"unknown task {merged['task']!r}")
        if not 0.0 < float(merged["retention"]) <= 1.0:
            raise ConfigError("retention must lie in (0, 1]")
        if int(merged["final_top_n"]) < 1:
            raise ConfigError("final_top_n must be >= 1")
        if merged["index.kind"] not in (knn.KIND_EXACT, knn.KIND_IVF):
            raise ConfigError(f"unknown index.kind {merged['index.kind']!r}")
        mode = merged["cross.mode"]
        if mode not in ("", crossfilter.MODE_BINARY, crossfilter.MODE_PAIRWISE):
            raise ConfigError(f"unknown cross.mode {mode!r}")

    def __getitem__(self, key: str) -> object:
        return self.flat[key]

    @property
    def task(self) -> str:
        return str(self.flat["task"])

    @property
    def workdir(self) -> str:
        return str(self.flat["workdir"])

    @property
    def rng_seed(self) -> int:
        return int(self.flat["rng_seed"])

    def seeds(self) -> dict[str, int]:
        """Stable per-component seeds derived from the global rng_seed."""
        children = np.random.SeedSequence(self.rng_seed).spawn(4)
        names = ("biencoder", "crossencoder", "index", "sampling")
        return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}

    def config_hash(self) -> str:
        canonical = json.dumps(self.flat, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def bi_train_config(self) -> encoder.TrainConfig:
        f = self.flat
        return encoder.TrainConfig(
            learning_rate=float(f["bi.learning_rate"]),
            steps=int(f["bi.steps"]),
            batch_size=int(f["bi.batch_size"]),
            n_random_negs=int(f["bi.n_random_negs"]),
            multitask_weight=float(f["bi.multitask_weight"]),
            rng_seed=self.seeds()["biencoder"],
            num_buckets=int(f["bi.num_buckets"]),
            dim=int(f["bi.dim"]),
            synth_negs_per_type=int(f["bi.synth_negs_per_type"]),
        )

    def cross_train_config(self) -> encoder.TrainConfig:
        f = self.flat
        return encoder.TrainConfig(
            learning_rate=float(f["cross.learning_rate"]),
            steps=int(f["cross.steps"]),
            batch_size=int(f["cross.batch_size"]),
            rng_seed=self.seeds()["crossencoder"],
        )

    def margin_config(self) -> MarginConfig:
        f = self.flat
        return MarginConfig(
            k=int(f["margin.k"]),
            top_per_input=int(f["margin.top_per_input"]),
            max_candidates=int(f["margin.max_candidates"]),
            nprobe=int(f["margin.nprobe"]),
        )

    def cross_mode(self) -> str:
        mode = str(self.flat["cross.mode"])
        if mode:
            return mode
        return (
            crossfilter.MODE_BINARY
            if self.task == TASK_READING_COMPREHENSION
            else crossfilter.MODE_PAIRWISE
        )

    def effective_shard_key(self) -> str | None:
        # Reading comprehension mines against one global output index.
        if self.task != TASK_SUMMARIZATION:
            return None
        return str(self.flat["shard_key"]) or None


def load_config(path: str) -> PipelineConfig:
    """Read a flat JSON config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a flat JSON object")
    return PipelineConfig(flat=raw)


def apply_overrides(cfg: PipelineConfig, overrides: dict[str, object]) -> PipelineConfig:
    flat = dict(cfg.flat)
    for key, value in overrides.items():
        if key not in CONFIG_DEFAULTS:
            raise ConfigError(f"unknown config key in override: {key!r}")
        flat[key] = value
    return PipelineConfig(flat=flat)


# --- artifacts and manifest ----------------------------------------------------


@dataclass
class StageArtifact:
    stage: str
    input_hashes: dict[str, str]
    outputs: dict[str, str]  # relative path -> sha256
    counters: dict[str, int]


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@contextmanager
def _atomic(path: str):
    """Yield a temp path that is renamed onto ``path`` on success."""
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


class Workdir:
    """Path helper plus manifest access for one pipeline working directory."""

    def __init__(self, root: str) -> None:
        self.root = root
        os.makedirs(root, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.root, name)

    def load_manifest(self) -> dict:
        try:
            with open(self.path(MANIFEST_NAME), "r", encoding="utf-8") as fh:
                return json.load(fh)
        except OSError:
            return {"stages": {}}

    def record_stage(self, artifact: StageArtifact, config_hash: str) -> None:
        manifest = self.load_manifest()
        manifest["stages"][artifact.stage] = {
            "config_hash": config_hash,
            "inputs": artifact.input_hashes,
            "outputs": artifact.outputs,
            "counters": artifact.counters,
        }
        with _atomic(self.path(MANIFEST_NAME)) as tmp:
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(manifest, fh, indent=2, sort_keys=True)
                fh.write("\n")

    def check_upstream(self, stage: str, config_hash: str) -> None:
        manifest = self.load_manifest()
        for dep in _DEPS[stage]:
            entry = manifest["stages"].get(dep)
            if entry is None:
                raise MissingArtifactError(
                    f"stage '{dep}' has not produced its artifact (required by '{stage}')"
                )
            if entry["config_hash"] != config_hash:
                raise StaleArtifactError(
                    f"stage '{dep}' artifact was built with a different configuration; rerun it"
                )
            for rel, sha in entry["outputs"].items():
                full = self.path(rel)
                if not os.path.exists(full):
                    raise MissingArtifactError(
                        f"artifact '{rel}' from stage '{dep}' is missing (required by '{stage}')"
                    )
                if _sha256_file(full) != sha:
                    raise StaleArtifactError(
                        f"artifact '{rel}' from stage '{dep}' does not match its recorded hash"
                    )


def _finish(
    wd: Workdir,
    cfg: PipelineConfig,
    stage: str,
    inputs: dict[str, str],
    outputs: list[str],
    counters: dict[str, int],
) -> StageArtifact:
    artifact = StageArtifact(
        stage=stage,
        input_hashes=inputs,
        outputs={rel: _sha256_file(wd.path(rel)) for rel in outputs},
        counters=counters,
    )
    wd.record_stage(artifact, cfg.config_hash())
    return artifact


# --- seed set -------------------------------------------------------------------


def read_seed(path: str, task: str) -> list[SeedExample]:
    """Parse the seed JSONL: each line {"x": {...}, "y": {...}} with text/meta."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read seed file {path}: {exc}") from exc
    out: list[SeedExample] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"{path}: malformed JSON on line {lineno}: {exc}") from exc
        try:
            x_raw, y_raw = obj["x"], obj["y"]
        except (TypeError, KeyError):
            raise CorpusFormatError(f"{path}: line {lineno} must contain 'x' and 'y' objects") from None
        idx = len(out)
        x = Record(
            id=idx,
            text=corpus_mod.normalize_text(str(x_raw.get("text", ""))),
            side=SIDE_INPUT,
            meta={str(k): str(v) for k, v in (x_raw.get("meta") or {}).items()},
        )
        y = Record(
            id=idx,
            text=corpus_mod.normalize_text(str(y_raw.get("text", ""))),
            side=SIDE_OUTPUT,
            meta={str(k): str(v) for k, v in (y_raw.get("meta") or {}).items()},
        )
        if not x.text or not y.text:
            raise CorpusFormatError(f"{path}: line {lineno} has an empty record")
        if task == TASK_READING_COMPREHENSION:
            y.answer_span()  # validates presence and bounds
        out.append(SeedExample(x=x, y=y, task=task))
    if not out:
        raise CorpusFormatError(f"{path}: seed set is empty")
    return out


# --- stage implementations --------------------------------------------------------


def _stage_ingest(cfg: PipelineConfig, wd: Workdir) -> StageArtifact:
    task = cfg.task
    x_path = str(cfg["x_corpus"])
    y_path = str(cfg["y_corpus"])
    seed_path = str(cfg["seed_set"])
    inputs = {x_path: _sha256_file_checked(x_path), seed_path: _sha256_file_checked(seed_path)}
    if y_path:
        inputs[y_path] = _sha256_file_checked(y_path)

    raw_x = corpus_mod.ingest_jsonl(x_path, SIDE_INPUT)
    skipped = raw_x.skipped
    dropped_short = 0
    x_records: list[Record] = []
    if task == TASK_SUMMARIZATION:
        min_sents = int(cfg["min_doc_sentences"])
        for rec in raw_x:
            if len(corpus_mod.split_sentences(rec.text)) < min_sents and bool(cfg["split_outputs"]):
                dropped_short += 1
                continue
            x_records.append(rec)
    else:
        x_records = list(raw_x)

    raw_lines = len(raw_x) + raw_x.skipped
    y_records: list[Record] = []
    raw_y_kept = 0
    if y_path:
        raw_y = corpus_mod.ingest_jsonl(y_path, SIDE_OUTPUT)
        skipped += raw_y.skipped
        raw_lines += len(raw_y) + raw_y.skipped
        raw_y_kept = len(raw_y)
        if bool(cfg["split_outputs"]):
            next_id = 0
            for rec in raw_y:
                parts = corpus_mod.split_outputs(rec, task, id_offset=next_id)
                next_id += len(parts)
                y_records.extend(parts)
        else:
            y_records = list(raw_y)
    elif task == TASK_SUMMARIZATION:
        # Derive the output corpus from the input documents' sentences.
        next_id = 0
        for rec in x_records:
            parts = corpus_mod.split_outputs(rec, task, id_offset=next_id)
            next_id += len(parts)
            y_records.extend(parts)
    else:
        raise ConfigError("reading comprehension requires a y_corpus (passage) file")

    seed = read_seed(seed_path, task)

    x_corpus = CorpusHandle(records=x_records, side=SIDE_INPUT)
    y_corpus = CorpusHandle(records=y_records, side=SIDE_OUTPUT)
    with _atomic(wd.path("corpus_x.jsonl")) as tmp:
        corpus_mod.export_jsonl(x_corpus, tmp)
    with _atomic(wd.path("corpus_y.jsonl")) as tmp:
        corpus_mod.export_jsonl(y_corpus, tmp)
    with _atomic(wd.path("seed.jsonl")) as tmp:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            for ex in seed:
                fh.write(
                    json.dumps(
                        {
                            "x": {"text": ex.x.text, "meta": dict(sorted(ex.x.meta.items()))},
                            "y": {"text": ex.y.text, "meta": dict(sorted(ex.y.meta.items()))},
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )

    counters = {
        "records_in": raw_lines,
        "records_out": len(x_records) + raw_y_kept if y_path else len(x_records),
        "filtered": skipped + dropped_short,
        "degenerate": 0,
        "x_records": len(x_corpus),
        "y_records": len(y_corpus),
        "seed_examples": len(seed),
        "dropped_short_docs": dropped_short,
        "skipped_empty": skipped,
    }
    return _finish(wd, cfg, STAGE_INGEST, inputs, ["corpus_x.jsonl", "corpus_y.jsonl", "seed.jsonl"], counters)


def _sha256_file_checked(path: str) -> str:
    if not path or not os.path.exists(path):
        raise ConfigError(f"input file does not exist: {path!r}")
    return _sha256_file(path)


def _load_corpora(wd: Workdir) -> tuple[CorpusHandle, CorpusHandle]:
    x = corpus_mod.ingest_jsonl(wd.path("corpus_x.jsonl"), SIDE_INPUT)
    y = corpus_mod.ingest_jsonl(wd.path("corpus_y.jsonl"), SIDE_OUTPUT)
    return x, y


def _stage_train(cfg: PipelineConfig, wd: Workdir) -> StageArtifact:
    x_corpus, y_corpus = _load_corpora(wd)
    seed = read_seed(wd.path("seed.jsonl"), cfg.task)
    bi_cfg = cfg.bi_train_config()
    prefilter_corpus = x_corpus if cfg.task == TASK_READING_COMPREHENSION else y_corpus
    result = encoder.train(seed, y_corpus, bi_cfg, prefilter_corpus=prefilter_corpus)
    meta = {
        "loss_trace": result.loss_trace,
        "learning_rate": bi_cfg.learning_rate,
        "steps": bi_cfg.steps,
        "batch_size": bi_cfg.batch_size,
        "n_random_negs": bi_cfg.n_random_negs,
        "multitask_weight": bi_cfg.multitask_weight,
        "num_buckets": bi_cfg.num_buckets,
        "dim": bi_cfg.dim,
        "rng_seed": bi_cfg.rng_seed,
    }
    with _atomic(wd.path("biencoder.ckpt")) as tmp:
        encoder.save_checkpoint(result.biencoder, result.prefilter, tmp, meta)
        os.replace(tmp + ".meta.json", wd.path("biencoder.ckpt.meta.json"))
    counters = {
        "records_in": len(seed),
        "records_out": len(seed),
        "filtered": 0,
        "degenerate": 0,
        "steps": bi_cfg.steps,
    }
    return _finish(
        wd, cfg, STAGE_TRAIN, {}, ["biencoder.ckpt", "biencoder.ckpt.meta.json"], counters
    )


def _embed_corpus(model: encoder.BiencoderModel, handle: CorpusHandle) -> knn.VectorStore:
    ids = np.array(handle.ids(), dtype=np.int64)
    rows = np.empty((len(handle), model.dim), dtype=np.float32)
    for i, rec in enumerate(handle):
        rows[i] = encoder.embed(model, encoder.featurize_record(rec, model.num_buckets)).astype(np.float32)
    return knn.VectorStore(ids=ids, vectors=rows)


def _stage_embed(cfg: PipelineConfig, wd: Workdir) -> StageArtifact:
    x_corpus, y_corpus = _load_corpora(wd)
    model, pre_model, _ = encoder.load_checkpoint(wd.path("biencoder.ckpt"))
    x_store = _embed_corpus(model, x_corpus)
    y_store = _embed_corpus(model, y_corpus)

    # The prefilter screens inputs for reading comprehension, outputs for
    # summarization; it keeps the top `retention` fraction by probability.
    retention = float(cfg["retention"])
    side = "x" if cfg.task == TASK_READING_COMPREHENSION else "y"
    screened = x_corpus if side == "x" else y_corpus
    scores = np.array(
        [
            encoder.prefilter(pre_model, encoder.featurize_record(rec, model.num_buckets), model)
            for rec in screened
        ]
    )
    threshold = encoder.prefilter_threshold(scores, retention)
    retained = [rec.id for rec, s in zip(screened, scores) if s >= threshold]
    dropped = len(screened) - len(retained)

    with _atomic(wd.path("vectors_x.pmv")) as tmp:
        knn.save_vectors(x_store, tmp)
    with _atomic(wd.path("vectors_y.pmv")) as tmp:
        knn.save_vectors(y_store, tmp)
    with _atomic(wd.path("prefilter.json")) as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(
                {"side": side, "threshold": threshold, "retention": retention, "retained": retained},
                fh,
                sort_keys=True,
            )
            fh.write("\n")

    total = len(x_corpus) + len(y_corpus)
    counters = {
        "records_in": total,
        "records_out": total - dropped,
        "filtered": dropped,
        "degenerate": 0,
        "prefilter_dropped": dropped,
        "renormalized_rows": x_store.renormalized + y_store.renormalized,
    }
    return _finish(
        wd,
        cfg,
        STAGE_EMBED,
        {},
        ["vectors_x.pmv", "vectors_y.pmv", "prefilter.json"],
        counters,
    )


def _load_prefilter(wd: Workdir) -> dict:
    with open(wd.path("prefilter.json"), "r", encoding="utf-8") as fh:
        return json.load(fh)


def _sub_store(store: knn.VectorStore, keep_ids: list[int]) -> knn.VectorStore:
    keep = np.asarray(sorted(keep_ids), dtype=np.int64)
    pos = {int(i): p for p, i in enumerate(store.ids)}
    rows = np.array([pos[int(i)] for i in keep], dtype=np.int64)
    return knn.VectorStore(ids=store.ids[rows], vectors=store.vectors[rows])


def _shard_plan(cfg: PipelineConfig, wd: Workdir) -> list[dict]:
    """Shard membership after prefiltering: list of {key, x_ids, y_ids}."""
    x_corpus, y_corpus = _load_corpora(wd)
    pre = _load_prefilter(wd)
    retained = set(pre["retained"])
    x_ids = [r.id for r in x_corpus if pre["side"] != "x" or r.id in retained]
    y_ids = [r.id for r in y_corpus if pre["side"] != "y" or r.id in retained]
    key = cfg.effective_shard_key()
    if key is None:
        return [{"key": "_all", "x_ids": x_ids, "y_ids": y_ids}]
    x_shards = {s.key_value: set(s.record_ids) for s in corpus_mod.shard_by_key(x_corpus, key)}
    y_shards = {s.key_value: set(s.record_ids) for s in corpus_mod.shard_by_key(y_corpus, key)}
    plan = []
    x_keep, y_keep = set(x_ids), set(y_ids)
    for key_value in sorted(set(x_shards) | set(y_shards)):
        plan.append(
            {
                "key": key_value,
                "x_ids": sorted(x_shards.get(key_value, set()) & x_keep),
                "y_ids": sorted(y_shards.get(key_value, set()) & y_keep),
            }
        )
    return plan


def _stage_index(cfg: PipelineConfig, wd: Workdir) -> StageArtifact:
    x_store = knn.load_vectors(wd.path("vectors_x.pmv"))
    y_store = knn.load_vectors(wd.path("vectors_y.pmv"))
    plan = _shard_plan(cfg, wd)
    kind = str(cfg["index.kind"])
    seed = cfg.seeds()["index"]
    outputs = ["shards.json"]
    indexed = 0
    skipped_shards = 0
    for i, shard in enumerate(plan):
        if not shard["x_ids"] or not shard["y_ids"]:
            skipped_shards += 1
            continue
        for side, store, ids in (("x", x_store, shard["x_ids"]), ("y", y_store, shard["y_ids"])):
            sub = _sub_store(store, ids)
            nlist = min(int(cfg["index.nlist"]), len(sub)) if kind == knn.KIND_IVF else 0
            index = knn.build(sub, kind=kind, nlist=nlist, seed=seed + i)
            rel = f"index_{side}_{i}.pmix"
            with _atomic(wd.path(rel)) as tmp:
                knn.save_index(index, tmp)
            outputs.append(rel)
            indexed += len(sub)
    with _atomic(wd.path("shards.json")) as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(plan, fh, sort_keys=True)
            fh.write("\n")
    counters = {
        "records_in": indexed,
        "records_out": indexed,
        "filtered": 0,
        "degenerate": 0,
        "shards": len(plan),
        "skipped_shards": skipped_shards,
    }
    return _finish(wd, cfg, STAGE_INDEX, {}, outputs, counters)


def _overlap_predicate(task: str, x_corpus: CorpusHandle, y_corpus: CorpusHandle):
    """Drop rule from the task definition: answers already present verbatim in
    the question (RC), or summary sentences verbatim in the document."""

    def drop(x_id: int, y_id: int) -> bool:
        x = x_corpus.get(x_id)
        y = y_corpus.get(y_id)
        if x is None or y is None:
            return False
        if task == TASK_READING_COMPREHENSION:
            needle = y.answer_text() or ""
        else:
            needle = y.text
        return bool(needle) and verbatim_overlap(needle, x.text)

    return drop


def _stage_mine(cfg: PipelineConfig, wd: Workdir) -> StageArtifact:
    x_corpus, y_corpus = _load_corpora(wd)
    x_store = knn.load_vectors(wd.path("vectors_x.pmv"))
    y_store = knn.load_vectors(wd.path("vectors_y.pmv"))
    with open(wd.path("shards.json"), "r", encoding="utf-8") as fh:
        plan = json.load(fh)
    mcfg = cfg.margin_config()
    shard_cfg = MarginConfig(
        k=mcfg.k, top_per_input=mcfg.top_per_input, max_candidates=0, nprobe=mcfg.nprobe
    )
    drop = _overlap_predicate(cfg.task, x_corpus, y_corpus)

    merged: list[PairCandidate] = []
    counters = {
        "pairs_scored": 0,
        "overlap_filtered": 0,
        "degenerate": 0,
        "truncated_per_input": 0,
        "truncated_global": 0,
    }
    for i, shard in enumerate(plan):
        if not shard["x_ids"] or not shard["y_ids"]:
            continue
        sub_x = _sub_store(x_store, shard["x_ids"])
        sub_y = _sub_store(y_store, shard["y_ids"])
        x_index = knn.load_index(wd.path(f"index_x_{i}.pmix"), sub_x)
        y_index = knn.load_index(wd.path(f"index_y_{i}.pmix"), sub_y)
        result = miner.mine(sub_x, sub_y, x_index, y_index, shard_cfg, overlap_filter=drop)
        merged.extend(result.candidates)
        for key in ("pairs_scored", "overlap_filtered", "degenerate", "truncated_per_input"):
            counters[key] += result.counters[key]

    merged.sort(key=lambda c: (-c.margin, c.x_id, c.y_id))
    if mcfg.max_candidates and len(merged) > mcfg.max_candidates:
        counters["truncated_global"] = len(merged) - mcfg.max_candidates
        merged = merged[: mcfg.max_candidates]
    with _atomic(wd.path("candidates.jsonl")) as tmp:
        miner.save_candidates(merged, tmp)

    counters.update(
        {
            "records_in": counters["pairs_scored"],
            "records_out": len(merged),
            "filtered": counters["overlap_filtered"]
            + counters["truncated_per_input"]
            + counters["truncated_global"],
        }
    )
    return _finish(wd, cfg, STAGE_MINE, {}, ["candidates.jsonl"], counters)


def _feature_source(cfg: PipelineConfig, wd: Workdir) -> crossfilter.FeatureSource:
    x_corpus, y_corpus = _load_corpora(wd)
    model, _, _ = encoder.load_checkpoint(wd.path("biencoder.ckpt"))
    x_store = knn.load_vectors(wd.path("vectors_x.pmv"))
    y_store = knn.load_vectors(wd.path("vectors_y.pmv"))
    x_vecs = {int(i): v.astype(np.float64) for i, v in zip(x_store.ids, x_store.vectors)}
    y_vecs = {int(i): v.astype(np.float64) for i, v in zip(y_store.ids, y_store.vectors)}
    return crossfilter.FeatureSource(x_corpus, y_corpus, model, x_vecs, y_vecs)


def _stage_train_cross(cfg: PipelineConfig, wd: Workdir) -> StageArtifact:
    seed = read_seed(wd.path("seed.jsonl"), cfg.task)
    candidates = miner.load_candidates(wd.path("candidates.jsonl"))
    source = _feature_source(cfg, wd)
    cross_cfg = cfg.cross_train_config()
    hidden = int(cfg["cross.hidden"])
    mode = cfg.cross_mode()
    skipped = 0
    if mode == crossfilter.MODE_BINARY:
        if not candidates:
            raise MissingArtifactError("no mined candidates available as crossencoder negatives")
        rng = np.random.default_rng(cfg.seeds()["sampling"])
        negatives = crossfilter.sample_binary_negatives(
            candidates, len(seed), rng, per_positive=int(cfg["cross.negs_per_positive"])
        )
        result = crossfilter.train_binary(seed, negatives, source, cross_cfg, hidden=hidden)
    else:
        model, _, _ = encoder.load_checkpoint(wd.path("biencoder.ckpt"))
        y_store = knn.load_vectors(wd.path("vectors_y.pmv"))
        pre = _load_prefilter(wd)
        if pre["side"] == "y":
            y_store = _sub_store(y_store, pre["retained"])
        y_index = knn.build(y_store, kind=knn.KIND_EXACT)
        n_negs = int(cfg["cross.retrieval_negs"])
        _, y_corpus = _load_corpora(wd)

        def retrieve(x_record: Record) -> list[Record]:
            feats = encoder.featurize(corpus_mod.record_feature_text(x_record), model.num_buckets)
            query = knn.VectorStore(
                ids=np.array([0], dtype=np.int64),
                vectors=encoder.embed(model, feats).astype(np.float32)[None, :],
            )
            hood = knn.search(y_index, query, k=min(n_negs + 2, len(y_store)))[0]
            return [y_corpus.get(yid) for yid in hood.neighbor_ids if y_corpus.get(yid) is not None]

        triples, skipped = crossfilter.build_rank_triples(seed, retrieve, negs_per_pos=n_negs)
        result = crossfilter.train_pairwise(triples, source, cross_cfg, hidden=hidden)

    meta = {
        "loss_trace": result.loss_trace,
        "mode": mode,
        "hidden": hidden,
        "steps": cross_cfg.steps,
        "learning_rate": cross_cfg.learning_rate,
        "rng_seed": cross_cfg.rng_seed,
    }
    with _atomic(wd.path("crossmodel.ckpt")) as tmp:
        crossfilter.save_cross_checkpoint(result.model, tmp, meta)
        os.replace(tmp + ".meta.json", wd.path("crossmodel.ckpt.meta.json"))
    counters = {
        "records_in": len(seed),
        "records_out": len(seed) - skipped,
        "filtered": skipped,
        "degenerate": 0,
    }
    return _finish(
        wd, cfg, STAGE_TRAIN_CROSS, {}, ["crossmodel.ckpt", "crossmodel.ckpt.meta.json"], counters
    )


def _stage_filter(cfg: PipelineConfig, wd: Workdir) -> StageArtifact:
    candidates = miner.load_candidates(wd.path("candidates.jsonl"))
    model = crossfilter.load_cross_checkpoint(wd.path("crossmodel.ckpt"))
    source = _feature_source(cfg, wd)
    top_n = int(cfg["final_top_n"])
    reranked = crossfilter.rerank(model, candidates, source, top_n=top_n)
    with _atomic(wd.path("reranked.jsonl")) as tmp:
        miner.save_candidates(reranked, tmp)
    counters = {
        "records_in": len(candidates),
        "records_out": len(reranked),
        "filtered": len(candidates) - len(reranked),
        "degenerate": 0,
    }
    return _finish(wd, cfg, STAGE_FILTER, {}, ["reranked.jsonl"], counters)


# --- mined dataset ---------------------------------------------------------------


@dataclass
class MinedPair:
    x: Record
    y: Record
    cosine: float
    margin: float
    cross_score: float | None
    stage: str
    rank: int
    mined: bool = True


@dataclass
class MinedDataset:
    """Final ranked mined pairs plus provenance for the downstream trainer."""

    entries: list[MinedPair]
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)


def build_dataset(
    candidates: list[PairCandidate], x_corpus: CorpusHandle, y_corpus: CorpusHandle, manifest: dict | None = None
) -> MinedDataset:
    entries = []
    for rank, c in enumerate(candidates, start=1):
        x = x_corpus.get(c.x_id)
        y = y_corpus.get(c.y_id)
        if x is None:
            raise CorpusFormatError(f"candidate references unknown input id {c.x_id}")
        if y is None:
            raise CorpusFormatError(f"candidate references unknown output id {c.y_id}")
        entries.append(
            MinedPair(
                x=x,
                y=y,
                cosine=c.cosine,
                margin=c.margin,
                cross_score=c.cross_score,
                stage=c.stage,
                rank=rank,
            )
        )
    return MinedDataset(entries=entries, manifest=manifest or {})


def export(ds: MinedDataset, path: str, fmt: str = "jsonl") -> None:
    """Write the mined dataset: one JSON object per pair, stable field order,
    every line carrying ``mined: true`` so a downstream trainer can mark
    mined examples."""
    if fmt != "jsonl":
        raise ConfigError(f"unsupported export format {fmt!r}")
    if not ds.entries:
        raise ConfigError("cannot export an empty mined dataset")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for entry in ds.entries:
            obj: dict[str, object] = {"x_text": entry.x.text, "y_text": entry.y.text}
            span = entry.y.meta.get("answer_span")
            if span is not None:
                obj["answer_span"] = span
            obj["cosine"] = entry.cosine
            obj["margin"] = entry.margin
            obj["cross_score"] = entry.cross_score
            obj["mined"] = True
            obj["rank"] = entry.rank
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_export(path: str) -> MinedDataset:
    """Parse an exported dataset back into records (ids are positional)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read export file {path}: {exc}") from exc
    entries = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"{path}: malformed JSON on line {lineno}: {exc}") from exc
        idx = len(entries)
        y_meta = {}
        if "answer_span" in obj:
            y_meta["answer_span"] = str(obj["answer_span"])
        entries.append(
            MinedPair(
                x=Record(id=idx, text=str(obj["x_text"]), side=SIDE_INPUT),
                y=Record(id=idx, text=str(obj["y_text"]), side=SIDE_OUTPUT, meta=y_meta),
                cosine=float(obj["cosine"]),
                margin=float(obj["margin"]),
                cross_score=None if obj.get("cross_score") is None else float(obj["cross_score"]),
                stage=miner.STAGE_CROSSENCODER if obj.get("cross_score") is not None else miner.STAGE_BIENCODER,
                rank=int(obj["rank"]),
            )
        )
    return MinedDataset(entries=entries)


def _stage_export(cfg: PipelineConfig, wd: Workdir) -> StageArtifact:
    x_corpus, y_corpus = _load_corpora(wd)
    reranked = miner.load_candidates(wd.path("reranked.jsonl"))
    manifest = {"config_hash": cfg.config_hash(), "pairs": len(reranked)}
    ds = build_dataset(reranked, x_corpus, y_corpus, manifest)
    with _atomic(wd.path("mined.jsonl")) as tmp:
        export(ds, tmp)
    counters = {
        "records_in": len(reranked),
        "records_out": len(ds),
        "filtered": 0,
        "degenerate": 0,
    }
    return _finish(wd, cfg, STAGE_EXPORT, {}, ["mined.jsonl"], counters)


_STAGE_FNS = {
    STAGE_INGEST: _stage_ingest,
    STAGE_TRAIN: _stage_train,
    STAGE_EMBED: _stage_embed,
    STAGE_INDEX: _stage_index,
    STAGE_MINE: _stage_mine,
    STAGE_TRAIN_CROSS: _stage_train_cross,
    STAGE_FILTER: _stage_filter,
    STAGE_EXPORT: _stage_export,
}


def run_stage(cfg: PipelineConfig, stage: str) -> StageArtifact:
    """Run one pipeline stage against the configured work directory.

    Upstream artifacts must exist and match the current configuration hash;
    outputs are written atomically and recorded in the manifest.
    """
    if stage not in _STAGE_FNS:
        raise ConfigError(f"unknown stage {stage!r}; stages are {', '.join(STAGES)}")
    wd = Workdir(cfg.workdir)
    wd.check_upstream(stage, cfg.config_hash())
    logger.info("running stage %s in %s", stage, cfg.workdir)
    return _STAGE_FNS[stage](cfg, wd)


def run_all(cfg: PipelineConfig) -> list[StageArtifact]:
    """Run every stage in order; equivalent to running them separately."""
    return [run_stage(cfg, stage) for stage in STAGES]


# --- evaluation --------------------------------------------------------------------


@dataclass
class Metrics:
    """Recall@k per input and precision@N over the global ranking, exact."""

    recall_at: dict[int, Fraction]
    precision_at: dict[int, Fraction]

    def to_json(self) -> dict:
        return {
            "recall_at": {
                str(k): {"value": float(v), "exact": f"{v.numerator}/{v.denominator}"}
                for k, v in sorted(self.recall_at.items())
            },
            "precision_at": {
                str(k): {"value": float(v), "exact": f"{v.numerator}/{v.denominator}"}
                for k, v in sorted(self.precision_at.items())
            },
        }


def evaluate(pairs: list[PairCandidate], gold: GoldPairs, ks: list[int]) -> Metrics:
    """Score a ranked candidate list against planted gold pairs.

    recall@k: fraction of gold inputs whose gold output appears within the
    input's top-k candidates (list order restricted to that input).
    precision@N: fraction of the top-N global candidates that are gold pairs.
    """
    if not gold.pairs:
        raise ConfigError("gold pair set is empty")
    if not ks:
        raise ConfigError("ks must be non-empty")
    per_input: dict[int, list[int]] = {}
    for c in pairs:
        per_input.setdefault(c.x_id, []).append(c.y_id)

    recall_at: dict[int, Fraction] = {}
    for k in ks:
        hits = sum(
            1 for x_id, y_id in gold.pairs.items() if y_id in per_input.get(x_id, [])[:k]
        )
        recall_at[k] = Fraction(hits, len(gold.pairs))

    gold_set = set(gold.pairs.items())
    precision_at: dict[int, Fraction] = {}
    for n in ks:
        top = pairs[:n]
        hits = sum(1 for c in top if (c.x_id, c.y_id) in gold_set)
        precision_at[n] = Fraction(hits, n) if n else Fraction(0)
    return Metrics(recall_at=recall_at, precision_at=precision_at)
