"""Exact and inverted-file top-k cosine search over unit-vector stores.

Vectors are stored as little-endian f32 rows (file magic ``PMV1``), validated
to unit norm on load. Scoring upcasts to f64 and reduces each row with the
same elementwise kernel in every code path, so an IVF search probing all
lists returns bit-identical results to exact search and ties can be broken
purely by ascending id.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CorpusFormatError, DimensionMismatchError

logger = logging.getLogger(__name__)

VECTOR_MAGIC = b"PMV1"
INDEX_MAGIC = b"PMIX"
INDEX_VERSION = 1

KIND_EXACT = "exact"
KIND_IVF = "ivf"

_SCORE_BLOCK = 131072  # rows per scoring block, keeps temporaries ~32 MiB


@dataclass
class VectorStore:
    """Parallel (ids, unit-vector rows) arrays; rows are float32."""

    ids: np.ndarray  # (n,) int64
    vectors: np.ndarray  # (n, dim) float32
    renormalized: int = 0

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.ids.shape[0] != self.vectors.shape[0]:
            raise DimensionMismatchError("ids and vectors disagree on count")
        if len(np.unique(self.ids)) != len(self.ids):
            raise CorpusFormatError("duplicate ids in vector store")
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        off = np.abs(norms - 1.0) > 1e-4
        if off.any():
            n_off = int(off.sum())
            logger.warning("renormalizing %d vector rows with norm off by >1e-4", n_off)
            nz = norms > 0
            fix = off & nz
            self.vectors[fix] = (self.vectors[fix].astype(np.float64) / norms[fix, None]).astype(np.float32)
            self.renormalized = n_off

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def save_vectors(store: VectorStore, path: str) -> None:
    """Bit-exact vector file: magic, u32 dim, u64 count, u64 ids, f32 rows."""
    with open(path, "wb") as fh:
        fh.write(VECTOR_MAGIC)
        fh.write(struct.pack("<IQ", store.dim, len(store)))
        fh.write(store.ids.astype("<u8").tobytes(order="C"))
        fh.write(store.vectors.astype("<f4").tobytes(order="C"))


def load_vectors(path: str) -> VectorStore:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read vector file {path}: {exc}") from exc
    if blob[:4] != VECTOR_MAGIC:
        raise CorpusFormatError(f"{path}: not a vector file (bad magic)")
    dim, count = struct.unpack_from("<IQ", blob, 4)
    off = 16
    ids = np.frombuffer(blob, dtype="<u8", count=count, offset=off).astype(np.int64)
    off += 8 * count
    vectors = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=off).reshape(count, dim)
    return VectorStore(ids=ids, vectors=vectors.copy())


@dataclass
class Neighborhood:
    """Top-k neighbors of one query: cosines descending, ties by ascending id."""

    query_id: int
    neighbor_ids: list[int]
    cosines: list[float]


def _score_rows(rows64: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Per-row dot products in f64 with a fixed reduction order.

    Elementwise multiply + axis reduction (not BLAS) so the result for a row
    never depends on which other rows are scored alongside it.
    """
    return (rows64 * query).sum(axis=1)


def _top_k(scores: np.ndarray, ids: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((ids, -scores))[:k]
    return ids[order], scores[order]


@dataclass
class ExactIndex:
    store: VectorStore
    _rows64: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._rows64 = self.store.vectors.astype(np.float64)

    def search_one(self, query: np.ndarray, k: int, nprobe: int = 0) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(query, dtype=np.float64)
        scores = _score_rows(self._rows64, q)
        return _top_k(scores, self.store.ids, k)


@dataclass
class IvfIndex:
    """k-means coarse quantizer over the store with inverted member lists."""

    store: VectorStore
    centroids: np.ndarray  # (nlist, dim) float64
    assignments: np.ndarray  # (n,) int32 list index per row
    kmeans_seed: int
    _rows64: np.ndarray = field(init=False, repr=False)
    _lists: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._rows64 = self.store.vectors.astype(np.float64)
        nlist = self.centroids.shape[0]
        self._lists = [np.flatnonzero(self.assignments == i) for i in range(nlist)]

    @property
    def nlist(self) -> int:
        return self.centroids.shape[0]

    def search_one(self, query: np.ndarray, k: int, nprobe: int) -> tuple[np.ndarray, np.ndarray]:
        if not 1 <= nprobe <= self.nlist:
            raise ConfigError(f"nprobe must be in [1, {self.nlist}], got {nprobe}")
        q = np.asarray(query, dtype=np.float64)
        d2 = np.sum(self.centroids * self.centroids, axis=1) - 2.0 * (self.centroids @ q)
        probe = np.lexsort((np.arange(self.nlist), d2))[:nprobe]
        positions = np.sort(np.concatenate([self._lists[int(p)] for p in probe]))
        if positions.size == 0:
            return np.array([], dtype=np.int64), np.array([], dtype=np.float64)
        scores = _score_rows(self._rows64[positions], q)
        return _top_k(scores, self.store.ids[positions], k)


Index = ExactIndex | IvfIndex


def _kmeans(rows64: np.ndarray, nlist: int, seed: int, iterations: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with seeded random-point init; empty clusters are
    re-seeded from the largest cluster's farthest member."""
    n = rows64.shape[0]
    rng = np.random.default_rng(seed)
    centroids = rows64[rng.choice(n, size=nlist, replace=False)].copy()
    assignments = np.zeros(n, dtype=np.int32)
    for _ in range(iterations):
        d2 = (
            np.sum(rows64 * rows64, axis=1)[:, None]
            - 2.0 * (rows64 @ centroids.T)
            + np.sum(centroids * centroids, axis=1)[None, :]
        )
        assignments = np.argmin(d2, axis=1).astype(np.int32)
        counts = np.bincount(assignments, minlength=nlist)
        for empty in np.flatnonzero(counts == 0):
            largest = int(np.argmax(counts))
            members = np.flatnonzero(assignments == largest)
            dist = d2[members, largest]
            far = members[int(np.argmax(dist))]
            centroids[empty] = rows64[far]
            assignments[far] = empty
            counts[largest] -= 1
            counts[empty] += 1
        for c in range(nlist):
            members = np.flatnonzero(assignments == c)
            if members.size:
                centroids[c] = rows64[members].mean(axis=0)
    # Final pass so inverted lists agree with the returned centroids.
    d2 = (
        np.sum(rows64 * rows64, axis=1)[:, None]
        - 2.0 * (rows64 @ centroids.T)
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    assignments = np.argmin(d2, axis=1).astype(np.int32)
    return centroids, assignments


def build(store: VectorStore, kind: str = KIND_EXACT, nlist: int = 0, seed: int = 0) -> Index:
    """Build a searchable index over a store.

    ``exact`` wraps the store; ``ivf`` runs a fixed 20-iteration seeded
    k-means coarse quantizer (requires 1 <= nlist <= len(store)).
    """
    if len(store) == 0:
        raise ConfigError("cannot build an index over an empty store")
    if kind == KIND_EXACT:
        return ExactIndex(store=store)
    if kind == KIND_IVF:
        if not 1 <= nlist <= len(store):
            raise ConfigError(f"nlist must be in [1, {len(store)}], got {nlist}")
        centroids, assignments = _kmeans(store.vectors.astype(np.float64), nlist, seed)
        return IvfIndex(store=store, centroids=centroids, assignments=assignments, kmeans_seed=seed)
    raise ConfigError(f"unknown index kind {kind!r}")


def search(index: Index, queries: VectorStore, k: int, nprobe: int = 1) -> list[Neighborhood]:
    """True top-k by cosine for every query, deterministic tie-breaking by id.

    For IVF only the ``nprobe`` nearest inverted lists are scanned;
    ``nprobe == nlist`` reproduces exact search bit-for-bit.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if queries.dim != index.store.dim:
        raise DimensionMismatchError(
            f"query dim {queries.dim} does not match index dim {index.store.dim}"
        )
    out = []
    for qid, row in zip(queries.ids, queries.vectors):
        ids, scores = index.search_one(row, k, nprobe)
        out.append(
            Neighborhood(
                query_id=int(qid),
                neighbor_ids=[int(i) for i in ids],
                cosines=[float(s) for s in scores],
            )
        )
    return out


def save_index(index: Index, path: str) -> None:
    """Deterministic binary index artifact (magic PMIX)."""
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        if isinstance(index, ExactIndex):
            fh.write(struct.pack("<IBQ", INDEX_VERSION, 0, 0))
            return
        fh.write(struct.pack("<IBQ", INDEX_VERSION, 1, index.kmeans_seed))
        nlist, dim = index.centroids.shape
        fh.write(struct.pack("<IIQ", nlist, dim, len(index.store)))
        fh.write(index.centroids.astype("<f8").tobytes(order="C"))
        fh.write(index.assignments.astype("<i4").tobytes(order="C"))


def load_index(path: str, store: VectorStore) -> Index:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read index file {path}: {exc}") from exc
    if blob[:4] != INDEX_MAGIC:
        raise CorpusFormatError(f"{path}: not an index file (bad magic)")
    version, kind_byte, seed = struct.unpack_from("<IBQ", blob, 4)
    if version != INDEX_VERSION:
        raise CorpusFormatError(f"{path}: unsupported index version {version}")
    if kind_byte == 0:
        return ExactIndex(store=store)
    off = 4 + struct.calcsize("<IBQ")
    nlist, dim, count = struct.unpack_from("<IIQ", blob, off)
    off += struct.calcsize("<IIQ")
    if count != len(store) or dim != store.dim:
        raise CorpusFormatError(f"{path}: index shape does not match the vector store")
    centroids = np.frombuffer(blob, dtype="<f8", count=nlist * dim, offset=off).reshape(nlist, dim)
    off += 8 * nlist * dim
    assignments = np.frombuffer(blob, dtype="<i4", count=count, offset=off).astype(np.int32)
    return IvfIndex(store=store, centroids=centroids.copy(), assignments=assignments, kmeans_seed=seed)
