"""Retrieval backends: an incrementally updatable BM25 index and an exact
brute-force dense index.

Scoring constants are pinned (k1=1.2, b=0.75, log1p IDF) so that ranked
lists are exactly reproducible; incremental additions yield bit-identical
results to a full rebuild over the same documents.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .corpus import Document
from .errors import RemoteServiceError
from .remote import post_json_with_retries

BM25_K1 = 1.2
BM25_B = 0.75

# Unicode word characters minus underscore; punctuation splits tokens.
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; punctuation dropped, no stemming or stopwords."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class RankEntry:
    doc_id: str
    score: float
    rank: int

    def to_list(self) -> list:
        return [self.doc_id, self.score, self.rank]


@dataclass
class RankedList:
    """Ordered retrieval result for one query at one iteration."""

    query_id: str
    iteration: int
    entries: list[RankEntry] = field(default_factory=list)

    def doc_ids(self) -> list[str]:
        return [e.doc_id for e in self.entries]

    def top(self, k: int) -> list[RankEntry]:
        return self.entries[:k]

    def validate(self) -> None:
        seen: set[str] = set()
        prev_score = math.inf
        for i, e in enumerate(self.entries, start=1):
            if e.rank != i:
                raise ValueError(f"ranks must be consecutive from 1, got {e.rank} at {i}")
            if e.score > prev_score:
                raise ValueError("scores must be non-increasing by rank")
            if e.doc_id in seen:
                raise ValueError(f"duplicate doc_id {e.doc_id!r} in ranked list")
            seen.add(e.doc_id)
            prev_score = e.score

    @classmethod
    def from_ordered(cls, query_id: str, iteration: int,
                     pairs: list[tuple[str, float]]) -> "RankedList":
        entries = [RankEntry(doc_id, float(score), rank)
                   for rank, (doc_id, score) in enumerate(pairs, start=1)]
        return cls(query_id=query_id, iteration=iteration, entries=entries)

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "iteration": self.iteration,
            "entries": [e.to_list() for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RankedList":
        entries = [RankEntry(doc_id, float(score), int(rank))
                   for doc_id, score, rank in d["entries"]]
        return cls(query_id=d["query_id"], iteration=int(d["iteration"]),
                   entries=entries)


class InvertedIndex:
    """BM25 inverted index supporting single-writer incremental additions.

    Documents are indexed by insertion order; the public interface speaks
    doc_id strings. Searches are read-only and safe to run concurrently
    between additions.
    """

    def __init__(self, k1: float = BM25_K1, b: float = BM25_B):
        self.k1 = k1
        self.b = b
        self.postings: dict[str, list[tuple[int, int]]] = {}
        self.doc_ids: list[str] = []
        self._idx_of: dict[str, int] = {}
        self.doc_lengths: list[int] = []
        self.total_length = 0
        # caches rebuilt lazily after each mutation
        self._postings_arrays: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._lengths_array: np.ndarray | None = None
        self._id_rank: np.ndarray | None = None

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    @property
    def avg_doc_length(self) -> float:
        return self.total_length / self.doc_count if self.doc_count else 0.0

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._idx_of

    def add(self, docs: list[Document]) -> None:
        for doc in docs:
            if doc.doc_id in self._idx_of:
                raise ValueError(f"doc_id {doc.doc_id!r} already indexed")
        for doc in docs:
            idx = len(self.doc_ids)
            self._idx_of[doc.doc_id] = idx
            self.doc_ids.append(doc.doc_id)
            tokens = tokenize(doc.text)
            self.doc_lengths.append(len(tokens))
            self.total_length += len(tokens)
            tf: dict[str, int] = {}
            for t in tokens:
                tf[t] = tf.get(t, 0) + 1
            for term, count in tf.items():
                self.postings.setdefault(term, []).append((idx, count))
        if docs:
            self._postings_arrays.clear()
            self._lengths_array = None
            self._id_rank = None

    def _ensure_caches(self) -> None:
        if self._lengths_array is None:
            self._lengths_array = np.asarray(self.doc_lengths, dtype=np.float64)
        if self._id_rank is None:
            order = sorted(range(len(self.doc_ids)), key=lambda i: self.doc_ids[i])
            id_rank = np.empty(len(order), dtype=np.int64)
            for rank, idx in enumerate(order):
                id_rank[idx] = rank
            self._id_rank = id_rank

    def _term_arrays(self, term: str) -> tuple[np.ndarray, np.ndarray] | None:
        cached = self._postings_arrays.get(term)
        if cached is not None:
            return cached
        plist = self.postings.get(term)
        if not plist:
            return None
        idxs = np.fromiter((p[0] for p in plist), dtype=np.int64, count=len(plist))
        tfs = np.fromiter((p[1] for p in plist), dtype=np.float64, count=len(plist))
        self._postings_arrays[term] = (idxs, tfs)
        return idxs, tfs

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))

    def search(self, query: str, k: int) -> list[tuple[str, float]]:
        """Top-k (doc_id, BM25 score), ties broken by doc_id ascending.

        Zero-scoring documents are never returned, so fewer than k results
        are possible.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        terms = tokenize(query)
        if not terms or not self.doc_count:
            return []
        self._ensure_caches()
        lengths = self._lengths_array
        avgdl = self.avg_doc_length
        norm = self.k1 * (1.0 - self.b + self.b * lengths / avgdl)
        scores = np.zeros(self.doc_count, dtype=np.float64)
        matched = np.zeros(self.doc_count, dtype=bool)
        for term in terms:
            arrs = self._term_arrays(term)
            if arrs is None:
                continue
            idxs, tfs = arrs
            idf = self.idf(term)
            scores[idxs] += idf * tfs / (tfs + norm[idxs])
            matched[idxs] = True
        hit_idxs = np.nonzero(matched)[0]
        if hit_idxs.size == 0:
            return []
        # sort by descending score, then lexicographic doc_id
        order = np.lexsort((self._id_rank[hit_idxs], -scores[hit_idxs]))
        top = hit_idxs[order[:k]]
        return [(self.doc_ids[i], float(scores[i])) for i in top]


def build_index(docs: list[Document], k1: float = BM25_K1,
                b: float = BM25_B) -> InvertedIndex:
    index = InvertedIndex(k1=k1, b=b)
    index.add(docs)
    return index


def index_add(index: InvertedIndex, docs: list[Document]) -> InvertedIndex:
    """Add documents in place; result equals a rebuild over the union."""
    index.add(docs)
    return index


def search_bm25(index: InvertedIndex, query: str, k: int,
                query_id: str = "", iteration: int = 0) -> RankedList:
    return RankedList.from_ordered(query_id, iteration, index.search(query, k))


class HashedEmbedder:
    """Offline embedding stub: hashed bag-of-words with seeded signs.

    Each token hashes to one of `dim` buckets with a +/-1 sign; the count
    vector is L2-normalized. Deterministic for a given seed, so dense
    pipelines run with no network.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        return [self._embed_one(t) for t in texts]

    def _embed_one(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in tokenize(text):
            digest = hashlib.sha256(f"{self.seed}:{token}".encode("utf-8")).digest()
            bucket = int.from_bytes(digest[:8], "big") % self.dim
            sign = 1.0 if digest[8] & 1 else -1.0
            vec[bucket] += sign
        norm = float(np.linalg.norm(vec))
        if norm > 0.0:
            vec /= norm
        return vec


class RemoteEmbeddingClient:
    """Client for an embeddings HTTP endpoint.

    POST {"model": ..., "input": [texts]} and expects the conventional
    {"data": [{"embedding": [...]}, ...]} reply.
    """

    def __init__(self, endpoint: str, model: str, timeout: float = 30.0,
                 retries: int = 3, backoff: float = 1.0,
                 api_key: str | None = None):
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.api_key = api_key

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        payload = {"model": self.model, "input": list(texts)}
        reply = post_json_with_retries(
            self.endpoint, payload, timeout=self.timeout, retries=self.retries,
            backoff=self.backoff, api_key=self.api_key)
        try:
            rows = reply["data"]
            vectors = [np.asarray(row["embedding"], dtype=np.float64) for row in rows]
        except (KeyError, TypeError) as exc:
            raise RemoteServiceError(
                f"malformed embeddings reply from {self.endpoint}: {exc}") from exc
        if len(vectors) != len(texts):
            raise RemoteServiceError(
                f"embeddings reply has {len(vectors)} rows for {len(texts)} inputs")
        return vectors


class VectorIndex:
    """Exact brute-force cosine-similarity index."""

    def __init__(self, dim: int | None = None, backend: str = "stub"):
        self.dim = dim
        self.backend = backend
        self.doc_ids: list[str] = []
        self._idx_of: dict[str, int] = {}
        self._vectors: list[np.ndarray] = []
        self._matrix: np.ndarray | None = None
        self._norms: np.ndarray | None = None
        self._id_rank: np.ndarray | None = None

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._idx_of

    def add_vectors(self, items: list[tuple[str, np.ndarray]]) -> None:
        for doc_id, vec in items:
            if doc_id in self._idx_of:
                raise ValueError(f"doc_id {doc_id!r} already indexed")
            vec = np.asarray(vec, dtype=np.float64)
            if vec.ndim != 1:
                raise ValueError("embeddings must be 1-d vectors")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"non-finite embedding for {doc_id!r}")
            if self.dim is None:
                self.dim = int(vec.shape[0])
            elif vec.shape[0] != self.dim:
                raise ValueError(
                    f"dimension mismatch for {doc_id!r}: got {vec.shape[0]}, "
                    f"index dimension is {self.dim}")
            self._idx_of[doc_id] = len(self.doc_ids)
            self.doc_ids.append(doc_id)
            self._vectors.append(vec)
        if items:
            self._matrix = None
            self._norms = None
            self._id_rank = None

    def add_documents(self, docs: list[Document], embedder) -> None:
        vectors = embedder.embed([d.text for d in docs])
        self.add_vectors(list(zip([d.doc_id for d in docs], vectors)))

    def _ensure_caches(self) -> None:
        if self._matrix is None:
            self._matrix = np.vstack(self._vectors) if self._vectors else \
                np.zeros((0, self.dim or 0))
            self._norms = np.linalg.norm(self._matrix, axis=1)
        if self._id_rank is None:
            order = sorted(range(len(self.doc_ids)), key=lambda i: self.doc_ids[i])
            id_rank = np.empty(len(order), dtype=np.int64)
            for rank, idx in enumerate(order):
                id_rank[idx] = rank
            self._id_rank = id_rank

    def search_vector(self, query_vec: np.ndarray, k: int) -> list[tuple[str, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        if not self.doc_count:
            return []
        query_vec = np.asarray(query_vec, dtype=np.float64)
        if query_vec.shape != (self.dim,):
            raise ValueError(
                f"query dimension {query_vec.shape} does not match index ({self.dim},)")
        self._ensure_caches()
        qnorm = float(np.linalg.norm(query_vec))
        if qnorm == 0.0:
            sims = np.zeros(self.doc_count, dtype=np.float64)
        else:
            denom = self._norms * qnorm
            dots = self._matrix @ query_vec
            sims = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
        order = np.lexsort((self._id_rank, -sims))
        top = order[:k]
        return [(self.doc_ids[i], float(sims[i])) for i in top]


def search_dense(vindex: VectorIndex, query: str, k: int, embedder,
                 query_id: str = "", iteration: int = 0) -> RankedList:
    """Top-k by exact cosine similarity using the given embedding client."""
    query_vec = embedder.embed([query])[0]
    return RankedList.from_ordered(query_id, iteration,
                                   vindex.search_vector(query_vec, k))
