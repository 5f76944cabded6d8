"""Second-stage reordering of retrieval candidates.

Two backends: a remote cross-encoder scoring service, and a deterministic
lexical-overlap baseline so the rerank path is exercisable offline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .errors import RemoteServiceError
from .remote import post_json_with_retries
from .retrieval import RankedList, RankEntry, tokenize

logger = logging.getLogger(__name__)

FAILURE_ABORT = "abort-iteration"
FAILURE_PASS_THROUGH = "pass-through-unranked"


class LexicalOverlapBackend:
    """Scores a passage by the fraction of query terms it covers."""

    name = "lexical-overlap"

    def score(self, query: str, passages: list[str]) -> list[float]:
        query_terms = set(tokenize(query))
        if not query_terms:
            return [0.0 for _ in passages]
        scores = []
        for passage in passages:
            terms = set(tokenize(passage))
            scores.append(len(query_terms & terms) / len(query_terms))
        return scores


class RemoteScorerBackend:
    """Client for a cross-encoder scoring endpoint.

    POST {"query": ..., "passages": [...]} and expects either a bare JSON
    array of floats or {"scores": [...]}.
    """

    def __init__(self, endpoint: str, model: str = "", batch_size: int = 32,
                 timeout: float = 30.0, retries: int = 3, backoff: float = 1.0,
                 api_key: str | None = None):
        self.name = f"remote-scorer:{model or endpoint}"
        self.endpoint = endpoint
        self.model = model
        self.batch_size = batch_size
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.api_key = api_key

    def score(self, query: str, passages: list[str]) -> list[float]:
        scores: list[float] = []
        for start in range(0, len(passages), self.batch_size):
            batch = passages[start:start + self.batch_size]
            payload = {"query": query, "passages": batch}
            if self.model:
                payload["model"] = self.model
            reply = post_json_with_retries(
                self.endpoint, payload, timeout=self.timeout,
                retries=self.retries, backoff=self.backoff, api_key=self.api_key)
            if isinstance(reply, dict):
                reply = reply.get("scores")
            if not isinstance(reply, list) or len(reply) != len(batch):
                raise RemoteServiceError(
                    f"malformed scorer reply from {self.endpoint}")
            scores.extend(float(s) for s in reply)
        return scores


@dataclass
class RerankOutcome:
    ranked: RankedList
    passed_through: bool = False


def rerank(backend, query: str, candidates: RankedList, depth: int,
           texts: dict[str, str] | None = None, get_text=None,
           failure_policy: str = FAILURE_ABORT) -> RerankOutcome:
    """Reorder the first `depth` candidates by backend score, descending.

    Equal scores keep their original relative order; candidates beyond
    `depth` are appended untouched. Ranks are renumbered consecutively.
    On remote failure the configured policy either re-raises or passes the
    input through unchanged (flagged in the outcome).
    """
    if depth < 1:
        raise ValueError("rerank depth must be >= 1")
    if get_text is None:
        if texts is None:
            raise ValueError("rerank needs document texts")
        get_text = texts.__getitem__
    head = candidates.entries[:depth]
    tail = candidates.entries[depth:]
    passages = [get_text(e.doc_id) for e in head]
    try:
        scores = backend.score(query, passages)
    except RemoteServiceError:
        if failure_policy == FAILURE_PASS_THROUGH:
            logger.warning("rerank backend failed for query %r; passing "
                           "candidates through unranked", candidates.query_id)
            return RerankOutcome(ranked=candidates, passed_through=True)
        raise
    order = sorted(range(len(head)), key=lambda i: (-scores[i], i))
    reordered = [head[i] for i in order] + tail
    entries = [RankEntry(e.doc_id, (scores[order[pos]] if pos < len(head)
                                    else e.score), pos + 1)
               for pos, e in enumerate(reordered)]
    # scores for the untouched tail keep their retrieval values; the head
    # carries backend scores, so cross-section score comparison is not
    # meaningful and the list is ordered by construction.
    ranked = RankedList(query_id=candidates.query_id,
                        iteration=candidates.iteration, entries=entries)
    return RerankOutcome(ranked=ranked)
