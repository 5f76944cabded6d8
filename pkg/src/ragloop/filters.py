"""Context-selection filters applied to retrieval results.

Two mitigation strategies: keep only documents a detector labels as
human-written, or greedily rebuild the context set until its n-gram
self-similarity drops under a threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .corpus import CorpusSnapshot
from .errors import RemoteServiceError
from .generation import DEFAULT_STYLE_MARKER
from .metrics import self_bleu
from .remote import post_json_with_retries
from .retrieval import RankEntry, RankedList

logger = logging.getLogger(__name__)

DIVERSITY_THRESHOLD = 0.4
CONTEXT_WINDOW = 5


class MarkerStubDetector:
    """Offline classifier: a document is generated iff it carries the
    synthetic style marker."""

    def __init__(self, marker: str = DEFAULT_STYLE_MARKER):
        self.marker = marker.lower()

    def classify(self, texts: list[str]) -> list[bool]:
        """True = generated, False = human."""
        return [self.marker in t.lower() for t in texts]


class RemoteDetectorClient:
    """Client for an AIGC-detection endpoint.

    POST {"texts": [...]} and expects {"results": [{"label": ...,
    "score": ...}, ...]}; a document counts as generated when the implied
    probability of machine origin reaches 0.5.
    """

    def __init__(self, endpoint: str, model: str = "", timeout: float = 30.0,
                 retries: int = 3, backoff: float = 1.0,
                 api_key: str | None = None, threshold: float = 0.5):
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.api_key = api_key
        self.threshold = threshold

    def classify(self, texts: list[str]) -> list[bool]:
        payload: dict = {"texts": list(texts)}
        if self.model:
            payload["model"] = self.model
        reply = post_json_with_retries(
            self.endpoint, payload, timeout=self.timeout, retries=self.retries,
            backoff=self.backoff, api_key=self.api_key)
        if isinstance(reply, dict):
            reply = reply.get("results")
        if not isinstance(reply, list) or len(reply) != len(texts):
            raise RemoteServiceError(f"malformed detector reply from {self.endpoint}")
        labels: list[bool] = []
        for row in reply:
            label = str(row.get("label", "")).lower()
            score = float(row.get("score", 1.0))
            p_generated = score if label == "generated" else 1.0 - score
            labels.append(p_generated >= self.threshold)
        return labels


@dataclass
class FilterResult:
    """Documents chosen as generation contexts, with outcome flags."""

    entries: list[RankEntry]
    shortfall: bool = False
    exhausted: bool = False
    fallback_unfiltered: bool = False
    removals: int = 0

    def doc_ids(self) -> list[str]:
        return [e.doc_id for e in self.entries]

    def flags(self) -> dict[str, bool]:
        return {"shortfall": self.shortfall, "exhausted": self.exhausted,
                "fallback_unfiltered": self.fallback_unfiltered}


def source_filter(candidates: RankedList, detector,
                  corpus: CorpusSnapshot, want: int = CONTEXT_WINDOW) -> FilterResult:
    """Scan candidates in rank order and keep the first `want` documents the
    detector labels human.

    If the whole candidate list yields fewer than `want`, all found are
    returned with the shortfall flag. Detector failure falls back to the
    unfiltered top-`want` with a logged flag.
    """
    entries = candidates.entries
    if not entries:
        return FilterResult(entries=[], shortfall=True)
    try:
        generated = detector.classify([corpus.get_text(e.doc_id) for e in entries])
    except RemoteServiceError as exc:
        logger.warning("detector failed for query %r (%s); falling back to "
                       "unfiltered top-%d", candidates.query_id, exc, want)
        return FilterResult(entries=list(entries[:want]), fallback_unfiltered=True)
    kept: list[RankEntry] = []
    for entry, is_generated in zip(entries, generated):
        if is_generated:
            continue
        kept.append(entry)
        if len(kept) == want:
            break
    return FilterResult(entries=kept, shortfall=len(kept) < want)


def _set_self_bleu(entries: list[RankEntry], texts: dict[str, str]) -> float:
    if len(entries) < 2:
        return 0.0
    return self_bleu([texts[e.doc_id] for e in entries])


def diversity_filter(candidates: RankedList, corpus: CorpusSnapshot,
                     threshold: float = DIVERSITY_THRESHOLD,
                     window: int = CONTEXT_WINDOW) -> FilterResult:
    """Greedy self-similarity reduction over the top-`window` candidates.

    While the working set scores above the threshold and unused candidates
    remain: score every leave-one-out subset, drop the document whose
    removal helps most (ties drop the worst-ranked), and pull in the next
    candidate. Stops at the first conforming set, or flags exhaustion.
    """
    entries = candidates.entries
    texts = {e.doc_id: corpus.get_text(e.doc_id) for e in entries}
    if len(entries) < window:
        return FilterResult(entries=list(entries), shortfall=True)
    working = list(entries[:window])
    next_idx = window
    removals = 0
    while _set_self_bleu(working, texts) > threshold:
        if next_idx >= len(entries):
            return FilterResult(entries=working, exhausted=True,
                                removals=removals)
        best_drop = None
        best_score = None
        for pos in range(len(working)):
            subset = working[:pos] + working[pos + 1:]
            score = _set_self_bleu(subset, texts)
            # ties prefer dropping the worst original rank
            if (best_score is None or score < best_score
                    or (score == best_score
                        and working[pos].rank > working[best_drop].rank)):
                best_score = score
                best_drop = pos
        working.pop(best_drop)
        working.append(entries[next_idx])
        next_idx += 1
        removals += 1
    return FilterResult(entries=working, removals=removals)
