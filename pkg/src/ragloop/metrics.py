"""Measurement machinery: retrieval accuracy, answer grading, dominance,
diversity, source shares, query-state transitions, rank tracking,
correlation, and paired significance."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import CorpusSnapshot, HUMAN
from .retrieval import RankedList, tokenize

_ARTICLES = {"a", "an", "the"}
_NORM_RE = re.compile(r"[^\W_]+", re.UNICODE)

BOOTSTRAP_RESAMPLES = 10_000


def normalize_answer(text: str) -> list[str]:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    return [t for t in _NORM_RE.findall(text.lower()) if t not in _ARTICLES]


def _contains_subsequence(haystack: list[str], needle: list[str]) -> bool:
    if not needle:
        return False
    n = len(needle)
    first = needle[0]
    for i in range(len(haystack) - n + 1):
        if haystack[i] == first and haystack[i:i + n] == needle:
            return True
    return False


def em(gold_answers: Sequence[str], text: str) -> int:
    """1 iff any normalized gold answer occurs contiguously in the text."""
    if not gold_answers:
        raise ValueError("em requires at least one gold answer")
    text_tokens = normalize_answer(text)
    for gold in gold_answers:
        if _contains_subsequence(text_tokens, normalize_answer(gold)):
            return 1
    return 0


def em_llm(contains: int, judge_verdict: str) -> int:
    """Conjunction of containment and the judge's support verdict."""
    return 1 if contains == 1 and judge_verdict == "yes" else 0


def acc_at_k(ranked: Sequence[RankedList], gold: Mapping[str, Sequence[str]],
             k: int, corpus: CorpusSnapshot) -> float:
    """Percentage of queries with a gold answer in some top-k document."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not ranked:
        return 0.0
    hits = 0
    for rl in ranked:
        if rl.query_id not in gold:
            raise ValueError(f"query {rl.query_id!r} has no gold answers")
        answers = gold[rl.query_id]
        for entry in rl.top(k):
            if em(answers, corpus.get_text(entry.doc_id)):
                hits += 1
                break
    return 100.0 * hits / len(ranked)


def dominance_p(ranked: Sequence[RankedList], corpus: CorpusSnapshot,
                k: int = 5) -> float:
    """Pooled share of generator-sourced documents among top-k slots."""
    llm = 0
    total = 0
    for rl in ranked:
        for entry in rl.top(k):
            source = corpus.source_of(entry.doc_id)
            total += 1
            if source.kind != HUMAN:
                llm += 1
    if total == 0:
        return 0.0
    return 100.0 * llm / total


def source_share(ranked: Sequence[RankedList], corpus: CorpusSnapshot,
                 top_n: int = 50) -> dict[str, float]:
    """Per-source percentage of all pooled top-n slots across queries.

    Lists shorter than top_n contribute only their actual slots, so the
    shares always sum to 100.
    """
    counts: Counter[str] = Counter()
    total = 0
    for rl in ranked:
        for entry in rl.top(top_n):
            counts[corpus.source_of(entry.doc_id).label] += 1
            total += 1
    if total == 0:
        return {}
    return {label: 100.0 * n / total for label, n in sorted(counts.items())}


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _bleu(candidate: list[str], references: list[list[str]], max_n: int) -> float:
    """Sentence BLEU: clipped n-gram precisions, geometric mean, closest-
    reference brevity penalty, no smoothing."""
    c = len(candidate)
    if c == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        counts = _ngram_counts(candidate, n)
        total = sum(counts.values())
        if total == 0:
            return 0.0
        max_ref: dict[tuple, int] = {}
        for ref in references:
            ref_counts = _ngram_counts(ref, n)
            for ngram, cnt in counts.items():
                rc = ref_counts.get(ngram, 0)
                if rc > max_ref.get(ngram, 0):
                    max_ref[ngram] = rc
        clipped = sum(min(cnt, max_ref.get(ngram, 0)) for ngram, cnt in counts.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total) / max_n
    r = min((len(ref) for ref in references),
            key=lambda rl: (abs(rl - c), rl))
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum)


def self_bleu(docs: Sequence[str], max_n: int = 3,
              tokenizer=None) -> float:
    """Mean BLEU of each document against the rest of the set.

    High values mean the set is homogeneous. Uses uniform 1..max_n-gram
    weights and no smoothing, so disjoint sets score exactly 0 and
    identical sets exactly 1.
    """
    if len(docs) < 2:
        raise ValueError("self_bleu needs at least 2 documents")
    if tokenizer is None:
        tokenizer = tokenize
    token_lists = [tokenizer(d) if isinstance(d, str) else list(d) for d in docs]
    scores = []
    for i, candidate in enumerate(token_lists):
        references = token_lists[:i] + token_lists[i + 1:]
        scores.append(_bleu(candidate, references, max_n))
    return sum(scores) / len(scores)


def context_right_num(top5: RankedList, golds: Sequence[str],
                      corpus: CorpusSnapshot) -> int:
    """How many of the top-5 documents contain a gold answer."""
    return sum(em(golds, corpus.get_text(e.doc_id)) for e in top5.top(5))


def transitions(em_prev: Mapping, em_next: Mapping) -> tuple[int, int]:
    """Counts of queries flipping incorrect->correct and correct->incorrect."""
    if set(em_prev.keys()) != set(em_next.keys()):
        raise ValueError("transition maps must cover the same queries")
    count_01 = sum(1 for q in em_prev if em_prev[q] == 0 and em_next[q] == 1)
    count_10 = sum(1 for q in em_prev if em_prev[q] == 1 and em_next[q] == 0)
    return count_01, count_10


def first_right_ranks(ranked: RankedList, golds: Sequence[str],
                      corpus: CorpusSnapshot,
                      horizon: int | None = None) -> tuple[int | None, int | None]:
    """Rank of the first correct document from any source and from humans.

    Returns None for a slot when no such document exists within the
    horizon (default: the whole list).
    """
    first_any: int | None = None
    first_human: int | None = None
    entries = ranked.entries if horizon is None else ranked.entries[:horizon]
    for entry in entries:
        doc = corpus.get(entry.doc_id)
        if not em(golds, doc.text):
            continue
        if first_any is None:
            first_any = entry.rank
        if doc.source.kind == HUMAN:
            first_human = entry.rank
            break
    return first_any, first_human


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation; rejects constant inputs."""
    if len(x) != len(y):
        raise ValueError("pearson inputs must have equal length")
    if len(x) < 2:
        raise ValueError("pearson needs at least 2 points")
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        raise ValueError("correlation undefined for constant input")
    return float(np.corrcoef(xs, ys)[0, 1])


def significance(baseline_hits: Mapping, treatment_hits: Mapping,
                 alpha: float = 0.05, resamples: int = BOOTSTRAP_RESAMPLES,
                 seed: int = 0) -> tuple[float, bool]:
    """Paired bootstrap over per-query hit differences, two-sided.

    The p-value is 2 * min(P(mean diff* <= 0), P(mean diff* >= 0)) over the
    resampled means, clamped to [0, 1].
    """
    if set(baseline_hits.keys()) != set(treatment_hits.keys()):
        raise ValueError("significance requires identical query sets")
    keys = sorted(baseline_hits.keys())
    diffs = np.asarray([treatment_hits[q] - baseline_hits[q] for q in keys],
                       dtype=np.float64)
    n = len(diffs)
    if n == 0:
        raise ValueError("significance requires at least one query")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(resamples, n))
    means = diffs[idx].mean(axis=1)
    p_low = float(np.mean(means <= 0.0))
    p_high = float(np.mean(means >= 0.0))
    p_value = min(1.0, 2.0 * min(p_low, p_high))
    return p_value, p_value < alpha


@dataclass
class EvalRecord:
    """Per-(query, generator) grading snapshot for one iteration."""

    query_id: str
    iteration: int
    generator_name: str
    em: int
    em_llm: int | None = None
    context_right_num: int = 0
    first_right_any: int | None = None
    first_right_human: int | None = None

    def __post_init__(self) -> None:
        if (self.first_right_any is not None and self.first_right_human is not None
                and self.first_right_any > self.first_right_human):
            raise ValueError("first correct rank from any source cannot exceed "
                             "the first correct human rank")

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "iteration": self.iteration,
            "generator_name": self.generator_name,
            "em": self.em,
            "em_llm": self.em_llm,
            "context_right_num": self.context_right_num,
            "first_right_any": self.first_right_any,
            "first_right_human": self.first_right_human,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalRecord":
        return cls(query_id=d["query_id"], iteration=int(d["iteration"]),
                   generator_name=d["generator_name"], em=int(d["em"]),
                   em_llm=d.get("em_llm"),
                   context_right_num=int(d.get("context_right_num", 0)),
                   first_right_any=d.get("first_right_any"),
                   first_right_human=d.get("first_right_human"))


@dataclass
class IterationMetrics:
    """The full metric bundle for one iteration."""

    iteration: int
    acc_at_5: float
    acc_at_20: float
    em_mean: float
    em_mean_by_generator: dict[str, float] = field(default_factory=dict)
    dominance_p: float = 0.0
    source_share_top50: dict[str, float] = field(default_factory=dict)
    self_bleu_top5: float = 0.0
    transitions_01: int | None = None
    transitions_10: int | None = None
    em_llm_mean: float | None = None
    pearson_em_em_llm: float | None = None
    context_right_hist: dict[str, list[int]] = field(default_factory=dict)
    first_right_summary: dict[str, float | int | None] = field(default_factory=dict)

    def validate(self) -> None:
        for name in ("acc_at_5", "acc_at_20", "em_mean", "dominance_p"):
            value = getattr(self, name)
            if not 0.0 <= value <= 100.0:
                raise ValueError(f"{name} out of range: {value}")
        if self.source_share_top50:
            total = sum(self.source_share_top50.values())
            if abs(total - 100.0) > 0.01:
                raise ValueError(f"source shares sum to {total}, expected 100")
        if not 0.0 <= self.self_bleu_top5 <= 1.0:
            raise ValueError(f"self_bleu_top5 out of range: {self.self_bleu_top5}")

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "acc_at_5": self.acc_at_5,
            "acc_at_20": self.acc_at_20,
            "em_mean": self.em_mean,
            "em_mean_by_generator": self.em_mean_by_generator,
            "dominance_p": self.dominance_p,
            "source_share_top50": self.source_share_top50,
            "self_bleu_top5": self.self_bleu_top5,
            "transitions_01": self.transitions_01,
            "transitions_10": self.transitions_10,
            "em_llm_mean": self.em_llm_mean,
            "pearson_em_em_llm": self.pearson_em_em_llm,
            "context_right_hist": self.context_right_hist,
            "first_right_summary": self.first_right_summary,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IterationMetrics":
        return cls(
            iteration=int(d["iteration"]),
            acc_at_5=float(d["acc_at_5"]),
            acc_at_20=float(d["acc_at_20"]),
            em_mean=float(d["em_mean"]),
            em_mean_by_generator=dict(d.get("em_mean_by_generator", {})),
            dominance_p=float(d.get("dominance_p", 0.0)),
            source_share_top50=dict(d.get("source_share_top50", {})),
            self_bleu_top5=float(d.get("self_bleu_top5", 0.0)),
            transitions_01=d.get("transitions_01"),
            transitions_10=d.get("transitions_10"),
            em_llm_mean=d.get("em_llm_mean"),
            pearson_em_em_llm=d.get("pearson_em_em_llm"),
            context_right_hist=dict(d.get("context_right_hist", {})),
            first_right_summary=dict(d.get("first_right_summary", {})),
        )
