"""End-to-end experiment orchestration.

A run is: baseline measurement over the human corpus, zero-shot (or
misinformation) injection, then t retrieve-generate-commit iterations.
Every phase persists line-delimited artifacts under its own directory and
marks completion by writing its metrics file last, which makes interrupted
runs resumable from the last committed iteration.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import metrics as M
from . import postprocess
from .config import (CONTEXT_SIZE, ExperimentConfig, QueryRecord, ensure_valid,
                     load_query_set)
from .corpus import (Document, SourceTag, add_documents, generated_doc_id,
                     ingest_seed_corpus)
from .errors import GenerationFailure, RagLoopError
from .generation import (WITH_CONTEXTS, ZERO_SHOT, GenerationRecord,
                         GenerationRequest, MisinfoSpec, build_prompt,
                         derive_seed, generate, generate_false_answers,
                         generate_mis_passage, judge_support)
from .filters import FilterResult, diversity_filter, source_filter
from .rerank import rerank
from .retrieval import (InvertedIndex, RankedList, VectorIndex, search_bm25,
                        search_dense, tokenize)

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.json"
RANKED_FILE = "ranked.jsonl"
CONTEXTS_FILE = "contexts.jsonl"
GENERATIONS_FILE = "generations.jsonl"
RECORDS_FILE = "records.jsonl"
ADDITIONS_FILE = "additions.jsonl"
INJECTION_META_FILE = "meta.json"
MISINFO_FILE = "misinfo.jsonl"
MANIFEST_FILE = "manifest.json"
SUMMARY_FILE = "summary.tsv"
ALL_METRICS_FILE = "metrics.jsonl"

SUMMARY_COLUMNS = ("iteration", "acc_at_5", "acc_at_20", "em_mean",
                   "dominance_p", "self_bleu_top5", "human_share_top50",
                   "t01", "t10")


# ---- small persistence helpers ------------------------------------------

def _atomic_write(path: Path, data: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_jsonl(path: Path, rows: list[dict]) -> None:
    lines = [json.dumps(r, sort_keys=True, ensure_ascii=False) for r in rows]
    _atomic_write(path, "".join(line + "\n" for line in lines))


def read_jsonl(path: Path) -> list[dict]:
    rows = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def write_json(path: Path, obj: dict) -> None:
    _atomic_write(path, json.dumps(obj, sort_keys=True, ensure_ascii=False,
                                   indent=2) + "\n")


# ---- query sampling -------------------------------------------------------

def sample_queries(records: list[QueryRecord], n: int,
                   seed: int) -> list[QueryRecord]:
    """Deterministic seeded sample, stable across runs and platforms."""
    if n >= len(records):
        return sorted(records, key=lambda r: r.query_id)

    def key(r: QueryRecord) -> str:
        return hashlib.sha256(f"{seed}:{r.query_id}".encode("utf-8")).hexdigest()

    chosen = sorted(records, key=key)[:n]
    return sorted(chosen, key=lambda r: r.query_id)


@dataclass
class IterationArtifacts:
    """Everything one phase produced, as returned to callers."""

    iteration: int
    ranked: dict[str, RankedList]
    contexts: dict[str, FilterResult]
    records: list[GenerationRecord]
    metrics: M.IterationMetrics
    corpus_version: int


class ExperimentRunner:
    """Holds the evolving corpus, indexes, backends, and caches for one run."""

    def __init__(self, config: ExperimentConfig):
        ensure_valid(config)
        self.config = config
        self.out_dir = Path(config.output_dir)
        self.config_hash = config.config_hash()
        all_queries = load_query_set(config.query_set)
        self.queries = sample_queries(all_queries, config.sample_size, config.seed)
        self.gold = {q.query_id: q.answers for q in self.queries}
        self.corpus = ingest_seed_corpus(config.seed_corpus)
        self.index = InvertedIndex()
        self.index.add(list(self.corpus.iter_documents()))
        self.embedder = config.build_embedder() if config.uses_dense else None
        self.vindex: VectorIndex | None = None
        if config.uses_dense:
            self.vindex = VectorIndex(backend="remote" if
                                      config.embedding_endpoint else "stub")
            self.vindex.add_documents(list(self.corpus.iter_documents()),
                                      self.embedder)
        self.rerank_backend = config.build_rerank_backend() if \
            config.uses_rerank else None
        self.detector = config.build_detector() if \
            config.filter_mode == "source" else None
        self.judge = config.build_judge() if config.grade_with_judge else None
        self.generators = {g.name: config.build_generator(g)
                           for g in config.generators}
        self.phrases = (postprocess.PhraseList.from_file(config.phrase_file)
                        if config.phrase_file else None)
        self.misinfo_specs: dict[str, MisinfoSpec] = {}
        self._token_cache: dict[str, list[str]] = {}

    # ---- shared helpers --------------------------------------------------

    def _iter_dir(self, iteration: int) -> Path:
        return self.out_dir / "iterations" / f"iter-{iteration:02d}"

    def _injection_dir(self) -> Path:
        return self.out_dir / "injection"

    def _doc_tokens(self, doc_id: str) -> list[str]:
        toks = self._token_cache.get(doc_id)
        if toks is None:
            toks = tokenize(self.corpus.get_text(doc_id))
            self._token_cache[doc_id] = toks
        return toks

    def _retrieve(self, query: QueryRecord, iteration: int) -> RankedList:
        depth = self.config.retrieval_depth
        if self.config.uses_dense:
            ranked = search_dense(self.vindex, query.question, depth,
                                  self.embedder, query_id=query.query_id,
                                  iteration=iteration)
        else:
            ranked = search_bm25(self.index, query.question, depth,
                                 query_id=query.query_id, iteration=iteration)
        if self.rerank_backend is not None:
            outcome = rerank(self.rerank_backend, query.question, ranked,
                             depth=self.config.rerank_depth,
                             get_text=self.corpus.get_text,
                             failure_policy=self.config.rerank_failure_policy)
            ranked = outcome.ranked
        return ranked

    def _select_contexts(self, ranked: RankedList) -> FilterResult:
        mode = self.config.filter_mode
        if mode == "source":
            return source_filter(ranked, self.detector, self.corpus,
                                 want=CONTEXT_SIZE)
        if mode == "diversity":
            return diversity_filter(ranked, self.corpus,
                                    threshold=self.config.diversity_threshold,
                                    window=CONTEXT_SIZE)
        return FilterResult(entries=list(ranked.entries[:CONTEXT_SIZE]))

    def _commit(self, docs: list[Document]) -> None:
        self.corpus = add_documents(self.corpus, docs)
        self.index.add(docs)
        if self.vindex is not None:
            self.vindex.add_documents(docs, self.embedder)

    # ---- generation ------------------------------------------------------

    def _generation_tasks(self, iteration: int,
                          contexts: dict[str, FilterResult]) -> list[tuple]:
        specs = (self.config.generators_for_iteration(iteration)
                 if iteration >= 1 else list(self.config.generators))
        tasks = []
        for query in self.queries:
            kept = contexts[query.query_id]
            texts = [self.corpus.get_text(e.doc_id) for e in kept.entries]
            padded = (texts + [""] * CONTEXT_SIZE)[:CONTEXT_SIZE]
            prompt = build_prompt(WITH_CONTEXTS, query.question, contexts=padded)
            for spec in specs:
                request = GenerationRequest(
                    prompt=prompt, kind=WITH_CONTEXTS, query_id=query.query_id,
                    iteration=iteration, query=query.question,
                    gold_answers=list(query.answers), contexts=texts)
                tasks.append((query, spec.name, request))
        tasks.sort(key=lambda t: (t[0].query_id, t[1]))
        return tasks

    def _run_tasks(self, tasks: list[tuple]):
        """Generate for every task; failures become None entries."""

        def one(task):
            query, gen_name, request = task
            try:
                return generate(self.generators[gen_name], request)
            except GenerationFailure as exc:
                logger.warning("generation failed for query %s / %s: %s",
                               query.query_id, gen_name, exc)
                return None

        if self.config.max_in_flight > 1:
            with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
                return list(pool.map(one, tasks))
        return [one(task) for task in tasks]

    def _grade(self, query: QueryRecord, cleaned: str) -> tuple[int, int | None]:
        hit = M.em(query.answers, cleaned)
        em_llm_value: int | None = None
        if self.judge is not None:
            if hit == 0:
                em_llm_value = 0
            else:
                matched = next(a for a in query.answers
                               if M.em([a], cleaned) == 1)
                verdict, _ = judge_support(self.judge, query.question,
                                           cleaned, matched)
                em_llm_value = M.em_llm(hit, verdict)
        return hit, em_llm_value

    def _grade_false(self, query: QueryRecord,
                     cleaned: str) -> tuple[int | None, int | None]:
        spec = self.misinfo_specs.get(query.query_id)
        if spec is None:
            return None, None
        false = spec.chosen_false_answer
        hit = M.em([false], cleaned)
        em_llm_false: int | None = None
        if self.judge is not None:
            if hit == 0:
                em_llm_false = 0
            else:
                verdict, _ = judge_support(self.judge, query.question,
                                           cleaned, false)
                em_llm_false = M.em_llm(hit, verdict)
        return hit, em_llm_false

    # ---- metric assembly -------------------------------------------------

    def _build_metrics(self, iteration: int, ranked: dict[str, RankedList],
                       records: list[GenerationRecord],
                       em_prev: dict | None,
                       crn_by_query: dict[str, int],
                       fr_by_query: dict[str, tuple[int | None, int | None]],
                       ) -> M.IterationMetrics:
        ranked_lists = [ranked[q.query_id] for q in self.queries]
        acc5 = M.acc_at_k(ranked_lists, self.gold, 5, self.corpus)
        acc20 = M.acc_at_k(ranked_lists, self.gold, 20, self.corpus)
        dom = M.dominance_p(ranked_lists, self.corpus, k=5)
        shares = M.source_share(ranked_lists, self.corpus, top_n=50)

        bleu_values = []
        for rl in ranked_lists:
            top = rl.top(5)
            if len(top) >= 2:
                bleu_values.append(M.self_bleu(
                    [self._doc_tokens(e.doc_id) for e in top]))
        bleu = sum(bleu_values) / len(bleu_values) if bleu_values else 0.0

        by_gen: dict[str, list[int]] = {}
        for rec in records:
            by_gen.setdefault(rec.generator_name, []).append(rec.em)
        em_mean_by_gen = {name: 100.0 * sum(v) / len(v)
                          for name, v in sorted(by_gen.items())}
        all_em = [rec.em for rec in records]
        em_mean = 100.0 * sum(all_em) / len(all_em) if all_em else 0.0

        t01: int | None = None
        t10: int | None = None
        if em_prev is not None:
            em_now = {(r.query_id, r.generator_name): r.em for r in records}
            common = set(em_prev) & set(em_now)
            if len(common) != len(em_now) or len(common) != len(em_prev):
                logger.warning("transition key sets differ at iteration %d "
                               "(%d vs %d); using the intersection",
                               iteration, len(em_prev), len(em_now))
            t01, t10 = M.transitions({k: em_prev[k] for k in common},
                                     {k: em_now[k] for k in common})

        em_llm_values = [r.em_llm for r in records if r.em_llm is not None]
        em_llm_mean = (100.0 * sum(em_llm_values) / len(em_llm_values)
                       if em_llm_values else None)
        pearson_value: float | None = None
        if em_llm_values and len(em_llm_values) == len(records):
            try:
                pearson_value = M.pearson([r.em for r in records],
                                          [r.em_llm for r in records])
            except ValueError:
                pearson_value = None

        hist = {"em0": [0] * 6, "em1": [0] * 6}
        for rec in records:
            crn = crn_by_query[rec.query_id]
            hist["em1" if rec.em == 1 else "em0"][crn] += 1

        any_ranks = []
        human_ranks = []
        for q in self.queries:
            first_any, first_human = fr_by_query[q.query_id]
            if first_any is not None:
                any_ranks.append(first_any)
            if first_human is not None:
                human_ranks.append(first_human)
        first_right = {
            "mean_any": (sum(any_ranks) / len(any_ranks)) if any_ranks else None,
            "count_any": len(any_ranks),
            "mean_human": (sum(human_ranks) / len(human_ranks))
                          if human_ranks else None,
            "count_human": len(human_ranks),
        }

        bundle = M.IterationMetrics(
            iteration=iteration, acc_at_5=acc5, acc_at_20=acc20,
            em_mean=em_mean, em_mean_by_generator=em_mean_by_gen,
            dominance_p=dom, source_share_top50=shares, self_bleu_top5=bleu,
            transitions_01=t01, transitions_10=t10, em_llm_mean=em_llm_mean,
            pearson_em_em_llm=pearson_value, context_right_hist=hist,
            first_right_summary=first_right)
        bundle.validate()
        return bundle

    # ---- phases ----------------------------------------------------------

    def _run_phase(self, iteration: int,
                   em_prev: dict | None) -> tuple[IterationArtifacts,
                                                  list[Document]]:
        """One retrieve-filter-generate-grade pass; returns artifacts plus
        the cleaned documents ready for commit (empty at baseline)."""
        ranked: dict[str, RankedList] = {}
        contexts: dict[str, FilterResult] = {}
        for query in self.queries:
            rl = self._retrieve(query, iteration)
            ranked[query.query_id] = rl
            contexts[query.query_id] = self._select_contexts(rl)

        tasks = self._generation_tasks(iteration, contexts)
        outputs = self._run_tasks(tasks)

        crn_by_query = {
            q.query_id: M.context_right_num(ranked[q.query_id], q.answers,
                                            self.corpus)
            for q in self.queries
        }
        fr_by_query = {
            q.query_id: M.first_right_ranks(ranked[q.query_id], q.answers,
                                            self.corpus)
            for q in self.queries
        }

        records: list[GenerationRecord] = []
        new_docs: list[Document] = []
        failures = 0
        for (query, gen_name, _request), raw in zip(tasks, outputs):
            if raw is None:
                failures += 1
                continue
            cleaned = postprocess.clean(raw, self.phrases)
            em_value, em_llm_value = self._grade(query, cleaned)
            em_false, em_llm_false = (self._grade_false(query, cleaned)
                                      if self.config.misinfo else (None, None))
            records.append(GenerationRecord(
                query_id=query.query_id, iteration=iteration,
                generator_name=gen_name, raw_text=raw, cleaned_text=cleaned,
                em=em_value, em_llm=em_llm_value, em_false=em_false,
                em_llm_false=em_llm_false))
            if iteration >= 1:
                entry_iteration = iteration + 1
                new_docs.append(Document(
                    doc_id=generated_doc_id(gen_name, entry_iteration,
                                            query.query_id),
                    text=cleaned,
                    source=SourceTag(kind="generated", generator_name=gen_name),
                    origin_query_id=query.query_id,
                    iteration_added=entry_iteration))
        if tasks and failures / len(tasks) > self.config.max_failure_fraction:
            raise RagLoopError(
                f"iteration {iteration} aborted: {failures}/{len(tasks)} "
                f"generation tasks failed")

        eval_records = []
        for rec in records:
            first_any, first_human = fr_by_query[rec.query_id]
            eval_records.append(M.EvalRecord(
                query_id=rec.query_id, iteration=iteration,
                generator_name=rec.generator_name, em=rec.em,
                em_llm=rec.em_llm,
                context_right_num=crn_by_query[rec.query_id],
                first_right_any=first_any, first_right_human=first_human))

        bundle = self._build_metrics(iteration, ranked, records, em_prev,
                                     crn_by_query, fr_by_query)
        artifacts = IterationArtifacts(
            iteration=iteration, ranked=ranked, contexts=contexts,
            records=records, metrics=bundle, corpus_version=self.corpus.version)
        self._persist_phase(iteration, artifacts, eval_records, new_docs)
        return artifacts, new_docs

    def _persist_phase(self, iteration: int, artifacts: IterationArtifacts,
                       eval_records: list[M.EvalRecord],
                       new_docs: list[Document]) -> None:
        phase_dir = self._iter_dir(iteration)
        write_jsonl(phase_dir / RANKED_FILE,
                    [artifacts.ranked[q.query_id].to_dict()
                     for q in self.queries])
        ctx_rows = []
        for q in self.queries:
            result = artifacts.contexts[q.query_id]
            row = {"query_id": q.query_id, "doc_ids": result.doc_ids(),
                   "removals": result.removals}
            row.update(result.flags())
            ctx_rows.append(row)
        write_jsonl(phase_dir / CONTEXTS_FILE, ctx_rows)
        write_jsonl(phase_dir / GENERATIONS_FILE,
                    [r.to_dict() for r in artifacts.records])
        write_jsonl(phase_dir / RECORDS_FILE,
                    [r.to_dict() for r in eval_records])
        write_jsonl(phase_dir / ADDITIONS_FILE, [d.to_dict() for d in new_docs])
        write_json(phase_dir / METRICS_FILE,
                   {"config_hash": self.config_hash,
                    "metrics": artifacts.metrics.to_dict()})

    def _phase_complete(self, iteration: int) -> bool:
        return (self._iter_dir(iteration) / METRICS_FILE).is_file()

    def _load_phase(self, iteration: int) -> tuple[M.IterationMetrics,
                                                   dict, list[Document]]:
        phase_dir = self._iter_dir(iteration)
        meta = json.loads((phase_dir / METRICS_FILE).read_text(encoding="utf-8"))
        bundle = M.IterationMetrics.from_dict(meta["metrics"])
        em_map = {}
        for row in read_jsonl(phase_dir / RECORDS_FILE):
            em_map[(row["query_id"], row["generator_name"])] = int(row["em"])
        docs = [Document.from_dict(d)
                for d in read_jsonl(phase_dir / ADDITIONS_FILE)]
        return bundle, em_map, docs

    # ---- injection -------------------------------------------------------

    def _injection_complete(self) -> bool:
        return (self._injection_dir() / INJECTION_META_FILE).is_file()

    def _load_injection(self) -> list[Document]:
        docs = [Document.from_dict(d) for d in
                read_jsonl(self._injection_dir() / ADDITIONS_FILE)]
        mis_path = self._injection_dir() / MISINFO_FILE
        if mis_path.is_file():
            self.misinfo_specs = {
                s["query_id"]: MisinfoSpec.from_dict(s)
                for s in read_jsonl(mis_path)}
        return docs

    def inject_zero_shot(self) -> list[Document]:
        """Generate and commit the iteration-1 additions: one document per
        (query, generator), or crafted mis-passages in misinfo mode."""
        specs = self.config.generators_for_iteration(1)
        if self.config.misinfo:
            docs = self._build_misinfo_docs(specs)
        else:
            docs = self._build_zero_shot_docs(specs)
        if not docs:
            raise RagLoopError("zero-shot injection produced no documents; "
                               "check generator backends")
        inj_dir = self._injection_dir()
        write_jsonl(inj_dir / ADDITIONS_FILE, [d.to_dict() for d in docs])
        if self.config.misinfo:
            write_jsonl(inj_dir / MISINFO_FILE,
                        [self.misinfo_specs[qid].to_dict()
                         for qid in sorted(self.misinfo_specs)])
        write_json(inj_dir / INJECTION_META_FILE,
                   {"config_hash": self.config_hash, "documents": len(docs),
                    "misinfo": self.config.misinfo})
        return docs

    def _build_zero_shot_docs(self, specs) -> list[Document]:
        tasks = []
        for query in self.queries:
            prompt = build_prompt(ZERO_SHOT, query.question)
            for spec in specs:
                request = GenerationRequest(
                    prompt=prompt, kind=ZERO_SHOT, query_id=query.query_id,
                    iteration=1, query=query.question,
                    gold_answers=list(query.answers))
                tasks.append((query, spec.name, request))
        tasks.sort(key=lambda t: (t[0].query_id, t[1]))
        outputs = self._run_tasks(tasks)
        docs = []
        for (query, gen_name, _request), raw in zip(tasks, outputs):
            if raw is None:
                continue
            cleaned = postprocess.clean(raw, self.phrases)
            docs.append(Document(
                doc_id=generated_doc_id(gen_name, 1, query.query_id),
                text=cleaned,
                source=SourceTag(kind="generated", generator_name=gen_name),
                origin_query_id=query.query_id, iteration_added=1))
        return docs

    def _build_misinfo_docs(self, specs) -> list[Document]:
        answer_backend = self.generators[self.config.generators[0].name]
        self.misinfo_specs = {}
        for query in self.queries:
            try:
                false_answers = generate_false_answers(
                    answer_backend, query.question, query.answers,
                    query_id=query.query_id)
            except GenerationFailure as exc:
                logger.warning("query %s excluded from misinfo mode: %s",
                               query.query_id, exc)
                continue
            rng = random.Random(derive_seed(self.config.seed, "misinfo-choice",
                                            query.query_id))
            chosen = rng.choice(false_answers)
            self.misinfo_specs[query.query_id] = MisinfoSpec(
                query_id=query.query_id, false_answers=false_answers,
                chosen_false_answer=chosen)
        docs = []
        for query in self.queries:
            spec = self.misinfo_specs.get(query.query_id)
            if spec is None:
                continue
            for gen_spec in specs:
                try:
                    raw = generate_mis_passage(
                        self.generators[gen_spec.name], query.question,
                        spec.chosen_false_answer, query.answers,
                        query_id=query.query_id, iteration=1)
                except GenerationFailure as exc:
                    logger.warning("mis-passage failed for query %s / %s: %s",
                                   query.query_id, gen_spec.name, exc)
                    continue
                cleaned = postprocess.clean(raw, self.phrases)
                docs.append(Document(
                    doc_id=generated_doc_id(gen_spec.name, 1, query.query_id),
                    text=cleaned,
                    source=SourceTag(kind="generated",
                                     generator_name=gen_spec.name),
                    origin_query_id=query.query_id, iteration_added=1))
        return docs

    # ---- public entry points ----------------------------------------------

    def run_baseline(self) -> IterationArtifacts:
        artifacts, _docs = self._run_phase(0, em_prev=None)
        return artifacts

    def run_iteration(self, iteration: int,
                      em_prev: dict | None) -> IterationArtifacts:
        if iteration < 1:
            raise ValueError("iteration must be >= 1")
        artifacts, new_docs = self._run_phase(iteration, em_prev=em_prev)
        self._commit(new_docs)
        artifacts.corpus_version = self.corpus.version
        return artifacts


def _check_manifest(runner: ExperimentRunner, resume: bool) -> None:
    manifest_path = runner.out_dir / MANIFEST_FILE
    if manifest_path.is_file():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        if manifest.get("config_hash") != runner.config_hash:
            raise RagLoopError(
                f"output directory {runner.out_dir} belongs to a different "
                "configuration; refusing to mix runs")
    elif resume:
        logger.info("no manifest in %s; starting fresh", runner.out_dir)
    write_json(manifest_path, {
        "config_hash": runner.config_hash,
        "seed": runner.config.seed,
        "iterations": runner.config.iterations,
        "queries": len(runner.queries),
        "status": "running",
    })


def run_experiment(config: ExperimentConfig,
                   resume: bool = True) -> dict:
    """Execute (or resume) the full simulation and emit all report files.

    Returns a small summary dict with output paths and the final metrics.
    Completed phases found in the output directory are loaded, not rerun.
    """
    runner = ExperimentRunner(config)
    _check_manifest(runner, resume)

    all_metrics: list[M.IterationMetrics] = []
    em_prev: dict | None = None

    # baseline (iteration 0)
    if resume and runner._phase_complete(0):
        bundle, em_prev, _ = runner._load_phase(0)
        all_metrics.append(bundle)
        logger.info("baseline already complete; loaded")
    else:
        artifacts = runner.run_baseline()
        all_metrics.append(artifacts.metrics)
        em_prev = {(r.query_id, r.generator_name): r.em
                   for r in artifacts.records}

    # zero-shot / misinfo injection commits the iteration-1 additions
    if resume and runner._injection_complete():
        docs = runner._load_injection()
        runner._commit(docs)
        logger.info("injection already complete; loaded %d documents", len(docs))
    else:
        docs = runner.inject_zero_shot()
        runner._commit(docs)

    for iteration in range(1, config.iterations + 1):
        if resume and runner._phase_complete(iteration):
            bundle, em_map, docs = runner._load_phase(iteration)
            runner._commit(docs)
            all_metrics.append(bundle)
            em_prev = em_map
            logger.info("iteration %d already complete; loaded", iteration)
            continue
        artifacts = runner.run_iteration(iteration, em_prev)
        all_metrics.append(artifacts.metrics)
        em_prev = {(r.query_id, r.generator_name): r.em
                   for r in artifacts.records}

    summary_path = write_summary(runner.out_dir, all_metrics)
    write_jsonl(runner.out_dir / ALL_METRICS_FILE,
                [{"config_hash": runner.config_hash, **m.to_dict()}
                 for m in all_metrics])
    series = emit_plot_series(runner.out_dir)
    write_json(runner.out_dir / MANIFEST_FILE, {
        "config_hash": runner.config_hash,
        "seed": config.seed,
        "iterations": config.iterations,
        "queries": len(runner.queries),
        "status": "complete",
    })
    final = all_metrics[-1]
    return {
        "output_dir": str(runner.out_dir),
        "summary": str(summary_path),
        "series": [str(p) for p in series],
        "iterations_run": len(all_metrics) - 1,
        "final_metrics": final.to_dict(),
    }


def _fmt(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def write_summary(out_dir: Path, all_metrics: list[M.IterationMetrics]) -> Path:
    rows = ["\t".join(SUMMARY_COLUMNS)]
    for m in all_metrics:
        human50 = m.source_share_top50.get("human", 0.0)
        rows.append("\t".join([
            str(m.iteration), _fmt(m.acc_at_5), _fmt(m.acc_at_20),
            _fmt(m.em_mean), _fmt(m.dominance_p), _fmt(m.self_bleu_top5),
            _fmt(human50), _fmt(m.transitions_01), _fmt(m.transitions_10)]))
    path = out_dir / SUMMARY_FILE
    _atomic_write(path, "".join(r + "\n" for r in rows))
    return path


def emit_plot_series(run_dir: str | Path) -> list[Path]:
    """Write one plot-ready TSV per figure family from persisted metrics.

    Missing iterations produce a warning and a partial series; a corrupted
    metrics file is an error naming the file.
    """
    run_dir = Path(run_dir)
    iter_root = run_dir / "iterations"
    if not iter_root.is_dir():
        raise RagLoopError(f"no iterations directory under {run_dir}")
    bundles: list[M.IterationMetrics] = []
    present: set[int] = set()
    for phase_dir in sorted(iter_root.iterdir()):
        metrics_path = phase_dir / METRICS_FILE
        if not metrics_path.is_file():
            continue
        try:
            meta = json.loads(metrics_path.read_text(encoding="utf-8"))
            bundle = M.IterationMetrics.from_dict(meta["metrics"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise RagLoopError(f"corrupted metrics file {metrics_path}: {exc}")
        bundles.append(bundle)
        present.add(bundle.iteration)
    if not bundles:
        raise RagLoopError(f"no completed iterations under {run_dir}")
    expected = set(range(min(present), max(present) + 1))
    missing = sorted(expected - present)
    if missing:
        logger.warning("missing iterations %s; emitting partial series", missing)
    bundles.sort(key=lambda b: b.iteration)

    series_dir = run_dir / "series"
    series_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    def emit(name: str, header: list[str], rows: list[list]) -> None:
        lines = ["\t".join(header)]
        lines.extend("\t".join(_fmt(v) for v in row) for row in rows)
        path = series_dir / name
        _atomic_write(path, "".join(ln + "\n" for ln in lines))
        paths.append(path)

    emit("series_accuracy.tsv",
         ["iteration", "acc_at_5", "acc_at_20", "em_mean"],
         [[b.iteration, b.acc_at_5, b.acc_at_20, b.em_mean] for b in bundles])

    labels = sorted({label for b in bundles for label in b.source_share_top50})
    emit("series_source_share.tsv", ["iteration"] + labels,
         [[b.iteration] + [b.source_share_top50.get(l, 0.0) for l in labels]
          for b in bundles])

    emit("series_dominance.tsv",
         ["iteration", "dominance_p", "human_share_top5"],
         [[b.iteration, b.dominance_p, 100.0 - b.dominance_p] for b in bundles])

    emit("series_self_bleu.tsv", ["iteration", "self_bleu_top5"],
         [[b.iteration, b.self_bleu_top5] for b in bundles])

    emit("series_transitions.tsv", ["iteration", "t01", "t10"],
         [[b.iteration, b.transitions_01, b.transitions_10] for b in bundles])

    hist_rows = []
    for b in bundles:
        for state in ("em0", "em1"):
            counts = b.context_right_hist.get(state, [0] * 6)
            hist_rows.append([b.iteration, state] + list(counts))
    emit("series_context_right.tsv",
         ["iteration", "em_state"] + [f"right_{i}" for i in range(6)],
         hist_rows)

    emit("series_first_right.tsv",
         ["iteration", "mean_any", "count_any", "mean_human", "count_human"],
         [[b.iteration,
           b.first_right_summary.get("mean_any"),
           b.first_right_summary.get("count_any", 0),
           b.first_right_summary.get("mean_human"),
           b.first_right_summary.get("count_human", 0)] for b in bundles])

    return paths
