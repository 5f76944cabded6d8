from __future__ import annotations

import json
from pathlib import Path

import pytest

from ragloop.config import (ExperimentConfig, load_config, load_query_set,
                            parse_config_mapping, validate_config)
from ragloop.errors import (ConfigValidationError, CorpusFormatError,
                            RagLoopError)
from ragloop.metrics import em
from ragloop.runner import (ExperimentRunner, emit_plot_series, read_jsonl,
                            run_experiment, sample_queries)
from ragloop.synthdata import write_demo_dataset


def _dataset(tmp_path, docs=120, queries=12, seed=3):
    return write_demo_dataset(tmp_path / "data", num_docs=docs,
                              num_queries=queries, seed=seed)


def _config(tmp_path, out="run", **overrides) -> ExperimentConfig:
    corpus, queries = _dataset(tmp_path)
    raw = {
        "seed_corpus": str(corpus), "query_set": str(queries),
        "output_dir": str(tmp_path / out), "pipeline": "bm25",
        "sample_size": 12, "iterations": 2, "seed": 17, "offline": True,
        "generators": [
            {"name": "gen-a", "kind": "synthetic", "accuracy": 0.8},
            {"name": "gen-b", "kind": "synthetic", "accuracy": 0.8},
        ],
    }
    raw.update(overrides)
    return parse_config_mapping(raw)


# ---- config ----------------------------------------------------------------

def test_config_yaml_loading(tmp_path):
    corpus, queries = _dataset(tmp_path)
    cfg_file = tmp_path / "exp.yaml"
    cfg_file.write_text(f"""
seed_corpus: {corpus}
query_set: {queries}
output_dir: out
pipeline: bm25
sample_size: 5
iterations: 2
seed: 9
offline: true
generators:
  - name: gen-a
    kind: synthetic
    accuracy: 0.9
""")
    config = load_config(cfg_file, overrides={"seed": 11})
    assert config.seed == 11
    assert config.generators[0].accuracy == 0.9
    assert Path(config.output_dir) == tmp_path / "out"
    assert validate_config(config) == []


def test_config_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigValidationError, match="unknown configuration key"):
        _config(tmp_path, mystery_flag=True)


def test_validation_collects_all_problems(tmp_path):
    config = _config(tmp_path)
    config.seed_corpus = str(tmp_path / "missing.jsonl")
    config.pipeline = "quantum"
    config.iterations = 0
    config.rerank_depth = 0
    problems = validate_config(config)
    assert len(problems) == 4
    assert any("missing.jsonl" in p for p in problems)
    assert any("rerank_depth" in p for p in problems)


def test_validation_dense_without_embedding_backend(tmp_path):
    config = _config(tmp_path, pipeline="dense", offline=False)
    problems = validate_config(config)
    assert any("embedding_endpoint" in p for p in problems)


def test_validation_offline_forbids_remote(tmp_path):
    config = _config(tmp_path)
    config.generators[0].kind = "remote"
    config.generators[0].endpoint = "http://example.invalid/chat"
    problems = validate_config(config)
    assert any("offline mode forbids remote generators" in p for p in problems)


def test_validation_schedule_coverage(tmp_path):
    config = _config(
        tmp_path, iterations=4,
        schedule=[{"iterations": "1-2", "generators": ["gen-a"]}])
    problems = validate_config(config)
    assert any("does not cover iterations [3, 4]" in p for p in problems)


def test_query_set_loader_errors(tmp_path):
    path = tmp_path / "queries.jsonl"
    path.write_text('{"query_id": "q1", "question": "x", "answers": []}\n')
    with pytest.raises(CorpusFormatError, match="no answers"):
        load_query_set(path)
    path.write_text("")
    with pytest.raises(CorpusFormatError, match="empty query set"):
        load_query_set(path)


def test_sample_queries_deterministic_and_order_insensitive(tmp_path):
    _, qpath = _dataset(tmp_path, queries=30)
    records = load_query_set(qpath)
    a = sample_queries(records, 10, seed=5)
    b = sample_queries(list(reversed(records)), 10, seed=5)
    assert [q.query_id for q in a] == [q.query_id for q in b]
    c = sample_queries(records, 10, seed=6)
    assert [q.query_id for q in a] != [q.query_id for q in c]


# ---- baseline and injection --------------------------------------------------

def test_baseline_smoke(tmp_path):
    runner = ExperimentRunner(_config(tmp_path))
    artifacts = runner.run_baseline()
    m = artifacts.metrics
    assert m.iteration == 0
    assert m.acc_at_5 > 0.0
    assert 0.0 <= m.em_mean <= 100.0
    assert m.dominance_p == 0.0  # the seed corpus is all human
    assert m.transitions_01 is None
    # no index mutation at baseline
    assert runner.corpus.version == 0
    assert len(artifacts.records) == 12 * 2


def test_missing_query_file_fails_validation(tmp_path):
    config = _config(tmp_path)
    config.query_set = str(tmp_path / "nope.jsonl")
    with pytest.raises(ConfigValidationError, match="nope.jsonl"):
        ExperimentRunner(config)


def test_zero_shot_injection_fanout(tmp_path):
    runner = ExperimentRunner(_config(tmp_path))
    docs = runner.inject_zero_shot()
    assert len(docs) == 12 * 2  # one per (query, generator)
    assert all(d.iteration_added == 1 for d in docs)
    assert all(d.origin_query_id is not None for d in docs)
    names = {d.source.generator_name for d in docs}
    assert names == {"gen-a", "gen-b"}
    assert all(d.doc_id.endswith(d.origin_query_id) for d in docs)


def test_misinfo_injection_postconditions(tmp_path):
    config = _config(tmp_path, misinfo=True)
    runner = ExperimentRunner(config)
    docs = runner.inject_zero_shot()
    assert docs
    gold = {q.query_id: q.answers for q in runner.queries}
    for doc in docs:
        spec = runner.misinfo_specs[doc.origin_query_id]
        assert spec.chosen_false_answer in doc.text
        assert em(gold[doc.origin_query_id], doc.text) == 0
    mis_rows = read_jsonl(Path(config.output_dir) / "injection" / "misinfo.jsonl")
    assert len(mis_rows) == len(runner.misinfo_specs)
    assert all(len(r["false_answers"]) == 5 for r in mis_rows)


class _AlwaysFailingBackend:
    name = "broken"

    def generate(self, request):
        from ragloop.errors import RemoteServiceError
        raise RemoteServiceError("backend down")


def test_injection_aborts_when_nothing_generates(tmp_path):
    runner = ExperimentRunner(_config(tmp_path))
    runner.generators = {name: _AlwaysFailingBackend()
                         for name in runner.generators}
    with pytest.raises(RagLoopError, match="no documents"):
        runner.inject_zero_shot()


def test_iteration_aborts_on_majority_failure(tmp_path):
    config = _config(tmp_path)
    runner = ExperimentRunner(config)
    docs = runner.inject_zero_shot()
    runner._commit(docs)
    runner.generators = {name: _AlwaysFailingBackend()
                         for name in runner.generators}
    with pytest.raises(RagLoopError, match="aborted"):
        runner.run_iteration(1, em_prev=None)


class _SelectivelyFailingBackend:
    """Fails only for chosen query ids; wraps a real synthetic backend."""

    def __init__(self, inner, failing_ids):
        self.name = inner.name
        self.inner = inner
        self.failing_ids = set(failing_ids)

    def generate(self, request):
        if request.query_id in self.failing_ids:
            from ragloop.errors import RemoteServiceError
            raise RemoteServiceError("transient outage")
        return self.inner.generate(request)


def test_minority_failures_skip_queries_but_continue(tmp_path):
    config = _config(tmp_path)
    runner = ExperimentRunner(config)
    runner._commit(runner.inject_zero_shot())
    failing = {runner.queries[0].query_id, runner.queries[1].query_id}
    runner.generators = {
        name: _SelectivelyFailingBackend(backend, failing)
        for name, backend in runner.generators.items()}
    artifacts = runner.run_iteration(1, em_prev=None)
    recorded = {r.query_id for r in artifacts.records}
    assert failing.isdisjoint(recorded)
    assert len(artifacts.records) == (12 - 2) * 2
    out = Path(config.output_dir)
    additions = read_jsonl(out / "iterations" / "iter-01" / "additions.jsonl")
    assert len(additions) == (12 - 2) * 2
    assert all(d["text"].strip() for d in additions)


# ---- full runs -----------------------------------------------------------------

def test_full_run_emits_artifacts(tmp_path):
    config = _config(tmp_path)
    report = run_experiment(config)
    out = Path(config.output_dir)
    assert (out / "summary.tsv").is_file()
    assert (out / "metrics.jsonl").is_file()
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3  # baseline + 2 iterations
    for i in range(3):
        it_dir = out / "iterations" / f"iter-{i:02d}"
        for name in ("ranked.jsonl", "contexts.jsonl", "generations.jsonl",
                     "records.jsonl", "additions.jsonl", "metrics.json"):
            assert (it_dir / name).is_file(), name
    # corpus growth per iteration equals committed generation records
    add1 = read_jsonl(out / "iterations" / "iter-01" / "additions.jsonl")
    gen1 = read_jsonl(out / "iterations" / "iter-01" / "generations.jsonl")
    assert len(add1) == len(gen1) == 24
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    assert report["iterations_run"] == 2


def test_transition_identity_holds_in_run(tmp_path):
    config = _config(tmp_path, iterations=3)
    run_experiment(config)
    out = Path(config.output_dir)
    prev = None
    for i in range(4):
        rows = read_jsonl(out / "iterations" / f"iter-{i:02d}" / "records.jsonl")
        em_map = {(r["query_id"], r["generator_name"]): r["em"] for r in rows}
        if prev is not None:
            meta = json.loads((out / "iterations" / f"iter-{i:02d}" /
                               "metrics.json").read_text())
            t01 = meta["metrics"]["transitions_01"]
            t10 = meta["metrics"]["transitions_10"]
            assert sum(em_map.values()) - sum(prev.values()) == t01 - t10
        prev = em_map


def test_pipeline_composition_contexts_come_from_ranked(tmp_path):
    config = _config(tmp_path)
    run_experiment(config)
    out = Path(config.output_dir)
    for i in range(3):
        it_dir = out / "iterations" / f"iter-{i:02d}"
        ranked = {r["query_id"]: [e[0] for e in r["entries"]]
                  for r in read_jsonl(it_dir / "ranked.jsonl")}
        for ctx in read_jsonl(it_dir / "contexts.jsonl"):
            ids = ctx["doc_ids"]
            assert ids == ranked[ctx["query_id"]][:len(ids)]


def test_rerun_same_seed_byte_identical(tmp_path):
    config_a = _config(tmp_path, out="run-a")
    config_b = _config(tmp_path, out="run-b")
    run_experiment(config_a)
    run_experiment(config_b)
    out_a, out_b = Path(config_a.output_dir), Path(config_b.output_dir)
    for rel in ["summary.tsv", "metrics.jsonl",
                "iterations/iter-01/generations.jsonl",
                "iterations/iter-02/metrics.json",
                "series/series_source_share.tsv"]:
        assert (out_a / rel).read_bytes() == (out_b / rel).read_bytes(), rel


def test_resume_matches_uninterrupted_run(tmp_path):
    reference = _config(tmp_path, out="ref", iterations=3)
    run_experiment(reference)

    # simulate a kill after iteration 1 by running phases manually
    partial = _config(tmp_path, out="partial", iterations=3)
    runner = ExperimentRunner(partial)
    from ragloop.runner import _check_manifest
    _check_manifest(runner, resume=False)
    artifacts0 = runner.run_baseline()
    docs = runner.inject_zero_shot()
    runner._commit(docs)
    em0 = {(r.query_id, r.generator_name): r.em for r in artifacts0.records}
    runner.run_iteration(1, em_prev=em0)
    # iteration 2 and 3 never ran; now resume
    run_experiment(partial, resume=True)

    ref_dir, part_dir = Path(reference.output_dir), Path(partial.output_dir)
    for rel in ["summary.tsv", "metrics.jsonl", "manifest.json",
                "iterations/iter-00/metrics.json",
                "iterations/iter-01/generations.jsonl",
                "iterations/iter-02/metrics.json",
                "iterations/iter-03/additions.jsonl",
                "series/series_accuracy.tsv"]:
        assert (ref_dir / rel).read_bytes() == (part_dir / rel).read_bytes(), rel


def test_resume_refuses_other_config(tmp_path):
    config = _config(tmp_path)
    run_experiment(config)
    changed = _config(tmp_path, seed=99)
    changed.output_dir = config.output_dir
    with pytest.raises(RagLoopError, match="different"):
        run_experiment(changed, resume=True)


def test_schedule_assigns_generators_per_iteration(tmp_path):
    config = _config(
        tmp_path, iterations=2,
        schedule=[{"iterations": "1", "generators": ["gen-a"]},
                  {"iterations": "2", "generators": ["gen-b"]}])
    run_experiment(config)
    out = Path(config.output_dir)
    gen1 = {r["generator_name"] for r in
            read_jsonl(out / "iterations" / "iter-01" / "generations.jsonl")}
    gen2 = {r["generator_name"] for r in
            read_jsonl(out / "iterations" / "iter-02" / "generations.jsonl")}
    assert gen1 == {"gen-a"} and gen2 == {"gen-b"}
    # zero-shot used the iteration-1 set
    inj = {r["source"]["generator_name"] for r in
           read_jsonl(out / "injection" / "additions.jsonl")}
    assert inj == {"gen-a"}


def test_concurrency_cap_does_not_change_outputs(tmp_path):
    serial = _config(tmp_path, out="serial")
    threaded = _config(tmp_path, out="threaded", max_in_flight=4)
    run_experiment(serial)
    run_experiment(threaded)
    a = (Path(serial.output_dir) / "metrics.jsonl").read_text()
    b = (Path(threaded.output_dir) / "metrics.jsonl").read_text()
    assert a == b


def test_judge_grading_produces_em_llm_fields(tmp_path):
    config = _config(tmp_path, grade_with_judge=True, iterations=1)
    run_experiment(config)
    out = Path(config.output_dir)
    rows = read_jsonl(out / "iterations" / "iter-01" / "generations.jsonl")
    assert all(r["em_llm"] in (0, 1) for r in rows)
    # offline judge says yes iff contained, so the conjunction equals em
    assert all(r["em_llm"] == r["em"] for r in rows)


def test_diversity_filter_mode_persists_conforming_contexts(tmp_path):
    config = _config(tmp_path, filter_mode="diversity", iterations=2)
    run_experiment(config)
    out = Path(config.output_dir)
    from ragloop.corpus import ingest_seed_corpus, Document, add_documents
    from ragloop.metrics import self_bleu
    corpus = ingest_seed_corpus(config.seed_corpus)
    for sub in ["injection"] + [f"iterations/iter-{i:02d}" for i in range(3)]:
        path = out / sub / "additions.jsonl"
        if path.is_file():
            docs = [Document.from_dict(d) for d in read_jsonl(path)]
            corpus = add_documents(corpus, docs)
    for i in range(3):
        for ctx in read_jsonl(out / "iterations" / f"iter-{i:02d}" /
                              "contexts.jsonl"):
            if len(ctx["doc_ids"]) >= 2 and not ctx["exhausted"]:
                texts = [corpus.get_text(d) for d in ctx["doc_ids"]]
                assert self_bleu(texts) <= 0.4


def test_source_filter_mode_keeps_unmarked_contexts(tmp_path):
    config = _config(tmp_path, filter_mode="source", iterations=2)
    run_experiment(config)
    out = Path(config.output_dir)
    gen_ids = set()
    for sub in ["injection", "iterations/iter-01", "iterations/iter-02"]:
        path = out / sub / "additions.jsonl"
        if path.is_file():
            gen_ids |= {d["doc_id"] for d in read_jsonl(path)}
    for i in range(3):
        for ctx in read_jsonl(out / "iterations" / f"iter-{i:02d}" /
                              "contexts.jsonl"):
            if not ctx["fallback_unfiltered"]:
                assert not (set(ctx["doc_ids"]) & gen_ids)


def test_custom_phrase_file_is_used(tmp_path):
    phrase_path = tmp_path / "phrases.txt"
    phrase_path.write_text("This synthweave note concerns\n")
    config = _config(tmp_path, phrase_file=str(phrase_path), iterations=1)
    run_experiment(config)
    out = Path(config.output_dir)
    rows = read_jsonl(out / "iterations" / "iter-01" / "generations.jsonl")
    assert rows
    for row in rows:
        assert "This synthweave note concerns" in row["raw_text"]
        assert "this synthweave note concerns" not in row["cleaned_text"].lower()


def test_dense_pipeline_runs_offline(tmp_path):
    config = _config(tmp_path, pipeline="dense", iterations=1, sample_size=6)
    report = run_experiment(config)
    assert report["iterations_run"] == 1


def test_rerank_pipeline_runs_offline(tmp_path):
    config = _config(tmp_path, pipeline="bm25+rerank", iterations=1,
                     sample_size=6, rerank_depth=20)
    report = run_experiment(config)
    assert report["iterations_run"] == 1


# ---- series emission -----------------------------------------------------------

def test_emit_plot_series_files(tmp_path):
    config = _config(tmp_path)
    run_experiment(config)
    paths = emit_plot_series(config.output_dir)
    names = {p.name for p in paths}
    assert names == {"series_accuracy.tsv", "series_source_share.tsv",
                     "series_dominance.tsv", "series_self_bleu.tsv",
                     "series_transitions.tsv", "series_context_right.tsv",
                     "series_first_right.tsv"}
    share = (Path(config.output_dir) / "series" /
             "series_source_share.tsv").read_text().splitlines()
    assert share[0].split("\t")[0] == "iteration"
    assert len(share) == 1 + 3  # header + baseline + 2 iterations


def test_emit_plot_series_warns_on_missing_iteration(tmp_path, caplog):
    config = _config(tmp_path)
    run_experiment(config)
    (Path(config.output_dir) / "iterations" / "iter-01" / "metrics.json").unlink()
    with caplog.at_level("WARNING"):
        emit_plot_series(config.output_dir)
    assert any("missing iterations" in r.message for r in caplog.records)


def test_emit_plot_series_corrupted_metrics_names_file(tmp_path):
    config = _config(tmp_path)
    run_experiment(config)
    bad = Path(config.output_dir) / "iterations" / "iter-02" / "metrics.json"
    bad.write_text("{not json")
    with pytest.raises(RagLoopError, match="iter-02"):
        emit_plot_series(config.output_dir)


def test_single_iteration_series(tmp_path):
    config = _config(tmp_path, iterations=1)
    run_experiment(config)
    paths = emit_plot_series(config.output_dir)
    accuracy = next(p for p in paths if p.name == "series_accuracy.tsv")
    assert len(accuracy.read_text().splitlines()) == 3  # header + iters 0..1
