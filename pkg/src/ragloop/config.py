"""Experiment configuration: loading, validation, and backend wiring.

A run is described by one YAML (or JSON) file; credentials never appear in
it and are read from environment variables named there instead.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigValidationError, CorpusFormatError
from .filters import MarkerStubDetector, RemoteDetectorClient
from .generation import (DEFAULT_STYLE_MARKER, DEFAULT_TEMPERATURE,
                         RemoteChatGenerator, SyntheticGenerator)
from .rerank import (FAILURE_ABORT, FAILURE_PASS_THROUGH,
                     LexicalOverlapBackend, RemoteScorerBackend)
from .retrieval import HashedEmbedder, RemoteEmbeddingClient

PIPELINES = ("bm25", "dense", "bm25+rerank", "dense+rerank")
FILTER_MODES = ("none", "source", "diversity")
CONTEXT_SIZE = 5

DEFAULT_SAMPLE_SIZE = 200
DEFAULT_ITERATIONS = 10
DEFAULT_RERANK_DEPTH = 100
DEFAULT_RETRIEVAL_DEPTH = 100


@dataclass
class QueryRecord:
    query_id: str
    question: str
    answers: list[str]


def load_query_set(path: str | Path) -> list[QueryRecord]:
    """Parse the query file: one JSON record per line with query_id,
    question, and a non-empty answers list."""
    path = Path(path)
    records: list[QueryRecord] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"invalid JSON record: {exc.msg}",
                                        path=str(path), line_no=line_no) from exc
            try:
                qid = str(rec["query_id"])
                question = str(rec["question"])
                answers = [str(a) for a in rec["answers"]]
            except (KeyError, TypeError) as exc:
                raise CorpusFormatError(
                    "query record needs query_id, question, answers",
                    path=str(path), line_no=line_no) from exc
            if not answers:
                raise CorpusFormatError(f"query {qid!r} has no answers",
                                        path=str(path), line_no=line_no)
            if qid in seen:
                raise CorpusFormatError(f"duplicate query_id {qid!r}",
                                        path=str(path), line_no=line_no)
            seen.add(qid)
            records.append(QueryRecord(query_id=qid, question=question,
                                       answers=answers))
    if not records:
        raise CorpusFormatError("empty query set", path=str(path))
    return records


@dataclass
class GeneratorSpec:
    name: str
    kind: str = "synthetic"            # synthetic | remote
    accuracy: float = 1.0
    marker: str = DEFAULT_STYLE_MARKER
    endpoint: str = ""
    model: str = ""
    temperature: float = DEFAULT_TEMPERATURE
    api_key_env: str = ""


@dataclass
class ScheduleEntry:
    first: int
    last: int
    generators: list[str]


@dataclass
class ExperimentConfig:
    seed_corpus: str
    query_set: str
    output_dir: str
    pipeline: str = "bm25"
    sample_size: int = DEFAULT_SAMPLE_SIZE
    iterations: int = DEFAULT_ITERATIONS
    context_size: int = CONTEXT_SIZE
    retrieval_depth: int = DEFAULT_RETRIEVAL_DEPTH
    rerank_depth: int = DEFAULT_RERANK_DEPTH
    rerank_failure_policy: str = FAILURE_ABORT
    generators: list[GeneratorSpec] = field(default_factory=list)
    schedule: list[ScheduleEntry] = field(default_factory=list)
    temperature: float = DEFAULT_TEMPERATURE
    filter_mode: str = "none"
    diversity_threshold: float = 0.4
    phrase_file: str = ""
    misinfo: bool = False
    grade_with_judge: bool = False
    seed: int = 0
    offline: bool = False
    max_in_flight: int = 1
    max_failure_fraction: float = 0.5
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 1.0
    # remote service endpoints; empty means offline stub
    embedding_endpoint: str = ""
    embedding_model: str = ""
    embedding_api_key_env: str = ""
    rerank_endpoint: str = ""
    rerank_model: str = ""
    rerank_api_key_env: str = ""
    detector_endpoint: str = ""
    detector_model: str = ""
    detector_api_key_env: str = ""
    judge_generator: str = ""

    @property
    def uses_rerank(self) -> bool:
        return self.pipeline.endswith("+rerank")

    @property
    def uses_dense(self) -> bool:
        return self.pipeline.startswith("dense")

    def generators_for_iteration(self, iteration: int) -> list[GeneratorSpec]:
        """The generator set active at an iteration (>=1 under a schedule)."""
        if not self.schedule:
            return list(self.generators)
        by_name = {g.name: g for g in self.generators}
        for entry in self.schedule:
            if entry.first <= iteration <= entry.last:
                return [by_name[n] for n in entry.generators]
        return list(self.generators)

    # knobs that change how a run executes but never what it computes
    _EXECUTION_ONLY = ("output_dir", "max_in_flight", "timeout", "retries",
                       "backoff")

    def config_hash(self) -> str:
        """Hash over result-defining fields; execution-only knobs and the
        output location are excluded so a resumed run and a fresh reference
        run compare equal."""
        payload = {k: v for k, v in self.to_dict().items()
                   if k not in self._EXECUTION_ONLY}
        canonical = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        d = {
            "seed_corpus": self.seed_corpus,
            "query_set": self.query_set,
            "output_dir": self.output_dir,
            "pipeline": self.pipeline,
            "sample_size": self.sample_size,
            "iterations": self.iterations,
            "context_size": self.context_size,
            "retrieval_depth": self.retrieval_depth,
            "rerank_depth": self.rerank_depth,
            "rerank_failure_policy": self.rerank_failure_policy,
            "generators": [vars(g).copy() for g in self.generators],
            "schedule": [{"iterations": f"{s.first}-{s.last}",
                          "generators": list(s.generators)} for s in self.schedule],
            "temperature": self.temperature,
            "filter_mode": self.filter_mode,
            "diversity_threshold": self.diversity_threshold,
            "phrase_file": self.phrase_file,
            "misinfo": self.misinfo,
            "grade_with_judge": self.grade_with_judge,
            "seed": self.seed,
            "offline": self.offline,
            "max_in_flight": self.max_in_flight,
            "max_failure_fraction": self.max_failure_fraction,
            "timeout": self.timeout,
            "retries": self.retries,
            "backoff": self.backoff,
            "embedding_endpoint": self.embedding_endpoint,
            "embedding_model": self.embedding_model,
            "embedding_api_key_env": self.embedding_api_key_env,
            "rerank_endpoint": self.rerank_endpoint,
            "rerank_model": self.rerank_model,
            "rerank_api_key_env": self.rerank_api_key_env,
            "detector_endpoint": self.detector_endpoint,
            "detector_model": self.detector_model,
            "detector_api_key_env": self.detector_api_key_env,
            "judge_generator": self.judge_generator,
        }
        return d

    # ---- backend construction -------------------------------------------

    def _key(self, env_name: str) -> str | None:
        return os.environ.get(env_name) if env_name else None

    def build_generator(self, spec: GeneratorSpec):
        if spec.kind == "synthetic":
            return SyntheticGenerator(name=spec.name, accuracy=spec.accuracy,
                                      marker=spec.marker, seed=self.seed)
        return RemoteChatGenerator(
            name=spec.name, endpoint=spec.endpoint, model=spec.model,
            temperature=spec.temperature, timeout=self.timeout,
            retries=self.retries, backoff=self.backoff,
            api_key=self._key(spec.api_key_env))

    def build_embedder(self):
        if self.embedding_endpoint:
            return RemoteEmbeddingClient(
                endpoint=self.embedding_endpoint, model=self.embedding_model,
                timeout=self.timeout, retries=self.retries, backoff=self.backoff,
                api_key=self._key(self.embedding_api_key_env))
        return HashedEmbedder(seed=self.seed)

    def build_rerank_backend(self):
        if self.rerank_endpoint:
            return RemoteScorerBackend(
                endpoint=self.rerank_endpoint, model=self.rerank_model,
                timeout=self.timeout, retries=self.retries, backoff=self.backoff,
                api_key=self._key(self.rerank_api_key_env))
        return LexicalOverlapBackend()

    def build_detector(self):
        if self.detector_endpoint:
            return RemoteDetectorClient(
                endpoint=self.detector_endpoint, model=self.detector_model,
                timeout=self.timeout, retries=self.retries, backoff=self.backoff,
                api_key=self._key(self.detector_api_key_env))
        marker = self.generators[0].marker if self.generators else DEFAULT_STYLE_MARKER
        return MarkerStubDetector(marker=marker)

    def build_judge(self):
        name = self.judge_generator or (self.generators[0].name
                                        if self.generators else "")
        for spec in self.generators:
            if spec.name == name:
                return self.build_generator(spec)
        raise ConfigValidationError([f"judge generator {name!r} is not configured"])


def _parse_span(text: str) -> tuple[int, int]:
    if "-" in text:
        first, last = text.split("-", 1)
        return int(first), int(last)
    value = int(text)
    return value, value


def parse_config_mapping(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    data = dict(raw)
    gen_specs = []
    for g in data.pop("generators", []):
        gen_specs.append(GeneratorSpec(
            name=str(g["name"]), kind=g.get("kind", "synthetic"),
            accuracy=float(g.get("accuracy", 1.0)),
            marker=g.get("marker", DEFAULT_STYLE_MARKER),
            endpoint=g.get("endpoint", ""), model=g.get("model", ""),
            temperature=float(g.get("temperature",
                                    data.get("temperature", DEFAULT_TEMPERATURE))),
            api_key_env=g.get("api_key_env", "")))
    schedule = []
    for s in data.pop("schedule", []):
        first, last = _parse_span(str(s["iterations"]))
        schedule.append(ScheduleEntry(first=first, last=last,
                                      generators=[str(n) for n in s["generators"]]))

    def _resolve(p: str) -> str:
        if base_dir is not None and p and not Path(p).is_absolute():
            return str(base_dir / p)
        return p

    known = {f for f in ExperimentConfig.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ConfigValidationError(
            [f"unknown configuration key {k!r}" for k in sorted(unknown)])
    config = ExperimentConfig(generators=gen_specs, schedule=schedule, **data)
    config.seed_corpus = _resolve(config.seed_corpus)
    config.query_set = _resolve(config.query_set)
    config.output_dir = _resolve(config.output_dir)
    config.phrase_file = _resolve(config.phrase_file)
    return config


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ConfigValidationError([f"config file {path} must hold a mapping"])
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    return parse_config_mapping(raw, base_dir=path.parent)


def validate_config(config: ExperimentConfig) -> list[str]:
    """All validation problems at once; empty list means valid."""
    problems: list[str] = []
    if not config.seed_corpus or not Path(config.seed_corpus).is_file():
        problems.append(f"seed corpus file not found: {config.seed_corpus!r}")
    if not config.query_set or not Path(config.query_set).is_file():
        problems.append(f"query set file not found: {config.query_set!r}")
    if config.pipeline not in PIPELINES:
        problems.append(f"pipeline must be one of {PIPELINES}, got "
                        f"{config.pipeline!r}")
    if config.filter_mode not in FILTER_MODES:
        problems.append(f"filter mode must be one of {FILTER_MODES}, got "
                        f"{config.filter_mode!r}")
    if config.iterations < 1:
        problems.append("iterations must be >= 1")
    if config.sample_size < 1:
        problems.append("sample_size must be >= 1")
    if config.context_size != CONTEXT_SIZE:
        problems.append(f"context_size is fixed at {CONTEXT_SIZE}")
    if config.rerank_depth < 1:
        problems.append("rerank_depth must be >= 1")
    if config.retrieval_depth < config.context_size:
        problems.append("retrieval_depth must cover the context size")
    if config.rerank_failure_policy not in (FAILURE_ABORT, FAILURE_PASS_THROUGH):
        problems.append(f"rerank_failure_policy must be {FAILURE_ABORT!r} or "
                        f"{FAILURE_PASS_THROUGH!r}")
    if not config.generators:
        problems.append("at least one generator backend is required")
    if len(config.generators) > 5:
        problems.append("at most 5 generator backends are supported")
    names = [g.name for g in config.generators]
    if len(set(names)) != len(names):
        problems.append("generator names must be unique")
    if any(n == "human" for n in names):
        problems.append("generator name 'human' is reserved for seed documents")
    for g in config.generators:
        if g.kind not in ("synthetic", "remote"):
            problems.append(f"generator {g.name!r} has unknown kind {g.kind!r}")
        if g.kind == "remote" and not g.endpoint:
            problems.append(f"remote generator {g.name!r} needs an endpoint")
        if g.kind == "synthetic" and not 0.0 <= g.accuracy <= 1.0:
            problems.append(f"generator {g.name!r} accuracy must be in [0, 1]")
    if config.schedule:
        covered: set[int] = set()
        for entry in config.schedule:
            if entry.first > entry.last:
                problems.append(f"schedule span {entry.first}-{entry.last} is empty")
            for name in entry.generators:
                if name not in names:
                    problems.append(f"schedule names unknown generator {name!r}")
            covered.update(range(entry.first, entry.last + 1))
        missing = [i for i in range(1, config.iterations + 1) if i not in covered]
        if missing:
            problems.append(f"schedule does not cover iterations {missing}")
    if config.uses_dense and not config.offline and not config.embedding_endpoint:
        problems.append("dense pipeline needs an embedding_endpoint unless "
                        "running offline with the hashed stub")
    if config.offline:
        remote = [g.name for g in config.generators if g.kind == "remote"]
        if remote:
            problems.append(f"offline mode forbids remote generators: {remote}")
        for field_name in ("embedding_endpoint", "rerank_endpoint",
                           "detector_endpoint"):
            if getattr(config, field_name):
                problems.append(f"offline mode forbids {field_name}")
    if config.phrase_file and not Path(config.phrase_file).is_file():
        problems.append(f"phrase file not found: {config.phrase_file!r}")
    if not 0.0 < config.max_failure_fraction <= 1.0:
        problems.append("max_failure_fraction must be in (0, 1]")
    if config.max_in_flight < 1:
        problems.append("max_in_flight must be >= 1")
    return problems


def ensure_valid(config: ExperimentConfig) -> None:
    problems = validate_config(config)
    if problems:
        raise ConfigValidationError(problems)
