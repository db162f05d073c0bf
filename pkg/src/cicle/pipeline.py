"""Experiment orchestration: subsample, fit, calibrate, classify, persist.

A cell is one (dataset, size, seed, strategy) combination. Every cell writes
one JSONL record file whose bytes depend only on the run configuration and
the frozen data, never on scheduling: item seeds are derived from the run
seed and the item id, records are written in test-set order, and no
timestamps enter any artifact.

The conformal strategy and the plain few-shot baselines draw their shots
from different pools on purpose: the conformal route must not see
calibration items (they tuned its threshold), while the baselines need no
calibration and use the whole subsample.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .classifier import LogisticModel, TrainConfig, predict_proba, train
from .conformal import ConformalCalibration, ConformalConfig, ConformalSet, calibrate, predict_set
from .corpus import (LabeledText, LabelSpace, file_sha256, load_frozen, stable_seed,
                     stratified_split, stratified_subsample)
from .errors import CicleError, DataError, TransportError
from .llm_client import LlmClient, LlmConfig, PromptMeta, parse_label
from .prompting import DEFAULT_TEMPLATE, PromptStats, PromptTemplate, build_prompt
from .selection import SelectionConfig, select_dense, select_random, select_sparse
from .vectorize import (EmbeddingClient, EmbeddingConfig, TfidfModel, fit_tfidf, stack,
                        transform, transform_many)

log = logging.getLogger(__name__)

STRATEGIES = ("base", "fewshot-random", "fewshot-sparse", "fewshot-dense", "cicle")
DEFAULT_SIZES = (100, 200, 300, 400, 500, 1000, 2000, 3000, 4000, 5000)
DEFAULT_STRATEGIES = ("base", "fewshot-random", "fewshot-sparse", "cicle")

_NAME_RE = re.compile(r"[A-Za-z0-9_-]+\Z")


@dataclass
class DatasetSpec:
    name: str
    path: str
    fmt: str | None = None
    min_size: int = 0
    task: str = "text classification"

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise ValueError(f"dataset name must match [A-Za-z0-9_-]+, got {self.name!r}")
        if self.min_size < 0:
            raise ValueError(f"min_size must be >= 0, got {self.min_size}")


@dataclass
class RunConfig:
    datasets: list[DatasetSpec]
    output: str = "runs"
    sizes: Sequence[int] = DEFAULT_SIZES
    seed: int = 0
    alpha: float = 0.05
    k: int = 2
    strategies: Sequence[str] = DEFAULT_STRATEGIES
    calib_fraction: float = 0.2
    template: PromptTemplate = DEFAULT_TEMPLATE
    llm: LlmConfig = field(default_factory=lambda: LlmConfig(endpoint="perfect"))
    embedding: EmbeddingConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    test_size: int = 1000
    jobs: int = 1
    force: bool = False

    def __post_init__(self):
        if not self.datasets:
            raise ValueError("at least one dataset is required")
        sizes = [int(s) for s in self.sizes]
        if not sizes or any(s <= 0 for s in sizes):
            raise ValueError("sizes must be positive")
        if sizes != sorted(set(sizes)):
            raise ValueError("sizes must be strictly ascending without repeats")
        self.sizes = sizes
        strategies = list(self.strategies)
        if not strategies:
            raise ValueError("strategies must be non-empty")
        if len(set(strategies)) != len(strategies):
            raise ValueError("strategies contain duplicates")
        unknown = [s for s in strategies if s not in STRATEGIES]
        if unknown:
            raise ValueError(
                f"unknown strategies: {', '.join(unknown)}; expected a subset of {STRATEGIES}")
        self.strategies = strategies
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if not (0.0 < self.calib_fraction < 1.0):
            raise ValueError(f"calib_fraction must be in (0, 1), got {self.calib_fraction}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.jobs < 1:
            raise ValueError(f"jobs must be >= 1, got {self.jobs}")
        if self.test_size < 1:
            raise ValueError(f"test_size must be >= 1, got {self.test_size}")

    @property
    def data_dir(self) -> Path:
        return Path(self.output) / "data"

    @property
    def records_dir(self) -> Path:
        return Path(self.output) / "records"


@dataclass
class PredictionRecord:
    item_id: str
    strategy: str
    gold_label: int
    final_label: int | None
    base_probs: list[float] | None = None
    conformal_set: ConformalSet | None = None
    bypassed: bool = False
    prompt_stats: PromptStats | None = None
    llm_raw: str | None = None
    error: str | None = None

    def to_json(self) -> dict:
        cset = None
        if self.conformal_set is not None:
            cset = {
                "candidates": [[c, p] for c, p in self.conformal_set.candidates],
                "forced_fallback": self.conformal_set.forced_fallback,
            }
        stats = None
        if self.prompt_stats is not None:
            stats = {
                "token_count": self.prompt_stats.token_count,
                "shot_count": self.prompt_stats.shot_count,
                "candidate_count": self.prompt_stats.candidate_count,
            }
        return {
            "item_id": self.item_id,
            "strategy": self.strategy,
            "gold_label": self.gold_label,
            "final_label": self.final_label,
            "base_probs": self.base_probs,
            "conformal_set": cset,
            "bypassed": self.bypassed,
            "prompt_stats": stats,
            "llm_raw": self.llm_raw,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PredictionRecord":
        try:
            cset = None
            if obj.get("conformal_set") is not None:
                raw = obj["conformal_set"]
                cset = ConformalSet(
                    candidates=[(int(c), float(p)) for c, p in raw["candidates"]],
                    forced_fallback=bool(raw["forced_fallback"]),
                )
            stats = None
            if obj.get("prompt_stats") is not None:
                raw = obj["prompt_stats"]
                stats = PromptStats(token_count=int(raw["token_count"]),
                                    shot_count=int(raw["shot_count"]),
                                    candidate_count=int(raw["candidate_count"]))
            final = obj["final_label"]
            probs = obj.get("base_probs")
            return cls(
                item_id=str(obj["item_id"]),
                strategy=str(obj["strategy"]),
                gold_label=int(obj["gold_label"]),
                final_label=None if final is None else int(final),
                base_probs=None if probs is None else [float(p) for p in probs],
                conformal_set=cset,
                bypassed=bool(obj.get("bypassed", False)),
                prompt_stats=stats,
                llm_raw=obj.get("llm_raw"),
                error=obj.get("error"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed prediction record: {exc}") from None


def write_records(records: Sequence[PredictionRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True, ensure_ascii=False) + "\n")


def read_records(path) -> list[PredictionRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"record file not found: {path}")
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from None
            records.append(PredictionRecord.from_json(obj))
    return records


@dataclass
class CellResources:
    """Everything one (dataset, size) cell shares across its strategies.

    Model-side fields stay None when neither base nor cicle runs; baseline
    fields stay None for the strategies that were not requested.
    """

    label_space: LabelSpace
    task: str = "text classification"
    tfidf: TfidfModel | None = None
    model: LogisticModel | None = None
    calibration: ConformalCalibration | None = None
    shot_pool: list[LabeledText] | None = None
    shot_vectors: object | None = None
    baseline_pool: list[LabeledText] | None = None
    baseline_tfidf: TfidfModel | None = None
    baseline_vectors: object | None = None
    baseline_embeddings: np.ndarray | None = None


def build_cell(subsample: Sequence[LabeledText], label_space: LabelSpace, config: RunConfig,
               cell_seed: int, task: str = "text classification",
               embed_client: EmbeddingClient | None = None,
               strategies: Sequence[str] | None = None) -> CellResources:
    """Fit the per-cell models and shot pools needed by the given strategies."""
    strategies = list(config.strategies if strategies is None else strategies)
    res = CellResources(label_space=label_space, task=task)

    if "base" in strategies or "cicle" in strategies:
        split = stratified_split(list(subsample), config.calib_fraction, cell_seed)
        if not split.train or not split.calibration:
            raise DataError("cell split produced an empty train or calibration part")
        res.tfidf = fit_tfidf([t.text for t in split.train])
        X = stack(transform_many(res.tfidf, [t.text for t in split.train]))
        y = [label_space.position(t.label) for t in split.train]
        res.model = train(X, y, label_space, config.train)
        res.shot_pool = split.train
        res.shot_vectors = X
        if "cicle" in strategies:
            pairs = [(transform(res.tfidf, t.text), label_space.position(t.label))
                     for t in split.calibration]
            res.calibration = calibrate(res.model, pairs, ConformalConfig(alpha=config.alpha))

    fewshot = [s for s in strategies if s.startswith("fewshot-")]
    if fewshot:
        res.baseline_pool = list(subsample)
        texts = [t.text for t in res.baseline_pool]
        if "fewshot-sparse" in fewshot:
            res.baseline_tfidf = fit_tfidf(texts)
            res.baseline_vectors = stack(transform_many(res.baseline_tfidf, texts))
        if "fewshot-dense" in fewshot:
            if embed_client is None:
                raise DataError("fewshot-dense requires an embedding endpoint")
            res.baseline_embeddings = np.array(embed_client.embed(texts))
    return res


def classify_base(res: CellResources, item: LabeledText) -> PredictionRecord:
    """Argmax of the base classifier; no conformal fields, no LLM."""
    probs = predict_proba(res.model, transform(res.tfidf, item.text))
    return PredictionRecord(
        item_id=item.id,
        strategy="base",
        gold_label=res.label_space.position(item.label),
        final_label=int(np.argmax(probs)),
        base_probs=[float(p) for p in probs],
    )


def _complete_into(record: PredictionRecord, prompt: str, meta: PromptMeta,
                   llm: LlmClient, labels: LabelSpace) -> PredictionRecord:
    # transport failures score as Invalid; the run keeps going
    try:
        resp = llm.complete(prompt, meta)
    except TransportError as exc:
        log.warning("item %s: %s", record.item_id, exc)
        record.error = str(exc)
        return record
    record.llm_raw = resp.raw
    record.final_label = parse_label(resp.raw, labels)
    return record


def classify_fewshot(res: CellResources, item: LabeledText, strategy: str, llm: LlmClient,
                     config: RunConfig, query_embedding=None) -> PredictionRecord:
    """One LLM call with k shots for every class in label order."""
    if strategy not in STRATEGIES or not strategy.startswith("fewshot-"):
        raise ValueError(f"not a few-shot strategy: {strategy!r}")
    classes = list(res.label_space.labels)
    sel = SelectionConfig(k=config.k, strategy=strategy.split("-", 1)[1],
                          seed=stable_seed(config.seed, "item", item.id))
    if strategy == "fewshot-random":
        shots = select_random(res.baseline_pool, classes, sel, exclude_id=item.id)
    elif strategy == "fewshot-sparse":
        qv = transform(res.baseline_tfidf, item.text)
        shots = select_sparse(res.baseline_pool, res.baseline_vectors, qv, classes, sel,
                              exclude_id=item.id)
    else:
        if query_embedding is None or res.baseline_embeddings is None:
            raise DataError("fewshot-dense requires precomputed embeddings")
        shots = select_dense(res.baseline_pool, res.baseline_embeddings, query_embedding,
                             classes, sel, exclude_id=item.id)
    prompt, stats = build_prompt(config.template, shots, item, mode="fewshot", task=res.task)
    record = PredictionRecord(
        item_id=item.id,
        strategy=strategy,
        gold_label=res.label_space.position(item.label),
        final_label=None,
        prompt_stats=stats,
    )
    meta = PromptMeta(classes=tuple(classes), gold_label=item.label,
                      last_shot_label=shots.last_shot_label(), item_id=item.id)
    return _complete_into(record, prompt, meta, llm, res.label_space)


def classify_cicle(res: CellResources, item: LabeledText, llm: LlmClient,
                   config: RunConfig) -> PredictionRecord:
    """Conformal gate: singleton sets bypass the LLM, larger sets get a pruned prompt."""
    qv = transform(res.tfidf, item.text)
    probs = predict_proba(res.model, qv)
    cset = predict_set(res.calibration, probs)
    record = PredictionRecord(
        item_id=item.id,
        strategy="cicle",
        gold_label=res.label_space.position(item.label),
        final_label=None,
        base_probs=[float(p) for p in probs],
        conformal_set=cset,
    )
    if len(cset) == 1:
        record.bypassed = True
        record.final_label = cset.candidates[0][0]
        return record
    classes = [res.label_space.labels[i] for i in cset.classes()]
    sel = SelectionConfig(k=config.k, strategy="sparse",
                          seed=stable_seed(config.seed, "item", item.id))
    shots = select_sparse(res.shot_pool, res.shot_vectors, qv, classes, sel, exclude_id=item.id)
    prompt, stats = build_prompt(config.template, shots, item, mode="cicle", task=res.task)
    record.prompt_stats = stats
    meta = PromptMeta(classes=tuple(classes), gold_label=item.label,
                      last_shot_label=shots.last_shot_label(), item_id=item.id)
    return _complete_into(record, prompt, meta, llm, res.label_space)


def _classify_cell(res: CellResources, test: Sequence[LabeledText], strategy: str,
                   llm: LlmClient | None, config: RunConfig,
                   test_embeddings=None) -> list[PredictionRecord]:
    if strategy == "base":
        fn = lambda item: classify_base(res, item)
    elif strategy == "cicle":
        fn = lambda item: classify_cicle(res, item, llm, config)
    elif strategy == "fewshot-dense":
        lookup = {item.id: emb for item, emb in zip(test, test_embeddings)}
        fn = lambda item: classify_fewshot(res, item, strategy, llm, config,
                                           query_embedding=lookup[item.id])
    else:
        fn = lambda item: classify_fewshot(res, item, strategy, llm, config)
    if config.jobs <= 1 or strategy == "base":
        return [fn(item) for item in test]
    with ThreadPoolExecutor(max_workers=config.jobs) as pool:
        return list(pool.map(fn, test))


def record_filename(dataset: str, size: int, seed: int, strategy: str) -> str:
    return f"{dataset}_{size}_{seed}_{strategy}.jsonl"


def _template_to_json(t: PromptTemplate) -> dict:
    return {"task_intro": t.task_intro, "example_format": t.example_format,
            "query_format": t.query_format, "instruction": t.instruction}


def config_to_json(config: RunConfig) -> dict:
    """Plain-JSON view of the configuration, embedded in the run manifest."""
    embedding = None
    if config.embedding is not None:
        e = config.embedding
        embedding = {"endpoint": e.endpoint,
                     "cache_dir": None if e.cache_dir is None else str(e.cache_dir),
                     "batch_size": e.batch_size, "timeout": e.timeout,
                     "max_retries": e.max_retries, "backoff": e.backoff}
    return {
        "datasets": [{"name": d.name, "path": str(d.path), "fmt": d.fmt,
                      "min_size": d.min_size, "task": d.task} for d in config.datasets],
        "output": str(config.output),
        "sizes": list(config.sizes),
        "seed": config.seed,
        "alpha": config.alpha,
        "k": config.k,
        "strategies": list(config.strategies),
        "calib_fraction": config.calib_fraction,
        "template": _template_to_json(config.template),
        "llm": {"endpoint": config.llm.endpoint, "model_id": config.llm.model_id,
                "max_new_tokens": config.llm.max_new_tokens,
                "deterministic": config.llm.deterministic,
                "timeout": config.llm.timeout, "max_retries": config.llm.max_retries,
                "concurrency_limit": config.llm.concurrency_limit,
                "backoff": config.llm.backoff, "oracle_params": config.llm.oracle_params},
        "embedding": embedding,
        "train": {"C": config.train.C, "tol": config.train.tol,
                  "max_iter": config.train.max_iter},
        "test_size": config.test_size,
        "jobs": config.jobs,
    }


def run_experiment(config: RunConfig, llm_client: LlmClient | None = None,
                   embed_client: EmbeddingClient | None = None) -> list[PredictionRecord]:
    """Run every (dataset, size, strategy) cell and return all records.

    Frozen datasets must already exist under ``output/data/{name}``. Existing
    cell files are loaded instead of recomputed unless ``force`` is set. Each
    cell failure is logged and skipped; the rest of the run proceeds.
    """
    needs_llm = any(s != "base" for s in config.strategies)
    if needs_llm and llm_client is None:
        llm_client = LlmClient(config.llm)
    if "fewshot-dense" in config.strategies and embed_client is None:
        if config.embedding is None:
            raise DataError("fewshot-dense strategy requires an embedding endpoint")
        embed_client = EmbeddingClient(config.embedding)

    records: list[PredictionRecord] = []
    manifest_files: dict[str, str] = {}
    datasets_meta: dict[str, dict] = {}
    for spec in config.datasets:
        data_dir = config.data_dir / spec.name
        pool, test, space, data_manifest = load_frozen(data_dir)
        datasets_meta[spec.name] = data_manifest["sha256"]
        test_embeddings = None
        if "fewshot-dense" in config.strategies:
            test_embeddings = embed_client.embed([t.text for t in test])
        for size in config.sizes:
            if size < spec.min_size:
                log.warning("skipping %s size %d: below the dataset minimum %d",
                            spec.name, size, spec.min_size)
                continue
            if size > len(pool):
                log.warning("skipping %s size %d: pool has only %d items",
                            spec.name, size, len(pool))
                continue
            pending = []
            for strategy in config.strategies:
                path = config.records_dir / record_filename(spec.name, size, config.seed, strategy)
                if path.exists() and not config.force:
                    log.info("cell file exists, reusing: %s", path.name)
                    records.extend(read_records(path))
                    manifest_files[path.name] = file_sha256(path)
                else:
                    pending.append(strategy)
            if not pending:
                continue
            cell_seed = stable_seed(config.seed, spec.name, size)
            try:
                subsample = stratified_subsample(pool, size, cell_seed)
                res = build_cell(subsample, space, config, cell_seed, task=spec.task,
                                 embed_client=embed_client, strategies=pending)
            except (CicleError, ValueError, OSError) as exc:
                log.error("cell %s size %d failed to build: %s", spec.name, size, exc)
                continue
            for strategy in pending:
                path = config.records_dir / record_filename(spec.name, size, config.seed, strategy)
                try:
                    cell = _classify_cell(res, test, strategy, llm_client, config,
                                          test_embeddings=test_embeddings)
                except (CicleError, ValueError, OSError) as exc:
                    log.error("cell %s size %d strategy %s failed: %s",
                              spec.name, size, strategy, exc)
                    continue
                write_records(cell, path)
                manifest_files[path.name] = file_sha256(path)
                records.extend(cell)

    manifest = {
        "config": config_to_json(config),
        "datasets": datasets_meta,
        "records": manifest_files,
    }
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "run_manifest.json").open("w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
    return records
