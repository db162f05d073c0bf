"""Command-line entry points: prepare frozen splits, run cells, emit reports.

Configuration comes from an optional JSON file (--config) overridden by
flags; flags always win. Exit codes: 0 success, 2 usage, 3 data error,
4 transport error. Errors print a single machine-parsable stderr line of
the form "error: <kind>: <message>".
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .classifier import TrainConfig
from .corpus import freeze_dataset, load_dataset, load_frozen, stable_seed
from .errors import DataError, TransportError
from .evalreport import build_report, emit_report
from .llm_client import LlmConfig, ORACLES
from .pipeline import (DEFAULT_SIZES, DEFAULT_STRATEGIES, STRATEGIES, DatasetSpec, RunConfig,
                       read_records, record_filename, run_experiment)
from .prompting import DEFAULT_TEMPLATE, PromptTemplate, template_from_file
from .vectorize import EmbeddingConfig

log = logging.getLogger(__name__)


class UsageError(ValueError):
    """Bad invocation (unknown strategy, malformed NAME=VALUE); exits 2."""


def _split_pair(value: str, flag: str) -> tuple[str, str]:
    if "=" not in value:
        raise UsageError(f"{flag} expects NAME=VALUE, got {value!r}")
    name, _, rest = value.partition("=")
    if not name or not rest:
        raise UsageError(f"{flag} expects NAME=VALUE, got {value!r}")
    return name, rest


def _parse_int_list(value: str, flag: str) -> list[int]:
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {value!r}") from None


def _build_datasets(payload: dict, args) -> list[DatasetSpec]:
    by_name: dict[str, dict] = {}
    for entry in payload.get("datasets", []):
        if not isinstance(entry, dict) or "name" not in entry or "path" not in entry:
            raise DataError("config datasets entries need at least 'name' and 'path'")
        by_name[str(entry["name"])] = {
            "path": str(entry["path"]),
            "fmt": entry.get("fmt"),
            "min_size": int(entry.get("min_size", 0)),
            "task": str(entry.get("task", "text classification")),
        }
    for value in args.dataset or []:
        name, path = _split_pair(value, "--dataset")
        by_name.setdefault(name, {"path": path, "fmt": None, "min_size": 0,
                                  "task": "text classification"})["path"] = path
    for value in args.min_size or []:
        name, n = _split_pair(value, "--min-size")
        if name not in by_name:
            raise UsageError(f"--min-size names unknown dataset {name!r}")
        try:
            by_name[name]["min_size"] = int(n)
        except ValueError:
            raise UsageError(f"--min-size expects an integer, got {n!r}") from None
    for value in args.task or []:
        name, task = _split_pair(value, "--task")
        if name not in by_name:
            raise UsageError(f"--task names unknown dataset {name!r}")
        by_name[name]["task"] = task
    if not by_name:
        raise UsageError("no datasets given; use --dataset NAME=PATH or a config file")
    return [DatasetSpec(name=name, **fields) for name, fields in by_name.items()]


def _build_template(payload: dict, args) -> PromptTemplate:
    if args.template:
        return template_from_file(args.template)
    raw = payload.get("template")
    if raw is None:
        return DEFAULT_TEMPLATE
    if isinstance(raw, str):
        return template_from_file(raw)
    if isinstance(raw, dict):
        missing = [k for k in ("task_intro", "example_format", "query_format", "instruction")
                   if k not in raw]
        if missing:
            raise DataError(f"config template is missing fields: {', '.join(missing)}")
        return PromptTemplate(task_intro=str(raw["task_intro"]),
                              example_format=str(raw["example_format"]),
                              query_format=str(raw["query_format"]),
                              instruction=str(raw["instruction"]))
    raise DataError("config template must be a path or an object")


def _build_llm(payload: dict, args) -> LlmConfig:
    raw = dict(payload.get("llm", {}))
    raw.pop("deterministic", None)
    if args.oracle and args.llm_endpoint:
        raise UsageError("--oracle and --llm-endpoint are mutually exclusive")
    if args.oracle:
        if args.oracle not in ORACLES:
            raise UsageError(
                f"unknown oracle {args.oracle!r}; known oracles: {', '.join(sorted(ORACLES))}")
        raw["endpoint"] = args.oracle
    if args.llm_endpoint:
        raw["endpoint"] = args.llm_endpoint
    if args.model_id:
        raw["model_id"] = args.model_id
    if args.max_new_tokens is not None:
        raw["max_new_tokens"] = args.max_new_tokens
    raw.setdefault("endpoint", "perfect")
    return LlmConfig(**raw)


def _build_embedding(payload: dict, args) -> EmbeddingConfig | None:
    raw = dict(payload.get("embedding") or {})
    if args.embedding_endpoint:
        raw["endpoint"] = args.embedding_endpoint
    if args.embedding_cache:
        raw["cache_dir"] = args.embedding_cache
    if not raw.get("endpoint"):
        return None
    return EmbeddingConfig(**raw)


def build_run_config(args) -> RunConfig:
    """Merge the JSON config file (if any) with flag overrides; flags win."""
    payload: dict = {}
    if args.config:
        path = Path(args.config)
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"config {path} is not valid JSON: {exc.msg}") from None
        if not isinstance(payload, dict):
            raise DataError("config root must be a JSON object")

    sizes = payload.get("sizes", list(DEFAULT_SIZES))
    if args.sizes:
        sizes = _parse_int_list(args.sizes, "--sizes")
    strategies = payload.get("strategies", list(DEFAULT_STRATEGIES))
    if args.strategies:
        strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    unknown = [s for s in strategies if s not in STRATEGIES]
    if unknown:
        raise UsageError(f"unknown strategy: {', '.join(unknown)}; "
                         f"choose from {', '.join(STRATEGIES)}")

    train_raw = payload.get("train", {})
    kwargs = {
        "datasets": _build_datasets(payload, args),
        "output": args.output or payload.get("output", "runs"),
        "sizes": sizes,
        "seed": args.seed if args.seed is not None else int(payload.get("seed", 0)),
        "alpha": args.alpha if args.alpha is not None else float(payload.get("alpha", 0.05)),
        "k": args.k if args.k is not None else int(payload.get("k", 2)),
        "strategies": strategies,
        "calib_fraction": (args.calib_fraction if args.calib_fraction is not None
                           else float(payload.get("calib_fraction", 0.2))),
        "template": _build_template(payload, args),
        "llm": _build_llm(payload, args),
        "embedding": _build_embedding(payload, args),
        "test_size": (args.test_size if args.test_size is not None
                      else int(payload.get("test_size", 1000))),
        "jobs": args.jobs if args.jobs is not None else int(payload.get("jobs", 1)),
        "force": bool(args.force),
    }
    if train_raw:
        kwargs["train"] = TrainConfig(C=float(train_raw.get("C", 1.0)),
                                      tol=float(train_raw.get("tol", 1e-4)),
                                      max_iter=int(train_raw.get("max_iter", 1000)))
    return RunConfig(**kwargs)


def _dataset_sizes(config: RunConfig, spec: DatasetSpec) -> list[int]:
    kept = [s for s in config.sizes if s >= spec.min_size]
    rejected = [s for s in config.sizes if s < spec.min_size]
    if rejected:
        log.warning("dataset %s: sizes below the minimum %d are skipped: %s",
                    spec.name, spec.min_size, ", ".join(map(str, rejected)))
    return kept


def cmd_prepare(args) -> int:
    """Freeze each raw dataset into pool/test splits plus a hashed manifest."""
    config = build_run_config(args)
    for spec in config.datasets:
        items, space = load_dataset(spec.path, spec.fmt)
        sizes = _dataset_sizes(config, spec)
        test_seed = stable_seed(config.seed, "test", spec.name)
        manifest = freeze_dataset(items, space, config.data_dir / spec.name, spec.name,
                                  config.test_size, test_seed, sizes=sizes)
        print(f"prepared {spec.name}: pool={manifest['pool_size']} "
              f"test={manifest['test_size']} classes={len(space)}")
    return 0


def cmd_run(args) -> int:
    """Classify every prepared cell and write one record file per cell."""
    config = build_run_config(args)
    records = run_experiment(config)
    print(f"run complete: {len(records)} records under {config.records_dir}")
    return 0


def cmd_report(args) -> int:
    """Aggregate record files into report.json and plot-ready CSVs."""
    config = build_run_config(args)
    cells = {}
    class_counts = {}
    missing: list[str] = []
    for spec in config.datasets:
        _, _, space, _ = load_frozen(config.data_dir / spec.name)
        class_counts[spec.name] = len(space)
        for size in _dataset_sizes(config, spec):
            for strategy in config.strategies:
                path = config.records_dir / record_filename(spec.name, size, config.seed,
                                                            strategy)
                if not path.exists():
                    missing.append(path.name)
                    continue
                cells[(spec.name, size, strategy)] = read_records(path)
    if missing:
        raise DataError(f"missing record files: {', '.join(missing)}")
    report = build_report(cells, class_counts)
    written = emit_report(report, Path(config.output) / "report")
    print(f"report written: {', '.join(p.name for p in written)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("configuration")
    g.add_argument("--config", metavar="PATH", help="JSON config file; flags override it")
    g.add_argument("--output", metavar="DIR", help="output directory (default runs)")
    g.add_argument("--dataset", action="append", metavar="NAME=PATH",
                   help="dataset name and raw file path; repeatable")
    g.add_argument("--min-size", action="append", metavar="NAME=N",
                   help="smallest usable subsample size for a dataset; repeatable")
    g.add_argument("--task", action="append", metavar="NAME=TEXT",
                   help="task phrasing used in that dataset's prompts; repeatable")
    g.add_argument("--sizes", metavar="N,N,...",
                   help="comma-separated subsample sizes (default 100..5000)")
    g.add_argument("--seed", type=int, help="run seed (default 0)")
    g.add_argument("--test-size", type=int, help="frozen test split size (default 1000)")
    g.add_argument("--alpha", type=float, help="conformal miscoverage level (default 0.05)")
    g.add_argument("--k", type=int, help="shots per candidate class (default 2)")
    g.add_argument("--strategies", metavar="S,S,...",
                   help=f"strategies to run, from: {', '.join(STRATEGIES)}")
    g.add_argument("--calib-fraction", type=float,
                   help="calibration share of each subsample (default 0.2)")
    g.add_argument("--template", metavar="PATH", help="prompt template JSON file")
    g.add_argument("--oracle", metavar="NAME",
                   help=f"mock oracle instead of a live endpoint: {', '.join(sorted(ORACLES))}")
    g.add_argument("--llm-endpoint", metavar="URL",
                   help="chat-completions endpoint URL (API key via CICLE_API_KEY)")
    g.add_argument("--model-id", metavar="ID", help="model identifier sent to the endpoint")
    g.add_argument("--max-new-tokens", type=int, help="completion token cap (default 5)")
    g.add_argument("--embedding-endpoint", metavar="URL",
                   help="embedding service URL for the dense few-shot baseline")
    g.add_argument("--embedding-cache", metavar="DIR", help="embedding cache directory")
    g.add_argument("--jobs", type=int, help="concurrent items per cell (default 1)")
    g.add_argument("--force", action="store_true", help="recompute existing cell files")

    parser = argparse.ArgumentParser(
        prog="cicle",
        description="Conformal gating for in-context text classification: "
                    "prepare data, run strategy cells, report metrics.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("prepare", parents=[common],
                       help="freeze raw datasets into pool/test splits")
    p.set_defaults(fn=cmd_prepare)
    p = sub.add_parser("run", parents=[common],
                       help="run every (dataset, size, strategy) cell")
    p.set_defaults(fn=cmd_run)
    p = sub.add_parser("report", parents=[common],
                       help="aggregate record files into CSV/JSON reports")
    p.set_defaults(fn=cmd_report)
    return parser


def _report_error(kind: str, exc: Exception) -> None:
    message = " ".join(str(exc).split())
    print(f"error: {kind}: {message}", file=sys.stderr)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code is None else int(exc.code)
    try:
        return args.fn(args)
    except UsageError as exc:
        _report_error("usage", exc)
        return 2
    except TransportError as exc:
        _report_error("transport", exc)
        return 4
    except DataError as exc:
        _report_error("data", exc)
        return 3
    except (ValueError, OSError) as exc:
        _report_error("data", exc)
        return 3


def entry() -> None:
    raise SystemExit(main(sys.argv[1:]))
