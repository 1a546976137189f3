"""Command-line pipeline: ingest -> detect -> train -> eval / sweep.

Stages communicate through files so the expensive LLM stage runs once and
is reused. Exit codes: 0 success, 1 usage error, 2 data error,
3 transport error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import evaluate as eval_mod
from . import features as feat_mod
from . import llm as llm_mod
from . import moe as moe_mod
from . import prompts as prompts_mod
from .corpus import Corpus, Split, VulnType

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRANSPORT = 3

_DATA_ERRORS = (
    corpus_mod.UnbalancedBraces,
    corpus_mod.MalformedRecord,
    corpus_mod.DuplicateId,
    corpus_mod.MissingLabel,
    corpus_mod.AlreadySplit,
    prompts_mod.CodeTooLong,
    llm_mod.CacheCorrupt,
    llm_mod.BudgetExceeded,
    feat_mod.DimensionMismatch,
    moe_mod.CheckpointError,
    moe_mod.EmptyBatch,
    moe_mod.NonFiniteLoss,
    eval_mod.LengthMismatch,
    eval_mod.EmptyInput,
    FileNotFoundError,
    ValueError,
)
_TRANSPORT_ERRORS = (
    llm_mod.TransportError,
    llm_mod.EndpointRejected,
    feat_mod.ProviderUnavailable,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 instead of argparse's default 2
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Config file handling
# ---------------------------------------------------------------------------

_MOE_KEYS = {f.name for f in dataclasses.fields(moe_mod.MoeConfig)}
_INFER_KEYS = {f.name for f in dataclasses.fields(llm_mod.InferenceParams)}


def load_config_file(path: str | Path) -> dict:
    """Parse a JSON object or flat key=value config file."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.strip()
    if stripped.startswith("{"):
        obj = json.loads(stripped)
        if not isinstance(obj, dict):
            raise ValueError(f"config file {path} must hold a JSON object")
        return obj
    config = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        try:
            config[key.strip()] = json.loads(value.strip())
        except json.JSONDecodeError:
            config[key.strip()] = value.strip()
    return config


def _merged_config(args, keys: set[str], cls):
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    merged = {}
    if getattr(args, "config", None):
        file_cfg = load_config_file(args.config)
        merged.update({k: v for k, v in file_cfg.items() if k in keys})
    for key in keys:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
    return cls(**merged)


def _add_moe_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON or key=value config file")
    parser.add_argument("--d", type=int, dest="d")
    parser.add_argument("--n-heads", type=int, dest="n_heads")
    parser.add_argument("--d-gate", type=int, dest="d_gate")
    parser.add_argument("--k", type=int, dest="k")
    parser.add_argument("--alpha", type=float, dest="alpha")
    parser.add_argument("--gamma", type=float, dest="gamma")
    parser.add_argument("--eta", type=float, dest="eta")
    parser.add_argument("--epochs", type=int, dest="epochs")
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--seed", type=int, dest="seed")


def _add_provider_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--provider", choices=("mock", "remote"), default="mock")
    parser.add_argument("--endpoint", help="embedding endpoint for --provider remote")
    parser.add_argument(
        "--provider-seed", type=int, default=None, help="mock provider seed (defaults to --seed)"
    )


def _make_provider(args, config: moe_mod.MoeConfig):
    if args.provider == "mock":
        seed = args.provider_seed if args.provider_seed is not None else config.seed
        return feat_mod.mock_provider(config.d, seed)
    endpoint = args.endpoint or llm_mod.endpoint_from_env()
    if not endpoint:
        raise UsageError("remote provider needs --endpoint or the endpoint env var")
    return feat_mod.remote_provider(endpoint, config.d)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    labels = corpus_mod.load_label_manifest(args.labels)
    corpus = corpus_mod.load_corpus(args.src, vuln_type=VulnType(args.vuln), labels=labels)
    corpus_mod.save_corpus(corpus, args.out)
    counts = corpus.class_counts()
    print(f"ingested {len(corpus)} records ({args.vuln})")
    print(f"  vulnerable (label=1): {counts[1]}")
    print(f"  secure (label=0): {counts[0]}")
    return EXIT_OK


def cmd_detect(args) -> int:
    corpus = corpus_mod.load_corpus(args.corpus)
    if args.templates:
        templates = prompts_mod.load_templates(args.templates)
    else:
        templates = prompts_mod.builtin_templates()
    template = templates[corpus.vuln_type]
    params = _merged_config(args, _INFER_KEYS, llm_mod.InferenceParams)

    if args.stub:
        transport = llm_mod.StubTransport.from_file(args.stub, cycle=True)
        parallelism = 1  # scripted responses must be consumed in order
        backoff = 0.0
    else:
        endpoint = args.endpoint or llm_mod.endpoint_from_env()
        if not endpoint:
            raise UsageError("detect needs --stub FILE or an LLM endpoint (flag or env)")
        transport = llm_mod.HttpTransport(endpoint, api_key=llm_mod.api_key_from_env())
        parallelism = llm_mod.parallelism_from_env()
        backoff = llm_mod.DEFAULT_BACKOFF

    cache_dir = Path(args.cache)
    cache_dir.mkdir(parents=True, exist_ok=True)
    cache = llm_mod.VerdictCache(cache_dir / "llm_cache.jsonl")

    def detect_one(record):
        try:
            verdict = llm_mod.cached_detect(
                record, template, params, cache, transport, backoff=backoff
            )
            return llm_mod.VerdictRecord(
                id=record.id,
                prediction=verdict.prediction,
                explanation=verdict.explanation,
                votes=verdict.vote_counts_by_name(),
            ), None
        except (llm_mod.AllAbstained, *_TRANSPORT_ERRORS, llm_mod.BudgetExceeded) as exc:
            return llm_mod.VerdictRecord(
                id=record.id, prediction=None, explanation="", votes={}
            ), exc

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(detect_one, corpus.records))
    else:
        outcomes = [detect_one(r) for r in corpus.records]

    failures = []
    rows = []
    for (row, exc), record in zip(outcomes, corpus.records):
        rows.append(row)
        if exc is not None:
            failures.append(exc)
            print(f"detect: {record.id}: recorded as abstention ({exc})", file=sys.stderr)
    llm_mod.write_verdict_file(rows, args.out)
    print(f"detected {len(rows)} records, {len(failures)} abstained by failure")
    if failures and len(failures) == len(rows):
        return (
            EXIT_TRANSPORT
            if any(isinstance(e, _TRANSPORT_ERRORS) for e in failures)
            else EXIT_DATA
        )
    return EXIT_OK


def _load_datasets(args, config: moe_mod.MoeConfig):
    """Corpus + verdicts + provider -> per-split Datasets."""
    corpus = corpus_mod.load_corpus(args.corpus)
    verdicts = llm_mod.read_verdict_file(args.verdicts)
    provider = _make_provider(args, config)
    if all(r.split == Split.UNASSIGNED for r in corpus.records):
        corpus = corpus_mod.split_corpus(corpus, config.seed)
    datasets = {}
    for split in (Split.TRAIN, Split.VALID, Split.TEST):
        bundles, labels = [], []
        for record in corpus.by_split(split):
            if record.id not in verdicts:
                raise ValueError(f"no verdict for record {record.id!r} in {args.verdicts}")
            v = verdicts[record.id]
            bundles.append(
                feat_mod.build_bundle(record.source, v.explanation, v.prediction, provider)
            )
            labels.append(record.label)
        datasets[split] = eval_mod.Dataset(bundles, labels)
    return corpus, datasets


def cmd_train(args) -> int:
    config = _merged_config(args, _MOE_KEYS, moe_mod.MoeConfig)
    _, datasets = _load_datasets(args, config)
    train_ds, valid_ds = datasets[Split.TRAIN], datasets[Split.VALID]
    if len(train_ds) == 0:
        raise ValueError("training split is empty")
    model, history = moe_mod.fit(
        train_ds.batches(config.batch_size), valid_ds.batches(config.batch_size), config
    )
    moe_mod.save_model(model, args.out)
    best = history.best_epoch
    last = history.epochs[-1] if history.epochs else None
    best_f1 = (
        history.epochs[best].valid_f1 if best is not None else (last.valid_f1 if last else None)
    )
    if best_f1 is None:
        print(f"trained {config.epochs} epochs (no validation data); checkpoint: {args.out}")
    else:
        print(f"f1={best_f1:.4f} (validation, best epoch {best}); checkpoint: {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = moe_mod.load_model(args.ckpt)
    config = model.config
    corpus, datasets = _load_datasets(args, config)
    split = Split(args.split)
    dataset = datasets[split]
    if len(dataset) == 0:
        raise ValueError(f"{split.value} split is empty")
    predictions = [moe_mod.predict(b, model, mode=args.mode).label for b in dataset.bundles]
    report = eval_mod.compute_metrics(
        predictions,
        dataset.labels,
        vuln_type=corpus.vuln_type.value,
        mode=args.mode,
        config=config.to_dict(),
        seed=config.seed,
    )
    Path(args.out).write_text(report.to_json(), encoding="utf-8")
    if args.text:
        Path(args.text).write_text(report.to_text(), encoding="utf-8")
    print(f"f1={report.f1:.4f} precision={report.precision:.4f} recall={report.recall:.4f}")
    return EXIT_OK


def _parse_grid(raw: str) -> list[float]:
    try:
        return [float(x) for x in raw.split(",") if x.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad grid {raw!r}: {exc}") from exc


def cmd_sweep(args) -> int:
    config = _merged_config(args, _MOE_KEYS, moe_mod.MoeConfig)
    _, datasets = _load_datasets(args, config)
    cells = eval_mod.sweep(
        datasets[Split.TRAIN],
        datasets[Split.VALID],
        datasets[Split.TEST],
        config,
        _parse_grid(args.alphas),
        _parse_grid(args.gammas),
    )
    Path(args.out).write_text(eval_mod.sweep_to_csv(cells), encoding="utf-8")
    print(f"swept {len(cells)} grid points -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="solmoe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="extract labeled functions into a corpus file")
    p.add_argument("--src", required=True, help="directory of .sol files")
    p.add_argument("--labels", required=True, help="JSON-lines id/label manifest")
    p.add_argument("--vuln", required=True, choices=[v.value for v in VulnType])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("detect", help="run voted LLM detection over a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--cache", required=True, help="cache directory")
    p.add_argument("--out", required=True)
    p.add_argument("--stub", help="scripted responses file (one JSON string per line)")
    p.add_argument("--endpoint", help="chat-completion endpoint URL")
    p.add_argument("--templates", help="prompt override directory")
    p.add_argument("--config", help="JSON or key=value config file")
    p.add_argument("--model", dest="model_name")
    p.add_argument("--temperature", type=float, dest="temperature")
    p.add_argument("--top-p", type=float, dest="top_p")
    p.add_argument("--max-input-tokens", type=int, dest="max_input_tokens")
    p.add_argument("--max-output-tokens", type=int, dest="max_output_tokens")
    p.add_argument("--repetition-penalty", type=float, dest="repetition_penalty")
    p.add_argument("--n-votes", type=int, dest="n_votes")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("train", help="build features, train, save a checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--verdicts", required=True)
    p.add_argument("--out", required=True)
    _add_provider_flags(p)
    _add_moe_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--verdicts", required=True)
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--text", help="also write an aligned-column text report here")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--mode", default="weighted", choices=("weighted", "selection"))
    _add_provider_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid of fits over alpha x gamma, CSV out")
    p.add_argument("--corpus", required=True)
    p.add_argument("--verdicts", required=True)
    p.add_argument("--alphas", required=True, help="comma-separated list")
    p.add_argument("--gammas", required=True, help="comma-separated list")
    p.add_argument("--out", required=True)
    _add_provider_flags(p)
    _add_moe_flags(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _TRANSPORT_ERRORS as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except _DATA_ERRORS as exc:
        print(f"data error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return EXIT_DATA


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
