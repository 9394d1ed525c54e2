"""Command-line entry point.

Verbs: train, eval, predict, gradcheck, analyze-attention, gen-toy, kfold.
Exit codes: 0 success, 1 usage/validation error, 2 internal error. The
KECI_LOG environment variable (error, info, debug) controls log verbosity;
logs go to stderr, machine-readable output to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .corpus import TaskSchema, kfold_split, load_dataset
from .errors import KeciError
from .kb import KnowledgeBase, load_kb
from .model import ModelConfig, VARIANTS
from .toydata import ToySpec, write_toy_files
from .train import fit, gradient_check_pipeline, load_checkpoint, save_checkpoint

logger = logging.getLogger("keci")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; the CLI contract wants 1
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="keci", description="Span-graph entity and relation extraction with KB fusion.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, *names):
        flags = {
            "config": dict(type=Path, help="model config JSON"),
            "train": dict(type=Path, help="training set JSONL"),
            "dev": dict(type=Path, help="development set JSONL"),
            "test": dict(type=Path, help="test set JSONL"),
            "kb": dict(type=Path, help="knowledge base JSON"),
            "schema": dict(type=Path, help="task schema JSON"),
            "out": dict(type=Path, help="output path"),
            "model": dict(type=Path, help="checkpoint path"),
            "seed": dict(type=int, default=None, help="override the config seed"),
            "threads": dict(type=int, default=1, help="threads for per-document evaluation"),
        }
        for name in names:
            p.add_argument(f"--{name}", **flags[name])

    p = sub.add_parser("train", parents=[], description="Train a model and write a checkpoint.")
    common(p, "config", "train", "dev", "kb", "schema", "out", "seed")
    p.add_argument("--ablation", default="full", help="variant to train (default: full)")

    p = sub.add_parser("eval", description="Evaluate a checkpoint, or train-and-evaluate ablations / k folds.")
    common(p, "config", "train", "dev", "test", "kb", "schema", "model", "seed", "threads")
    p.add_argument("--ablation", help="comma-separated variants to train and compare")
    p.add_argument("--folds", type=int, help="k for cross-validation over --train")

    p = sub.add_parser("predict", description="Decode predictions for a test set as JSONL.")
    common(p, "model", "test", "kb", "out", "threads")
    p.add_argument("--attn", action="store_true", help="include per-span attention weights")

    p = sub.add_parser("gradcheck", description="Finite-difference check of the full pipeline gradient.")
    common(p, "config", "seed")

    p = sub.add_parser("analyze-attention", description="Average candidate attention per semantic type.")
    common(p, "model", "test", "kb", "threads")

    p = sub.add_parser("gen-toy", description="Generate a synthetic corpus and mini-KB.")
    common(p, "out", "seed")
    p.add_argument("--spec", type=Path, required=True, help="toy spec JSON")

    p = sub.add_parser("kfold", description="k-fold cross-validation (train + score per fold).")
    common(p, "config", "train", "kb", "schema", "seed")
    p.add_argument("--folds", type=int, default=10)

    return parser


def _load_config(args) -> ModelConfig:
    if getattr(args, "config", None):
        config = ModelConfig.from_json_obj(json.loads(Path(args.config).read_text()))
    else:
        config = ModelConfig()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


def _load_kb_or_empty(args) -> KnowledgeBase:
    if getattr(args, "kb", None):
        return load_kb(args.kb)
    return KnowledgeBase.empty()


def _load_schema(args, docs) -> TaskSchema:
    if getattr(args, "schema", None):
        return TaskSchema.load(args.schema)
    from .model import infer_schema

    return infer_schema(docs)


def _print_metrics(label_rows: dict[str, dict]) -> None:
    print(ev.metrics_table(label_rows))
    if len(label_rows) == 1:
        print(json.dumps(next(iter(label_rows.values())), sort_keys=True))
    else:
        print(json.dumps(label_rows, sort_keys=True))


def _cmd_train(args) -> int:
    config = _load_config(args)
    if args.train is None or args.out is None:
        raise _UsageError("train requires --train and --out")
    variant = args.ablation
    if variant not in VARIANTS:
        raise _UsageError(f"unknown variant {variant!r}; pick from {sorted(VARIANTS)}")
    train_docs = load_dataset(args.train)
    schema = _load_schema(args, train_docs)
    train_docs = load_dataset(args.train, schema)
    dev_docs = load_dataset(args.dev, schema) if args.dev else []
    kb = _load_kb_or_empty(args)

    def progress(record):
        dev_part = ""
        if record["dev_entity_f1"] is not None:
            dev_part = f" dev_entity_f1 {record['dev_entity_f1']:.4f} dev_relation_f1 {record['dev_relation_f1']:.4f}"
        print(f"epoch {record['epoch']} loss {record['loss']:.4f}{dev_part}")

    outcome = fit(config, train_docs, dev_docs, kb, schema, variant=variant, progress=progress)
    save_checkpoint(outcome.pipeline, args.out)
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    kb = _load_kb_or_empty(args)
    if args.folds:
        return _cmd_kfold(args)
    if args.ablation:
        if args.train is None or args.dev is None:
            raise _UsageError("eval --ablation requires --train and --dev")
        config = _load_config(args)
        variants = [v.strip() for v in args.ablation.split(",") if v.strip()]
        train_docs = load_dataset(args.train)
        schema = _load_schema(args, train_docs)
        train_docs = load_dataset(args.train, schema)
        dev_docs = load_dataset(args.dev, schema)
        rows = ev.run_ablation(variants, config, train_docs, dev_docs, kb, schema)
        _print_metrics(rows)
        return 0
    if args.model is None or args.test is None:
        raise _UsageError("eval requires --model and --test (or --ablation / --folds)")
    pipeline = load_checkpoint(args.model, kb=kb if kb.entities or kb.semantic_types else None)
    docs = load_dataset(args.test, pipeline.schema)
    metrics = ev.evaluate_pipeline(pipeline, docs, threads=args.threads)
    _print_metrics({"test": metrics})
    return 0


def _cmd_predict(args) -> int:
    if args.model is None or args.test is None or args.out is None:
        raise _UsageError("predict requires --model, --test and --out")
    kb = _load_kb_or_empty(args)
    pipeline = load_checkpoint(args.model, kb=kb if kb.entities or kb.semantic_types else None)
    docs = load_dataset(args.test, pipeline.schema)
    from .model import run_documents

    results = run_documents(pipeline, docs, threads=args.threads)
    with open(args.out, "w", encoding="utf-8") as f:
        for result in results:
            graph = ev.decode_graph(result, pipeline.schema, pipeline.config)
            obj = {
                "id": graph.doc_id,
                "text": result.doc.text,
                "entities": [{"start": s.start, "end": s.end, "type": t} for s, t in graph.entities],
                "relations": [{"head": h, "tail": t, "type": r} for h, t, r in graph.relations],
            }
            if args.attn:
                obj["attention"] = [
                    {
                        "start": span.start,
                        "end": span.end,
                        "sentinel": att.sentinel_weight,
                        "candidates": [
                            {"entity": result.kg.nodes[n].ref, "weight": w}
                            for n, w in zip(att.candidate_nodes, att.candidate_weights)
                        ],
                    }
                    for span, att in zip(result.kept_spans, result.attention)
                ]
            f.write(json.dumps(obj, sort_keys=True) + "\n")
    print(f"predictions written to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    config = None
    if args.config:
        config = ModelConfig.from_json_obj(json.loads(Path(args.config).read_text()))
    seed = args.seed if args.seed is not None else 7
    result = gradient_check_pipeline(seed=seed, config=config)
    print(str(result))
    return 0 if result.max_rel_error < 1e-3 else 1


def _cmd_analyze_attention(args) -> int:
    if args.model is None or args.test is None:
        raise _UsageError("analyze-attention requires --model and --test")
    kb = _load_kb_or_empty(args)
    pipeline = load_checkpoint(args.model, kb=kb if kb.entities or kb.semantic_types else None)
    docs = load_dataset(args.test, pipeline.schema)
    report = ev.attention_report(pipeline, docs, threads=args.threads)
    for sem_type, stats in report.per_type.items():
        print(f"{sem_type:24s} mean_attention {stats['mean']:.4f} count {stats['count']}")
    print(f"{'<sentinel>':24s} mean_attention {report.sentinel_mean:.4f} spans {report.n_spans}")
    print(json.dumps(report.to_json_obj(), sort_keys=True))
    return 0


def _cmd_gen_toy(args) -> int:
    if args.out is None:
        raise _UsageError("gen-toy requires --out")
    spec = ToySpec.from_json_obj(json.loads(Path(args.spec).read_text()))
    seed = args.seed if args.seed is not None else 0
    paths = write_toy_files(spec, seed, args.out)
    for name in ("train", "dev", "kb", "schema"):
        print(f"{name}: {paths[name]}")
    return 0


def _cmd_kfold(args) -> int:
    if args.train is None:
        raise _UsageError("kfold requires --train")
    config = _load_config(args)
    kb = _load_kb_or_empty(args)
    all_docs = load_dataset(args.train)
    schema = _load_schema(args, all_docs)
    all_docs = load_dataset(args.train, schema)
    k = args.folds
    folds = kfold_split(all_docs, k, config.seed)
    rows = {}
    for i, (fold_train, fold_test) in enumerate(folds):
        outcome = fit(config, fold_train, [], kb, schema)
        rows[f"fold{i}"] = ev.evaluate_pipeline(outcome.pipeline, fold_test)
    means = {}
    for task in ("entity", "relation"):
        means[task] = {}
        for mode in ("micro", "macro"):
            f1s = [rows[f]["{0}".format(task)][mode]["f1"] for f in rows]
            means[task][mode] = {"f1": float(np.mean(f1s)), "std": float(np.std(f1s))}
    print(ev.metrics_table(rows))
    print(json.dumps({"folds": rows, "mean": means}, sort_keys=True))
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "gradcheck": _cmd_gradcheck,
    "analyze-attention": _cmd_analyze_attention,
    "gen-toy": _cmd_gen_toy,
    "kfold": _cmd_kfold,
}


def run(argv: list[str]) -> int:
    level = os.environ.get("KECI_LOG", "info").lower()
    logging.basicConfig(level=_LOG_LEVELS.get(level, logging.INFO), stream=sys.stderr, format="%(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.verb](args)
    except _UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except (KeciError, ValueError, IndexError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # unexpected: internal error
        logger.exception("internal error")
        print(f"internal error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
