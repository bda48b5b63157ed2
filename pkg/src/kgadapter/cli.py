"""Command-line entry point: ``kgadapter <subcommand> ...``.

Checkpoints are archives written by :mod:`kgadapter.numerics`. The LM's
vocabulary sits next to its checkpoint as ``<lm>.vocab``; the training
configuration used for an adapter sits next to it as ``<adapter>.cfg``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import checks
from .adapter import AdapterError, KnowledgeAdapter
from .harness import (ABLATIONS, HarnessError, Pipeline, PretrainConfig, TrainConfig, build_lm, evaluate,
                      load_benchmark, read_config_file, run_ablation, train_adapter)
from .kg import LoadError
from .lm import FrozenLM, LMConfig, LMError, Tokenizer
from .numerics import NumericsError
from .retrieval import HopClassifier, HopConfig, RetrievalError, train_hop_classifier
from .synth import SynthError, gen_synthetic

log = logging.getLogger("kgadapter")


class CLIError(Exception):
    pass


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(2, "No such file or directory", str(p))
    return p


def _vocab_path(lm_path) -> Path:
    return Path(str(lm_path) + ".vocab")


def _config_path(adapter_path) -> Path:
    return Path(str(adapter_path) + ".cfg")


def _load_lm(path) -> tuple[FrozenLM, Tokenizer]:
    _require(path)
    tokenizer = Tokenizer.load(_require(_vocab_path(path)))
    return FrozenLM.load(path, tokenizer), tokenizer


def _train_config(args, base: dict | None = None) -> TrainConfig:
    values: dict = dict(base or {})
    if getattr(args, "config", None):
        values.update(read_config_file(_require(args.config)))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CLIError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return TrainConfig.from_mapping(values)


def _write_config(cfg: TrainConfig, path) -> None:
    lines = [f"{k} = {v}\n" for k, v in dataclasses.asdict(cfg).items()]
    Path(path).write_text("".join(lines), encoding="utf-8")


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> None:
    bench = gen_synthetic(args.seed or 0, args.entities, args.relations, args.questions, args.max_hops,
                          n_test=args.test)
    bench.write(args.out)
    print(f"wrote benchmark to {args.out}")


def cmd_pretrain_lm(args) -> None:
    _, kg, train, test = load_benchmark(_require(args.data))
    cfg = PretrainConfig(steps=args.steps, n_sequences=args.sequences, seed=args.seed or 0,
                         lm=LMConfig(seed=args.seed or 0))
    lm, tokenizer, losses = build_lm(kg, train, train + test, cfg)
    lm.save(args.out, tokenizer)
    tokenizer.save(_vocab_path(args.out))
    print(f"pretrained LM: final loss {losses[-1]:.4f}, vocabulary {len(tokenizer)}; wrote {args.out}")


def cmd_train_hop(args) -> None:
    bench, kg, train, _ = load_benchmark(_require(args.data))
    clf = train_hop_classifier(train, bench.max_hops, HopConfig(epochs=args.epochs, seed=args.seed or 0))
    clf.save(args.out)
    print(f"hop classifier: train accuracy {clf.train_accuracy:.3f}; wrote {args.out}")


def cmd_train_adapter(args) -> None:
    bench, kg, train, _ = load_benchmark(_require(args.data))
    lm, tokenizer = _load_lm(args.lm)
    cfg = _train_config(args, {"max_hops": str(bench.max_hops)})
    clf = HopClassifier.load(_require(args.hop)) if args.hop else None
    result = train_adapter(kg, train, lm, tokenizer, cfg, clf)
    result.adapter.save(args.out)
    _write_config(cfg, _config_path(args.out))
    if clf is None:
        result.classifier.save(str(args.out) + ".hop")
    final = result.log[-1]["loss"] if result.log else float("nan")
    print(f"trained adapter for {len(result.log)} steps, final loss {final:.4f}; wrote {args.out}")


def cmd_eval(args) -> None:
    bench, kg, train, test = load_benchmark(_require(args.data))
    lm, tokenizer = _load_lm(args.lm)
    adapter = KnowledgeAdapter.load(_require(args.adapter), kg)
    hop_path = args.hop or str(args.adapter) + ".hop"
    clf = HopClassifier.load(_require(hop_path))
    saved = _config_path(args.adapter)
    base = read_config_file(saved) if saved.exists() else {}
    cfg = _train_config(args, base)
    pipe = Pipeline(kg, tokenizer, lm, clf, adapter, cfg)
    report = evaluate(pipe, train if args.split == "train" else test)
    _emit(report, args)


def cmd_ablate(args) -> None:
    bench, kg, train, test = load_benchmark(_require(args.data))
    lm, tokenizer = _load_lm(args.lm)
    cfg = _train_config(args, {"max_hops": str(bench.max_hops)})
    clf = HopClassifier.load(_require(args.hop)) if args.hop else None
    report, _ = run_ablation(kg, train, test, lm, tokenizer, cfg, args.mode, clf)
    _emit(report, args)


def cmd_gradcheck(args) -> None:
    results = checks.run_all(args.cases, args.seed or 0)
    for r in results:
        print(f"{r.name:<24} cases={r.cases:<3} max_rel_err={r.max_error:.3e} {'ok' if r.ok else 'FAIL'}")
    worst = max(r.max_error for r in results)
    print(f"max relative error {worst:.3e} (tolerance {checks.TOLERANCE:g})")
    if worst >= checks.TOLERANCE:
        raise CLIError("gradient check failed")


def _emit(report, args) -> None:
    if args.out:
        report.save(args.out, args.trace)
        print(f"wrote report to {args.out}")
    else:
        print(report.to_json(include_traces=False), end="")
    print(f"Hits@1 {report.hits_at_1:.3f}  tokens {report.token_used}  requests {report.requests}  "
          f"NPR {report.npr:.1f}", file=sys.stderr)


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgadapter", description="Soft-prompt KGQA over a frozen LM.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--seed", type=int, default=None, help="seed for every random choice")
        p.set_defaults(func=fn)
        return p

    def add_train_options(p):
        p.add_argument("--config", help="key=value training config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = add("gen-data", cmd_gen_data, "generate a synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--entities", type=int, default=50)
    p.add_argument("--relations", type=int, default=10)
    p.add_argument("--questions", type=int, default=120)
    p.add_argument("--test", type=int, default=None, help="test questions (default: a sixth)")
    p.add_argument("--max-hops", type=int, default=2)

    p = add("pretrain-lm", cmd_pretrain_lm, "build the vocabulary and pretrain the frozen LM")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=PretrainConfig.steps)
    p.add_argument("--sequences", type=int, default=PretrainConfig.n_sequences)

    p = add("train-hop", cmd_train_hop, "train the hop-count classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=HopConfig.epochs)

    p = add("train-adapter", cmd_train_adapter, "train the knowledge adapter against the frozen LM")
    p.add_argument("--data", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--hop", help="hop classifier checkpoint (trained on the fly when omitted)")
    p.add_argument("--out", required=True)
    add_train_options(p)

    p = add("eval", cmd_eval, "evaluate a trained adapter")
    p.add_argument("--data", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--hop", help="hop classifier checkpoint (default: <adapter>.hop)")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", help="report path (default: print to stdout)")
    p.add_argument("--trace", help="per-question trace file (JSON lines)")
    add_train_options(p)

    p = add("ablate", cmd_ablate, "train and evaluate one ablation variant")
    p.add_argument("--data", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--hop")
    p.add_argument("--mode", required=True, choices=sorted(ABLATIONS))
    p.add_argument("--out")
    p.add_argument("--trace")
    add_train_options(p)

    p = add("gradcheck", cmd_gradcheck, "run the finite-difference gradient suites")
    p.add_argument("--cases", type=int, default=20)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        args.func(args)
    except FileNotFoundError as exc:
        print(f"kgadapter: error: missing file: {exc.filename or exc}", file=sys.stderr)
        return 1
    except (CLIError, HarnessError, AdapterError, LMError, LoadError, RetrievalError, SynthError,
            NumericsError, json.JSONDecodeError, KeyError) as exc:
        print(f"kgadapter: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
