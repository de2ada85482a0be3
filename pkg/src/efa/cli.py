"""Command line entry point.

Verbs::

    efa run --config cfg.yaml [--seed N] [--out DIR]
    efa dump-attention --checkpoint CKPT --sequence 3,1,4 [--layer L] --out DIR
    efa dump-qkv --checkpoint CKPT [--layer L] [--head H] --out DIR
    efa copurchase --checkpoint CKPT --item I [--k 3]
    efa theory-probe [--seed N] [--out DIR]
    efa gen-synthetic --n-users N [--seed N] --out FILE.csv

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import datasets as ds
from .experiments import (
    ConfigError,
    ExperimentConfig,
    export_attention_weights,
    export_qkv_embeddings,
    load_config,
    run_experiment,
    theory_probe,
    top_copurchase,
    write_matrix_csv,
)
from .model import StructureError, VocabError
from .training import DivergenceError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; 2 is reserved for data errors
        raise UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="efa", description="Exponential family attention experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="fit and evaluate one configured experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")

    att = sub.add_parser("dump-attention", help="write attention matrices for one sequence")
    att.add_argument("--checkpoint", required=True)
    att.add_argument("--sequence", required=True, help="comma-separated token indices")
    att.add_argument("--layer", type=int, default=0)
    att.add_argument("--out", required=True)

    qkv = sub.add_parser("dump-qkv", help="write W_Q beta, W_K beta, W_V beta")
    qkv.add_argument("--checkpoint", required=True)
    qkv.add_argument("--layer", type=int, default=0)
    qkv.add_argument("--head", type=int, default=0)
    qkv.add_argument("--out", required=True)

    co = sub.add_parser("copurchase", help="items most likely bought with a given item")
    co.add_argument("--checkpoint", required=True)
    co.add_argument("--item", type=int, required=True)
    co.add_argument("--k", type=int, default=3)

    th = sub.add_parser("theory-probe", help="identifiability probe on two trained models")
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--out")

    gen = sub.add_parser("gen-synthetic", help="write synthetic movie ratings as CSV")
    gen.add_argument("--n-users", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    return p


def _labels(checkpoint: str):
    path = Path(checkpoint).with_name("items.json")
    return json.loads(path.read_text()) if path.exists() else None


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    result = run_experiment(cfg)
    print(json.dumps(result.metrics["metrics"], indent=2, sort_keys=True))
    print(f"wrote {result.out_dir}")
    return EXIT_OK


def _cmd_dump_attention(args) -> int:
    try:
        seq = [int(t) for t in args.sequence.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError("--sequence must be comma-separated integers") from exc
    mats = export_attention_weights(args.checkpoint, seq, args.layer)
    for name, mat in mats.items():
        path = write_matrix_csv(Path(args.out) / f"attention_layer{args.layer}_{name}.csv", mat)
        print(path)
    return EXIT_OK


def _cmd_dump_qkv(args) -> int:
    mats = export_qkv_embeddings(args.checkpoint, args.layer, args.head)
    labels = _labels(args.checkpoint)
    for name, mat in mats.items():
        path = write_matrix_csv(Path(args.out) / f"qkv_layer{args.layer}_head{args.head}_{name}.csv", mat,
                                col_labels=labels)
        print(path)
    return EXIT_OK


def _cmd_copurchase(args) -> int:
    labels = _labels(args.checkpoint)
    for rank, (g, score) in enumerate(top_copurchase(args.checkpoint, args.item, args.k), start=1):
        name = labels[g] if labels else g
        print(f"{rank}\t{g}\t{name}\t{score:.6f}")
    return EXIT_OK


def _cmd_theory_probe(args) -> int:
    report = theory_probe(seed=args.seed)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "probe_report.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


def _cmd_gen_synthetic(args) -> int:
    if args.n_users < 1:
        raise UsageError("--n-users must be at least 1")
    data = ds.generate_synthetic_ratings(args.n_users, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user", "position", "movie", "rating"])
        for u in range(len(data)):
            for i in range(5):
                w.writerow([u, i + 1, int(data.x[u, i]) + 1, repr(float(data.y[u, i]))])
    print(out)
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "dump-attention": _cmd_dump_attention,
    "dump-qkv": _cmd_dump_qkv,
    "copurchase": _cmd_copurchase,
    "theory-probe": _cmd_theory_probe,
    "gen-synthetic": _cmd_gen_synthetic,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"efa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return _COMMANDS[args.verb](args)
    except (UsageError, ConfigError, IndexError, KeyError, StructureError) as exc:
        print(f"efa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ds.DataError, VocabError, FileNotFoundError) as exc:
        print(f"efa: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"efa: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
