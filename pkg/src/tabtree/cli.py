"""Command line entry points: ``fit``, ``generate``, ``evaluate``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .config import RunConfig
from .dataset import DataError, Schema, drop_missing, load_csv, write_csv
from .evaluate import evaluate
from .quantizer import VocabLayout, fit_tokenizer
from .sampler import sample_rows
from .transformer import ModelConfig, train
from .tree import TreeParams, apply_leaves, fit_gbm, tune_hyperparams

log = logging.getLogger("tabtree")

EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _atomic_write(path: Path, write) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _run_config(args) -> RunConfig:
    base = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text())
    cfg = RunConfig(**base)
    train_over = dict(cfg.train)
    for key in ("max_steps", "batch_size", "learning_rate", "patience"):
        v = getattr(args, key, None)
        if v is not None:
            train_over[key] = v
    return RunConfig(**{**cfg.to_dict(), "train": train_over}).merged(
        preset=getattr(args, "preset", None), k=getattr(args, "k", None), q=getattr(args, "q", None),
        tree_trials=getattr(args, "tree_trials", None), seed=getattr(args, "seed", None))


def cmd_fit(args) -> int:
    cfg = _run_config(args)
    schema = Schema.from_json(args.schema) if args.schema else None
    table = drop_missing(load_csv(args.data, schema))
    if table.n_rows == 0:
        raise DataError("no complete rows after dropping missing values")
    target = args.target
    if target is None:
        target = table.schema.names[int(np.random.default_rng(cfg.seed).integers(len(table.schema)))]
        log.info("no target given; randomly chose target column %r", target)
    elif target not in table.schema.names:
        raise DataError(f"target column {target!r} not in data")
    log.info("resolved config: %s", json.dumps(cfg.resolved(), sort_keys=True))

    if cfg.tree_trials > 0:
        params, _ = tune_hyperparams(table, target, cfg.tree_trials, cfg.seed)
    else:
        params = TreeParams()
    ensemble = fit_gbm(table, target, params, cfg.seed)
    leaves = apply_leaves(ensemble, table)
    tokenizer = fit_tokenizer(table, cfg.k, cfg.q, cfg.seed)
    layout = VocabLayout.build(tokenizer, ensemble.leaf_counts)
    seqs = layout.build_sequences(leaves, tokenizer.encode(table))
    log.info("trees=%d n_l=%d n_c=%d n_b=%d n_q=%d V=%d L=%d rows=%d", layout.n_trees, layout.n_l,
             layout.n_c, layout.n_b, layout.n_q, layout.vocab_size, layout.seq_len, len(seqs))
    mc = ModelConfig(vocab_size=layout.vocab_size, max_len=layout.seq_len, **cfg.architecture())
    gen = train(seqs, leaves, layout, mc, cfg.train_config())
    gen.tokenizer, gen.ensemble = tokenizer, ensemble
    gen.extra = {"run_config": cfg.to_dict(), "resolved": cfg.resolved(), "target": target}
    checkpoint.save(gen, args.out)
    log.info("wrote checkpoint %s", args.out)
    return 0


def cmd_generate(args) -> int:
    if args.rows < 1:
        raise UsageError("--rows must be >= 1")
    gen = checkpoint.load(args.model)
    cfg = RunConfig(**gen.extra.get("run_config", {}))
    if args.temperature_categorical is not None or args.temperature_numeric is not None:
        over = dict(cfg.generation)
        if args.temperature_categorical is not None:
            over["temperature_categorical"] = args.temperature_categorical
        if args.temperature_numeric is not None:
            over["temperature_numeric"] = args.temperature_numeric
        cfg = RunConfig(**{**cfg.to_dict(), "generation": over})
    gc = cfg.generation_config(seed=args.seed)
    synth = sample_rows(gen, args.rows, gc)
    out = Path(args.out)
    _atomic_write(out, lambda p: write_csv(synth, p))
    meta = {"checkpoint": str(args.model), "rows": args.rows, "seed": args.seed,
            "generation": {k: list(v) if isinstance(v, tuple) else v for k, v in gc.__dict__.items()}}
    _atomic_write(out.with_name(out.name + ".json"),
                  lambda p: Path(p).write_text(json.dumps(meta, indent=2, sort_keys=True)))
    log.info("wrote %d rows to %s", synth.n_rows, out)
    return 0


def cmd_evaluate(args) -> int:
    schema = Schema.from_json(args.schema) if args.schema else None
    train_t = drop_missing(load_csv(args.train, schema))
    schema = train_t.schema
    test_t = drop_missing(load_csv(args.test, schema))
    synth_t = drop_missing(load_csv(args.synth, schema))
    report = evaluate(train_t, test_t, synth_t, target=args.target, seed=args.seed, skip_mle=args.skip_mle)
    d = report.to_dict()
    _atomic_write(Path(args.out), lambda p: Path(p).write_text(json.dumps(d, indent=2, sort_keys=True)))
    print(f"shape={report.shape:.4f} trend={report.trend:.4f} dcr_p={report.dcr_p:.4g}"
          + ("" if report.mle is None else " " + " ".join(
              f"mle_{k}={v:.4f}" for k, v in report.mle.items() if k != "detail")))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tabtree", description="Tree-conditioned synthetic tabular data generator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit trees, tokenizer and the transformer pair")
    f.add_argument("--data", required=True)
    f.add_argument("--schema")
    f.add_argument("--target")
    f.add_argument("--preset", type=str.upper, choices=["TINY", "S", "L", "NM"])
    f.add_argument("--config", help="JSON run config; command line flags take precedence")
    f.add_argument("--k", type=int)
    f.add_argument("--q", type=int)
    f.add_argument("--tree-trials", type=int)
    f.add_argument("--max-steps", type=int)
    f.add_argument("--batch-size", type=int)
    f.add_argument("--learning-rate", type=float)
    f.add_argument("--patience", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    g = sub.add_parser("generate", help="sample synthetic rows from a checkpoint")
    g.add_argument("--model", required=True)
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--temperature-categorical", type=float)
    g.add_argument("--temperature-numeric", type=float)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="score synthetic data against real train/test splits")
    e.add_argument("--train", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--synth", required=True)
    e.add_argument("--schema")
    e.add_argument("--target")
    e.add_argument("--skip-mle", action="store_true")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    threads = os.environ.get("TTF_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, checkpoint.CheckpointError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error ({args.command}): {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, TypeError) as exc:
        print(f"usage error ({args.command}): {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error ({args.command}): {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
