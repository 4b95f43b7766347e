"""Command-line entry point.

Subcommands: train, eval, bench, oracle, gen-data.  Every run writes
line-delimited JSON records to the output directory (``--out`` or the
``SEGMEM_OUT`` environment variable, default ``./runs``), starting with a
header record carrying the fully-resolved config.

Exit codes: 0 success, 1 config error, 2 check failure, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np


def _out_dir(args) -> str:
    out = args.out or os.environ.get("SEGMEM_OUT", "runs")
    os.makedirs(out, exist_ok=True)
    return out


class RecordWriter:
    def __init__(self, path: str, echo: bool = False):
        self.f = open(path, "a", encoding="utf-8")
        self.echo = echo

    def __call__(self, record: dict) -> None:
        self.f.write(json.dumps(record, sort_keys=True) + "\n")
        self.f.flush()
        if self.echo and record.get("kind") in ("eval", "result", "header"):
            print(json.dumps(record, sort_keys=True))

    def close(self):
        self.f.close()


def _load_config(args):
    from .config import parse_config

    if args.config is None:
        raise SystemExit("a config (-c/--config) is required for this subcommand")
    return parse_config(args.config)


def _header(cfg) -> dict:
    from .config import config_hash, echo_config

    return {
        "kind": "header",
        "config": echo_config(cfg),
        "config_sha256": config_hash(cfg).hex(),
        "seed": cfg.seed,
        "time": time.time(),
    }


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .config import config_hash
    from .training import TrainingDiverged, train_run

    cfg = _load_config(args)
    out = _out_dir(args)
    log = RecordWriter(os.path.join(out, f"train_seed{cfg.seed}.jsonl"), echo=True)
    log(_header(cfg))
    try:
        report, params = train_run(cfg, quiet=args.quiet, log=log)
    except TrainingDiverged as e:
        log({"kind": "error", "error": str(e)})
        print(f"training diverged: {e}", file=sys.stderr)
        return 3
    ckpt = args.checkpoint or os.path.join(out, f"model_seed{cfg.seed}.ckpt")
    save_checkpoint(ckpt, dict(params.leaves()), config_hash(cfg))
    log(
        {
            "kind": "result",
            "final_accuracy": report.final_accuracy,
            "final_loss": report.losses[-1] if report.losses else None,
            "wall_seconds": report.wall_seconds,
            "checkpoint": ckpt,
        }
    )
    log.close()
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint, restore_params
    from .config import config_hash, layer_spec, plan_for
    from .model import build_model
    from .tasks import evaluate, gen_batch
    from .training import eval_seed

    cfg = _load_config(args)
    out = _out_dir(args)
    log = RecordWriter(os.path.join(out, f"eval_seed{cfg.seed}.jsonl"), echo=True)
    log(_header(cfg))
    spec = layer_spec(cfg)
    params = build_model(cfg.model.vocab, cfg.model.blocks, spec, cfg.seed,
                         tied=cfg.model.tied_head)
    arrays, _, _ = load_checkpoint(args.checkpoint, config_hash(cfg),
                                   force=args.force)
    restore_params(params, arrays)
    if cfg.mc.variant == "postmc":
        from dataclasses import replace

        for b in params.blocks:
            b.spec = replace(b.spec, variant="postmc")
    length = args.length or cfg.task.eval_length or cfg.task.length
    plan = plan_for(cfg, length)
    batch = gen_batch(cfg, eval_seed(cfg.seed), cfg.training.eval_batch, length)
    report = evaluate(params, batch, plan)
    log(
        {
            "kind": "result",
            "accuracy": report.accuracy,
            "correct": report.correct,
            "total": report.total,
            "length": length,
            "by_segment": {str(k): v for k, v in sorted(report.by_segment.items())},
        }
    )
    log.close()
    return 0


def cmd_bench(args) -> int:
    from .bench import backend_comparison, format_table, scan_timings

    out = _out_dir(args)
    log = RecordWriter(os.path.join(out, "bench.jsonl"))
    lengths = tuple(int(x) for x in args.lengths.split(","))
    rows = scan_timings(
        d=args.d, lengths=lengths, chunk=args.chunk, k_top=args.k, seed=args.seed
    )
    for row in rows:
        log(row.as_record())
    print(format_table(rows))
    if args.backends:
        cmp_rows = backend_comparison(d=args.d, length=max(lengths),
                                      chunk=args.chunk, k_top=args.k,
                                      seed=args.seed)
        for row in cmp_rows:
            log(row)
        print()
        print(format_table(cmp_rows))
    log.close()
    return 0


def cmd_oracle(args) -> int:
    from .oracles import run_oracle_suite

    out = _out_dir(args)
    log = RecordWriter(os.path.join(out, "oracle.jsonl"))
    report = run_oracle_suite(seed=args.seed, sizes=args.sizes)
    for check in report.checks:
        log(
            {
                "kind": "oracle_check",
                "name": check.name,
                "max_dev": check.max_dev,
                "tol": check.tol,
                "passed": check.passed,
                "seed": args.seed,
            }
        )
    for line in report.lines():
        print(line)
    print(f"suite {'passed' if report.passed else 'FAILED'} "
          f"in {report.runtime_seconds:.1f}s (seed {args.seed})")
    log.close()
    return 0 if report.passed else 2


def cmd_gen_data(args) -> int:
    from .config import config_hash
    from .tasks import gen_batch

    cfg = _load_config(args)
    out = _out_dir(args)
    batch = gen_batch(cfg, args.seed if args.seed is not None else cfg.seed,
                      args.batch)
    path = args.file or os.path.join(out, f"{cfg.task.kind}_seed{cfg.seed}.npz")
    np.savez(
        path,
        tokens=batch.tokens,
        positions=batch.positions,
        targets=batch.targets,
        source_pos=batch.source_pos,
        config_sha256=np.frombuffer(config_hash(cfg), dtype=np.uint8),
    )
    print(f"wrote {batch.tokens.shape[0]} sequences to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="segmem",
        description="segment-level memory caching for recurrent sequence models",
    )
    p.add_argument("--out", default=None, help="output directory (default $SEGMEM_OUT or ./runs)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model per config")
    t.add_argument("-c", "--config", required=True)
    t.add_argument("--checkpoint", default=None)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("-c", "--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--length", type=int, default=None)
    e.add_argument("--force", action="store_true",
                   help="load despite a config-hash mismatch")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="throughput/FLOP table")
    b.add_argument("--lengths", default="256,512,1024,2048")
    b.add_argument("--d", type=int, default=32)
    b.add_argument("--chunk", type=int, default=32)
    b.add_argument("--k", type=int, default=4)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--backends", action="store_true",
                   help="also compare numba kernels with the numpy fallbacks")
    b.set_defaults(fn=cmd_bench)

    o = sub.add_parser("oracle", help="run the brute-force equivalence suite")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--sizes", choices=("default", "small"), default="default")
    o.set_defaults(fn=cmd_oracle)

    g = sub.add_parser("gen-data", help="serialize task batches")
    g.add_argument("-c", "--config", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--batch", type=int, default=64)
    g.add_argument("--file", default=None)
    g.set_defaults(fn=cmd_gen_data)
    return p


def main(argv=None) -> int:
    from .config import ConfigError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
