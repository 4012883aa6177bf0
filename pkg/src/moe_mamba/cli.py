"""Command-line interface.

  train       run a training job from a flat JSON config
  eval        mean log perplexity of a checkpoint on a byte corpus
  params      parameter report for a model config, as JSON
  plan-ratio  expansion / expert size / expert count for a Mamba:MoE ratio
  variants    list the 19 named architecture variants
  speedup     token-ratio comparison of two run logs
  corpus      write the deterministic demo corpus
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .analysis import LossCurve, speedup_at
from .data import tokenize_bytes, write_demo_corpus
from .model import ModelSpec, build_model, enumerate_variants
from .params import count_params, plan_ratio
from .training import RunLog, evaluate, load_config, restore_model, train


def _cmd_train(args):
    spec, config = load_config(args.config)
    log = train(spec, config, args.out, resume=args.resume, log_every=args.log_every)
    last = log.records[-1]
    print(json.dumps({
        "steps": last["step"],
        "final_raw_loss": last["raw_loss"],
        "final_ema_loss": last["ema_loss"],
        "runlog": str(args.out) + "/runlog.csv",
        "checkpoint": str(args.out) + "/checkpoint.bin",
    }, indent=2))


def _cmd_eval(args):
    model, _, config, _ = restore_model(args.ckpt)
    tokens = tokenize_bytes(args.data)
    context = args.context_length or config.context_length
    loss = evaluate(model, tokens, context)
    print(json.dumps({"mean_log_perplexity": loss, "context_length": context}, indent=2))


def _cmd_params(args):
    from pathlib import Path

    doc = json.loads(Path(args.config).read_text())
    spec = ModelSpec.from_dict({k: v for k, v in doc.items() if k in ModelSpec.JSON_FIELDS})
    model = build_model(spec)
    print(json.dumps(count_params(model).to_dict(), indent=2))


def _cmd_plan_ratio(args):
    expansion, d_expert, n_experts = plan_ratio(args.ratio, args.d_model)
    print(json.dumps({
        "ratio": f"{args.ratio}:{6 - args.ratio}",
        "expansion_num": expansion.numerator,
        "expansion_den": expansion.denominator,
        "d_expert": d_expert,
        "n_experts": n_experts,
    }, indent=2))


def _cmd_variants(args):
    variants = enumerate_variants(d_model=args.d_model, n_blocks=args.n_blocks)
    for name, spec in variants.items():
        doc = {k: getattr(spec, k) for k in ModelSpec.JSON_FIELDS}
        print(json.dumps({"name": name, **doc}))


def _cmd_speedup(args):
    curve_a = LossCurve.from_runlog(RunLog.from_csv(args.run_a))
    curve_b = LossCurve.from_runlog(RunLog.from_csv(args.run_b))
    if args.level is not None:
        levels = [args.level]
    else:
        # deepest level both curves attain
        levels = [max(curve_a.min_loss(), curve_b.min_loss())]
    for level in levels:
        ratio = speedup_at(curve_a, curve_b, level)
        print(json.dumps({"level": level, "speedup": ratio}))


def _cmd_corpus(args):
    path = write_demo_corpus(args.out, args.n_bytes, args.seed)
    print(json.dumps({"path": str(path), "n_bytes": args.n_bytes, "seed": args.seed}))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="moe-mamba", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint file to continue from")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out bytes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--context-length", type=int, default=None)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("params", help="print the parameter report as JSON")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_params)

    p = sub.add_parser("plan-ratio", help="plan a Mamba:MoE parameter split")
    p.add_argument("--ratio", type=int, required=True)
    p.add_argument("--d-model", type=int, required=True)
    p.set_defaults(fn=_cmd_plan_ratio)

    p = sub.add_parser("variants", help="list the 19 architecture variants")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-blocks", type=int, default=2)
    p.set_defaults(fn=_cmd_variants)

    p = sub.add_parser("speedup", help="token ratio between two run logs")
    p.add_argument("--run-a", required=True, help="baseline runlog.csv")
    p.add_argument("--run-b", required=True, help="candidate runlog.csv")
    p.add_argument("--level", type=float, default=None)
    p.set_defaults(fn=_cmd_speedup)

    p = sub.add_parser("corpus", help="write the deterministic demo corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-bytes", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_corpus)

    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except (ValueError, IndexError, RuntimeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
