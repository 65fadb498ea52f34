"""Command-line entry point: generate / train / sweep / timing / eval.

Flags mirror the run-config fields; a `--config` file supplies defaults and
explicit flags override it. Exit code 0 on success; failures print a single
`error: ...` line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .core import InvalidParameterError, derive_seed
from .data import DataFormatError, build_eval_candidates, chronological_split, sample_negatives
from .harness import (
    RunConfig,
    TrainingDivergedError,
    execute_run,
    generate_dataset,
    load_dataset,
    read_config,
    run_sweep,
    run_timing,
    write_csv,
)
from .metrics import hit_ratio_at_1, reward_win_rate
from .policy import ReferenceModel, load_checkpoint


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file; flags override")
    parser.add_argument("--data", help="interaction CSV (user_id,item_id,timestamp); omit for synthetic")
    parser.add_argument("--users", type=int)
    parser.add_argument("--items", type=int)
    parser.add_argument("--interactions-per-user", type=int, dest="interactions_per_user")
    parser.add_argument("--noise", type=float)
    parser.add_argument("--history-len", type=int, dest="history_len")
    parser.add_argument("--dim", type=int)
    parser.add_argument("--sft-epochs", type=int, dest="sft_epochs")
    parser.add_argument("--po-epochs", type=int, dest="po_epochs")
    parser.add_argument("--k", type=int)
    parser.add_argument("--objective", choices=("dpo", "dmpo", "sdpo", "mppo"))
    parser.add_argument("--variant", help="naive | dynamic[:mods] | topk:K")
    parser.add_argument("--beta0", type=float)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--sft-lr", type=float, dest="sft_lr")
    parser.add_argument("--po-lr", type=float, dest="po_lr")
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--fixed-negatives", action="store_true", default=None, dest="fixed_negatives")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", dest="out_dir")


def _build_config(args: argparse.Namespace) -> RunConfig:
    cfg = read_config(args.config) if args.config else RunConfig()
    names = {f.name for f in dataclasses.fields(RunConfig)}
    overrides = {k: v for k, v in vars(args).items() if k in names and v is not None}
    return dataclasses.replace(cfg, **overrides)


def _parse_values(text: str) -> list[str]:
    return [v for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prefopt",
                                     description="Preference-optimization experiments on a toy recommender")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write a dataset CSV and manifest")
    _add_config_flags(p_gen)

    p_train = sub.add_parser("train", help="SFT + preference optimization, one config")
    _add_config_flags(p_train)

    p_sweep = sub.add_parser("sweep", help="one-axis grid of training runs")
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=("k", "alpha", "gamma", "variant", "topk", "ablation"))
    p_sweep.add_argument("--values", help="comma-separated axis values (k/alpha/gamma/topk)")
    p_sweep.add_argument("--variants", help="comma-separated variants for k/variant sweeps")

    p_time = sub.add_parser("timing", help="naive vs dynamic per-step wall time")
    _add_config_flags(p_time)

    p_eval = sub.add_parser("eval", help="score a checkpoint on the test split")
    _add_config_flags(p_eval)
    p_eval.add_argument("--model", required=True, help="final model checkpoint (.npz)")
    p_eval.add_argument("--reference", help="reference checkpoint for the win rate (.npz)")

    return parser


def cmd_generate(args) -> int:
    cfg = _build_config(args)
    path = generate_dataset(cfg)
    print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _build_config(args)
    result = execute_run(cfg)
    print(f"hit_ratio_at_1 = {result.report.hit_ratio_at_1:.4f}")
    print(f"reward_win_rate = {result.report.reward_win_rate:.4f}")
    print(f"outputs in {cfg.out_dir}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _build_config(args)
    values = _parse_values(args.values) if args.values else None
    variants = _parse_values(args.variants) if args.variants else None
    rows = run_sweep(cfg, args.axis, values, variants)
    failures = sum(1 for r in rows if r["status"] != "ok")
    print(f"{len(rows)} runs, {failures} failed; sweep.csv in {cfg.out_dir}")
    return 0


def cmd_timing(args) -> int:
    cfg = _build_config(args)
    report = run_timing(cfg)
    print(f"naive   {report['naive_step_seconds']:.6f} s/step")
    print(f"dynamic {report['dynamic_step_seconds']:.6f} s/step")
    print(f"overhead {report['overhead_ratio']:+.2%}")
    return 0


def cmd_eval(args) -> int:
    cfg = _build_config(args)
    model, _ = load_checkpoint(args.model)
    log = load_dataset(cfg)
    split = chronological_split(log, history_len=cfg.history_len)
    entries = [(e.context, build_eval_candidates(e, split.vocab_size, cfg.seed)) for e in split.test]
    hit = hit_ratio_at_1(model, entries)
    rows = [["hit_ratio_at_1", hit]]
    if args.reference:
        ref_model, _ = load_checkpoint(args.reference)
        eval_seed = derive_seed(cfg.seed, "eval-negatives")
        instances = [sample_negatives(e, split, cfg.k, eval_seed) for e in split.test]
        win = reward_win_rate(model, ReferenceModel(ref_model), instances, beta0=cfg.beta0)
        rows.append(["reward_win_rate", win])
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "eval.csv", ["metric", "value"], rows)
    for name, value in rows:
        print(f"{name} = {value:.4f}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "generate": cmd_generate,
        "train": cmd_train,
        "sweep": cmd_sweep,
        "timing": cmd_timing,
        "eval": cmd_eval,
    }
    try:
        return handlers[args.command](args)
    except (InvalidParameterError, DataFormatError, TrainingDivergedError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
