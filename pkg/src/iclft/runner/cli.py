"""Command-line entry point: ``iclft {pretrain,gen-task,run,preq,report}``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from ..checkpoint import load_checkpoint
from ..prequential import hp_select, prequential_average, run_prequential
from ..tasks import SplitSpec, save_task_file, split
from ..training import HPConfig
from .comparison import build_task, read_results, run_comparison
from .config import ConfigError, RunConfig, TaskSpec, load_pretrain_config, load_run_config
from .pretrain import meta_pretrain
from .report import aggregate, format_table, write_summary

log = logging.getLogger("iclft")


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed_offset, cfg.n_seeds = args.seed, 1
    if args.out_dir:
        cfg.output_dir = args.out_dir
    if args.budget:
        cfg.budgets = sorted(args.budget)
    if args.strategy:
        cfg.strategies = list(args.strategy)
    if args.k:
        cfg.k_eval = list(args.k)
    return cfg.validate()


def cmd_pretrain(args) -> int:
    cfg = load_pretrain_config(args.config) if args.config else None
    if cfg is None:
        from .config import PretrainConfig

        cfg = PretrainConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, init_seed=args.seed, stream_seed=args.seed)
    if args.out_dir:
        cfg = dataclasses.replace(cfg, output_dir=args.out_dir)
    every = max(1, (args.steps or cfg.steps) // 20)

    def progress(step, loss):
        if step % every == 0:
            log.info("step %d loss %.4f", step, loss)

    path = meta_pretrain(cfg, steps=args.steps, resume=not args.fresh, progress=progress)
    print(path)
    return 0


def cmd_gen_task(args) -> int:
    spec = TaskSpec(kind=args.kind, seed=args.seed or 0, n_examples=args.n_examples, n_keys=args.n_keys,
                    n_classes=args.n_classes, noise_len=args.noise_len, n_bits=args.n_bits, variant=args.variant)
    d = build_task(spec)
    out = Path(args.out_dir or ".") / f"{d.name}.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_task_file(d, out)
    print(out)
    return 0


def cmd_run(args) -> int:
    cfg = _run_config(args)
    rows = run_comparison(cfg)
    print(format_table(aggregate(rows)))
    failed = [r for r in rows if r.error]
    if failed:
        print(f"{len(failed)} cell(s) failed; see results.csv", file=sys.stderr)
    return 0


def cmd_preq(args) -> int:
    """One prequential run (or a grid selection when --lr/--epochs are not
    both given) on the train split of the first seed and budget."""
    cfg = _run_config(args)
    base, _, _ = load_checkpoint(cfg.base_checkpoint)
    template = cfg.template.build()
    data = build_task(cfg.task)
    seed, budget = cfg.seeds[0], cfg.budgets[0]
    train, _ = split(data, SplitSpec(seed, budget, cfg.n_test))
    strategy = cfg.strategies[0]
    k = 0 if strategy == "ft_only" else (args.k[0] if args.k else cfg.grid.K)
    if args.lr is not None and args.epochs is not None:
        hp = HPConfig(args.lr, args.epochs, k, cfg.grid.optimizer, cfg.grid.adapter, cfg.grid.lora_rank)
        trace = run_prequential(base, train, hp, template, seed)
    else:
        hp, trace = hp_select(base, train, cfg.grid.configs(k), template, seed, cfg.selection_metric)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"preq_{strategy}_b{budget}_s{seed}.csv"
    trace.to_csv(path)
    acc = prequential_average(trace, "accuracy").value
    nll = prequential_average(trace, "nll").value
    print(f"{hp.tag}\tpreq_acc={acc:.4f}\tpreq_nll={nll:.4f}\t{path}")
    return 0


def cmd_report(args) -> int:
    rows = [r for p in args.results for r in read_results(p)]
    cells = aggregate(rows)
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        write_summary(Path(args.out_dir) / "summary.csv", cells)
    print(format_table(cells))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="iclft", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, run=False):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")
        if run:
            p.add_argument("--budget", type=int, action="append", help="repeatable")
            p.add_argument("--strategy", action="append", choices=["icl_only", "ft_only", "icl_ft"])
            p.add_argument("--k", type=int, action="append", help="K_eval values (repeatable)")

    p = sub.add_parser("pretrain", help="meta-pretrain a base checkpoint")
    common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--fresh", action="store_true", help="ignore an existing last.ckpt")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("gen-task", help="write a synthetic task as line-JSON")
    common(p)
    p.add_argument("--kind", default="heldout_keyed", choices=["heldout_keyed", "keyed", "prior", "parity"])
    p.add_argument("--n-examples", type=int, default=400)
    p.add_argument("--n-keys", type=int, default=8)
    p.add_argument("--n-classes", type=int, default=4)
    p.add_argument("--noise-len", type=int, default=0)
    p.add_argument("--n-bits", type=int, default=8)
    p.add_argument("--variant", default="none", choices=["none", "flipped", "permuted"])
    p.set_defaults(func=cmd_gen_task)

    p = sub.add_parser("run", help="strategy comparison over budgets and seeds")
    common(p, run=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("preq", help="single prequential run")
    common(p, run=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_preq)

    p = sub.add_parser("report", help="aggregate results.csv files")
    p.add_argument("results", nargs="+")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError, KeyError, RuntimeError) as e:
        print(f"iclft {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
