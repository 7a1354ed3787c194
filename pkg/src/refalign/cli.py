"""Command line interface.

Subcommands cover the whole workflow: generate-corpus, train, eval,
ablate, sweep-w, and gradcheck.  Every scalar run option is exposed as a
flag named after its config field; an INI config file (see read_config)
supplies nested corpus/encoder/loss sections, and explicit flags win
over the file.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .config import (RunConfig, W_SWEEP_GRID, config_from_dict,
                     full_scale_config, read_config)
from .data import CorpusConfig, generate_corpus, load_corpus, save_corpus
from .evaluation import run_retrieval
from .gradcheck import format_report, run_checks, stop_gradient_contracts
from .model import load_checkpoint, model_for_corpus, read_checkpoint
from .train import (ablate, format_ablation_table, sweep_w, train,
                    write_ablation_report)

_NESTED = ("corpus", "encoder", "loss")


def _add_field_flags(parser: argparse.ArgumentParser, cls) -> list[str]:
    """One flag per scalar dataclass field, default None so an absent
    flag never clobbers the config file."""
    defaults = cls()
    names = []
    for f in dataclasses.fields(cls):
        if f.name in _NESTED:
            continue
        current = getattr(defaults, f.name)
        flag = "--" + f.name.replace("_", "-")
        if isinstance(current, bool):
            parser.add_argument(flag, action=argparse.BooleanOptionalAction,
                                default=None, help=f"default {current}")
        else:
            parser.add_argument(flag, type=type(current), default=None,
                                help=f"default {current}")
        names.append(f.name)
    return names


def _apply_field_flags(cfg, args: argparse.Namespace, names: list[str]):
    changes = {name: getattr(args, name) for name in names
               if getattr(args, name) is not None}
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _add_run_options(parser: argparse.ArgumentParser) -> list[str]:
    preset = parser.add_mutually_exclusive_group()
    preset.add_argument("--config", help="INI config file")
    preset.add_argument("--full-scale", action="store_true",
                        help="start from the published large-run protocol")
    parser.add_argument("--corpus-file",
                        help="load a saved corpus instead of regenerating")
    parser.add_argument("--quiet", action="store_true",
                        help="suppress per-epoch progress lines")
    return _add_field_flags(parser, RunConfig)


def _run_config(args: argparse.Namespace, names: list[str]) -> RunConfig:
    if args.config:
        base = read_config(args.config)
    elif args.full_scale:
        base = full_scale_config()
    else:
        base = RunConfig()
    return _apply_field_flags(base, args, names)


def _load_corpus_arg(args: argparse.Namespace):
    return load_corpus(args.corpus_file) if args.corpus_file else None


def _attach_corpus(cfg: RunConfig, corpus) -> RunConfig:
    # a loaded corpus overrides the [corpus] section; training keys epoch
    # accounting and batch sampling off cfg.corpus, so they must agree
    if corpus is None or corpus.config == cfg.corpus:
        return cfg
    return dataclasses.replace(cfg, corpus=corpus.config)


def _parse_seeds(raw: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(part) for part in raw.split(","))
    except ValueError:
        raise SystemExit(f"--seeds: expected comma-separated integers, got {raw!r}")
    if not seeds:
        raise SystemExit("--seeds: empty")
    return seeds


# ----------------------------------------------------------------- commands

def _cmd_generate_corpus(args: argparse.Namespace) -> int:
    cfg = _apply_field_flags(CorpusConfig(), args, args._field_names)
    corpus = generate_corpus(cfg)
    save_corpus(corpus, args.out)
    print(f"wrote {args.out}: {cfg.n_train_identities} train + "
          f"{cfg.n_test_identities} test identities, "
          f"{cfg.pairs_per_identity} pairs each, vocab {cfg.vocab_size}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _run_config(args, args._field_names)
    if args.variant:
        cfg = cfg.with_variant(args.variant)
    corpus = _load_corpus_arg(args)
    result = train(_attach_corpus(cfg, corpus), corpus=corpus,
                   resume_from=args.resume,
                   log=None if args.quiet else print)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_jsonl}")
    for row in result.final_metrics:
        print(json.dumps(row, sort_keys=True))
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    _, meta, _ = read_checkpoint(args.checkpoint)
    cfg = config_from_dict(meta["config"])
    corpus = _load_corpus_arg(args) or generate_corpus(cfg.corpus)
    model = model_for_corpus(cfg.encoder, corpus, meta["run_seed"])
    load_checkpoint(args.checkpoint, model.named_parameters())
    w = cfg.loss.refine_weight if args.w is None else args.w
    directions = ("t2i", "i2t") if args.direction == "both" else (args.direction,)
    for direction in directions:
        result = run_retrieval(model, corpus, split=args.split,
                               direction=direction, use_refine=args.refine,
                               w=w, ap_n=args.ap_n)
        print(json.dumps({"direction": direction, "refined": args.refine,
                          "w": w if args.refine else None, **result.metrics},
                         sort_keys=True))
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    base = _run_config(args, args._field_names)
    corpus = _load_corpus_arg(args)
    base = _attach_corpus(base, corpus)
    report = ablate(base, seeds=_parse_seeds(args.seeds), corpus=corpus,
                    log=None if args.quiet else print)
    json_path, csv_path = write_ablation_report(report, base.out_dir)
    print(format_ablation_table(report))
    print(f"report: {json_path}")
    print(f"        {csv_path}")
    return 0


def _cmd_sweep_w(args: argparse.Namespace) -> int:
    base = _run_config(args, args._field_names)
    corpus = _load_corpus_arg(args)
    base = _attach_corpus(base, corpus)
    grid = tuple(float(part) for part in args.grid.split(","))
    report = sweep_w(base, seeds=_parse_seeds(args.seeds), corpus=corpus,
                     w_grid=grid, log=None if args.quiet else print)
    keys = ("R@1", "R@5", "R@10", "mAP", "AP@N")
    print(f"{'w':<10}" + "".join(f"{k:>16}" for k in keys))
    for entry in report["sweep"]:
        cells = [f"{entry['mean'][k]:.2f}±{entry['std'][k]:.2f}" for k in keys]
        print(f"{entry['w']:<10}" + "".join(f"{c:>16}" for c in cells))
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_checks(trials=args.trials, seed=args.seed)
    contracts = stop_gradient_contracts()
    print(format_report(results))
    print()
    print(format_report(contracts))
    ok = all(r.passed for r in results) and all(r.passed for r in contracts)
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refalign",
        description="Reference-guided image-text retrieval on a synthetic "
                    "attribute corpus.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-corpus", help="write a corpus file")
    p.add_argument("--out", required=True, help="output path")
    p.set_defaults(func=_cmd_generate_corpus,
                   _field_names=_add_field_flags(p, CorpusConfig))

    p = sub.add_parser("train", help="run one training configuration")
    p.add_argument("--variant", choices=("Baseline", "A", "B", "C", "Full"),
                   help="apply a named ablation row's flags")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=_cmd_train, _field_names=_add_run_options(p))

    p = sub.add_parser("eval", help="score a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus-file",
                   help="load a saved corpus instead of regenerating")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--direction", choices=("t2i", "i2t", "both"),
                   default="both")
    p.add_argument("--refine", action="store_true",
                   help="rerank through the reference bank")
    p.add_argument("--w", type=float, default=None,
                   help="refinement fusion weight (default: trained value)")
    p.add_argument("--ap-n", type=int, default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="component ablation plus the w sweep")
    p.add_argument("--seeds", default="0,1,2",
                   help="comma-separated seeds (default 0,1,2)")
    p.set_defaults(func=_cmd_ablate, _field_names=_add_run_options(p))

    p = sub.add_parser("sweep-w", help="fusion-weight sweep on the full model")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--grid", default=",".join(str(g) for g in W_SWEEP_GRID))
    p.set_defaults(func=_cmd_sweep_w, _field_names=_add_run_options(p))

    p = sub.add_parser("gradcheck", help="finite-difference and "
                                         "stop-gradient checks")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
