"""orthoattn command line.

Exit codes: 0 success, 2 usage/config error, 3 failed check, 4 corrupt
artifact, 5 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .backbone import PRESETS, Network, network_dct_freqs
from .config import ConfigError, build_datasets, dump_schema, example_config, load_config, parse_config
from .errors import FormatError
from .filterbank import (KINDS, DegenerateFilterError, build_dct, build_gap, build_ortho, build_random,
                         check_structure, load_bank, ortho_blocks, save_bank)
from .gradcheck import GRADCHECK_PRESETS, run_preset
from .train import (Trainer, compare_squeeze, evaluate, format_comparison, load_checkpoint,
                    read_checkpoint, save_checkpoint)

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_CORRUPT, EXIT_RUNTIME = 0, 2, 3, 4, 5

log = logging.getLogger("orthoattn")


class UsageError(Exception):
    pass


def _parse_freqs(text: str) -> list[tuple[int, int]]:
    try:
        pairs = [tuple(int(v) for v in item.split(",")) for item in text.split(";") if item.strip()]
    except ValueError:
        raise UsageError(f"bad --freqs {text!r}; expected 'i,j;i,j;...'") from None
    if not pairs or any(len(p) != 2 for p in pairs):
        raise UsageError(f"bad --freqs {text!r}; expected 'i,j;i,j;...'")
    return pairs


def cmd_genbank(args) -> int:
    if min(args.c, args.h, args.w, args.group) < 1:
        raise UsageError("--c, --h, --w and --group must be >= 1")
    if args.c % args.group:
        raise UsageError(f"--group {args.group} does not divide --c {args.c}")
    if args.kind in ("gap", "dct") and args.group != 1:
        raise UsageError(f"--group > 1 is not supported for kind {args.kind}")
    try:
        if args.kind == "ortho":
            bank = build_ortho(args.seed, args.c, args.h, args.w, args.group)
        elif args.kind == "random":
            bank = build_random(args.seed, args.c, args.h, args.w, args.group)
        elif args.kind == "gap":
            bank = build_gap(args.c, args.h, args.w)
        else:
            freqs = _parse_freqs(args.freqs) if args.freqs else network_dct_freqs(args.c, args.h, args.w)
            bank = build_dct(args.c, args.h, args.w, freqs, normalize=args.normalize)
    except DegenerateFilterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    save_bank(bank, args.out)
    print(f"wrote {args.out}: kind={bank.kind} C={bank.c} H={bank.h} W={bank.w} group_size={bank.group_size} "
          f"seed={bank.seed}")
    if bank.kind == "ortho":
        rep = check_structure(bank).ortho
        blocks = ortho_blocks(bank.c, bank.dim)
        print(f"gram-schmidt groups: {len(blocks)} (filter dim {bank.dim})")
        for (s, e), dev in zip(blocks, rep.deviations):
            print(f"  filters {s}..{e - 1}: max |<Fi,Fj> - dij| = {dev:.3e}")
        return EXIT_OK if rep.passed else EXIT_CHECK
    if bank.kind == "dct":
        print(f"frequencies: {list(bank.dct_freqs)}")
    return EXIT_OK


def cmd_checkbank(args) -> int:
    try:
        bank = load_bank(args.input)
    except FormatError as exc:
        print(f"corrupt bank file: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except OSError as exc:
        print(f"cannot read {args.input}: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    rep = check_structure(bank, args.expect_kind)
    print(f"kind={bank.kind} C={bank.c} H={bank.h} W={bank.w} group_size={bank.group_size} seed={bank.seed}")
    if rep.ortho is not None:
        for (s, e), dev in zip(rep.ortho.blocks, rep.ortho.deviations):
            print(f"  group {s}..{e - 1}: max deviation {dev:.3e}")
    print(f"{'PASS' if rep.passed else 'FAIL'}: {rep.detail}")
    return EXIT_OK if rep.passed else EXIT_CHECK


def cmd_gradcheck(args) -> int:
    rep = run_preset(args.preset, args.seed, args.eps)
    for name, err in rep.errors.items():
        print(f"{name:<32} {err:.3e}")
    print(f"checked {rep.checked} components, skipped {rep.skipped} at ReLU kinks")
    print(f"max relative error {rep.max_error:.3e} (tolerance {args.tol:.0e})")
    return EXIT_OK if rep.max_error <= args.tol else EXIT_CHECK


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_train(args) -> int:
    cfg = _load(args)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, val_ds = build_datasets(cfg)
    if args.resume:
        trainer = load_checkpoint(args.resume)
    else:
        trainer = Trainer(Network(cfg.network, cfg.train.seed), cfg.train)
    until = args.epochs if args.epochs is not None else None
    log.info("train start %s", time.strftime("%Y-%m-%dT%H:%M:%S"))
    metrics = trainer.fit(train_ds, val_ds, until)
    (out / "metrics.csv").write_text(metrics.to_csv())
    save_checkpoint(trainer, out / "checkpoint.ock", extra={"config": cfg.raw})
    print(metrics.table())
    print(f"wrote {out / 'metrics.csv'} and {out / 'checkpoint.ock'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        header, _ = read_checkpoint(Path(args.checkpoint).read_bytes())
        trainer = load_checkpoint(args.checkpoint)
    except FormatError as exc:
        print(f"corrupt checkpoint: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    if args.config:
        cfg = _load(args)
    elif "config" in header.get("extra", {}):
        cfg = parse_config(header["extra"]["config"])
    else:
        raise UsageError("checkpoint carries no config; pass --config")
    _, val_ds = build_datasets(cfg)
    top1, top5, loss = evaluate(trainer.net, val_ds, trainer.cfg.eval_batch_size)
    print(f"epochs trained: {trainer.next_epoch}")
    print(f"val top1 {top1!r}")
    print(f"val top5 {top5!r}")
    print(f"val loss {loss!r}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load(args)
    kinds = args.kinds.split(",") if args.kinds else cfg.compare.get("kinds", ["gap", "random", "ortho"])
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else cfg.compare.get("seeds", [0])
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise UsageError(f"unknown squeeze kinds {bad}")
    train_ds, val_ds = build_datasets(cfg)
    rows = compare_squeeze(train_ds, val_ds, cfg.network, kinds, seeds, cfg.train)
    text = format_comparison(rows)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.csv").write_text(text.split("\n\n")[0] + "\n")
    return EXIT_OK


def cmd_info(args) -> int:
    if args.schema:
        print(dump_schema())
        return EXIT_OK
    if args.example_config:
        print(json.dumps(example_config(), indent=2))
        return EXIT_OK
    print(f"orthoattn {__version__}")
    print(f"squeeze kinds: {', '.join(KINDS)}")
    print(f"network presets: {', '.join(PRESETS)}")
    print(f"gradcheck presets: {', '.join(GRADCHECK_PRESETS)}")
    print("exit codes: 0 ok, 2 usage/config, 3 check failed, 4 corrupt artifact, 5 runtime failure")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="orthoattn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("genbank", help="build a squeeze filter bank and write it as OFB1")
    g.add_argument("--kind", choices=KINDS, required=True)
    g.add_argument("--c", type=int, required=True)
    g.add_argument("--h", type=int, required=True)
    g.add_argument("--w", type=int, required=True)
    g.add_argument("--group", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--freqs", help="dct frequency pairs 'i,j;i,j;...'")
    g.add_argument("--normalize", action="store_true", help="unit-norm dct filters")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_genbank)

    c = sub.add_parser("checkbank", help="validate an OFB1 bank file")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--expect-kind", choices=KINDS)
    c.set_defaults(func=cmd_checkbank)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the backward passes")
    gc.add_argument("--preset", choices=GRADCHECK_PRESETS, required=True)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-5)
    gc.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train", help="train from a JSON config; writes metrics.csv and checkpoint.ock")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--epochs", type=int, help="stop after this many total epochs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="top-1/top-5 of a checkpoint on the validation split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    cp = sub.add_parser("compare", help="final val top-1 per squeeze kind over seeds")
    cp.add_argument("--config", required=True)
    cp.add_argument("--kinds", help="comma-separated, overrides config")
    cp.add_argument("--seeds", help="comma-separated, overrides config")
    cp.add_argument("--out")
    cp.set_defaults(func=cmd_compare)

    i = sub.add_parser("info", help="version, presets, config schema")
    i.add_argument("--schema", action="store_true")
    i.add_argument("--example-config", action="store_true")
    i.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"corrupt artifact: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
