"""Command line entry point: ``convjepa {pretrain,probe,knn,verify,plot}``.

Every failure is reported as one line on stderr, ``error: <Kind>: <message>``,
with exit status 2 for usage/config problems and 1 for everything else.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import parse_config
from .errors import ConfigTypeError, InvalidConfig, MissingFile, UnknownKey

CONFIG_ERRORS = (InvalidConfig, UnknownKey, ConfigTypeError, MissingFile)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data-dir", help="image folder (one subdirectory per class); implies dataset = folder")
    p.add_argument("--out-dir", help="run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true", default=None)
    p.add_argument("--preset", choices=("micro", "small", "resnet50"))
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="convjepa", description="Convolutional joint-embedding predictive pretraining")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="pretrain an encoder into the run directory")
    _common(p)
    p.add_argument("--resume", help="checkpoint to resume from")

    for name, mode in (("probe", "linear"), ("knn", "knn")):
        p = sub.add_parser(name, help=f"{mode} probe on frozen features")
        _common(p)
        p.add_argument("--checkpoint", help="checkpoint whose encoder is probed")
        p.add_argument("--baseline", action="store_true", help="also probe a freshly initialized encoder")
        p.set_defaults(mode=mode)

    p = sub.add_parser("verify", help="run the invariant suites")
    _common(p)
    p.add_argument("--suite", action="append", help="run only this suite; repeatable")

    p = sub.add_parser("plot", help="accuracy/time scatter and loss curves as SVG")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out-dir", required=True)
    return parser


def resolve(args):
    overrides = list(args.overrides)
    if args.data_dir:
        overrides += ["dataset=folder", f"data_dir={args.data_dir}"]
    for flag in ("out_dir", "seed", "preset"):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{flag}={value}")
    if args.deterministic:
        overrides.append("deterministic=true")
    return parse_config(args.config, overrides)


def cmd_pretrain(args) -> int:
    from .runner import run_pretrain

    cfg = resolve(args)
    result = run_pretrain(cfg, resume=args.resume)
    last = result.rows[-1]["loss"] if result.rows else float("nan")
    print(f"pretrained {result.state.step} steps, last loss {last:.5f}, run dir {cfg.out_dir}")
    return 0


def cmd_probe(args) -> int:
    from .runner import run_probe

    cfg = resolve(args)
    reports = run_probe(cfg, args.checkpoint, args.mode, args.baseline)
    for name, rep in reports.items():
        print(f"{name:<16} top1 {rep.top1:.4f}  top5 {rep.top5:.4f}  ({rep.epochs_or_k})")
    return 0


def cmd_verify(args) -> int:
    from .verify import SUITES, run_all

    resolve(args)  # config errors still surface
    names = args.suite or list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise InvalidConfig(f"unknown suite(s) {unknown}; choose from {list(SUITES)}")
    rows = run_all(names)
    width = max(len(n) for n in names)
    for name, ok, detail, seconds in rows:
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {seconds:7.2f}s  {detail}")
    return 0 if all(ok for _, ok, _, _ in rows) else 1


def cmd_plot(args) -> int:
    from .plotting import plot_runs

    for path in plot_runs(args.runs, args.out_dir):
        print(path)
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "probe": cmd_probe, "knn": cmd_probe,
            "verify": cmd_verify, "plot": cmd_plot}


def _one_line(exc: BaseException) -> str:
    text = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
    return " ".join(text.split()) or type(exc).__name__


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: UsageError: {_one_line(exc)}", file=sys.stderr)
        return 2
    except CONFIG_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("error: Interrupted: stopped by user", file=sys.stderr)
        return 130
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
