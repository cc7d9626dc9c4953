"""Command line entry point: ``gradrecon <command> [--config PATH] [--out DIR] ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import describe, load_config
from .errors import ConfigError, LabError

log = logging.getLogger("gradrecon")

COMMANDS = ("pretrain", "collect", "train-decoder", "unlearn", "eval", "sweep", "audit-prop1", "config")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML file with dotted keys")
    common.add_argument("--seed-offset", type=int, default=0, help="added to every stage seed")
    common.add_argument("--out", type=Path, help="run directory (default: run.out from the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gradrecon", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="build the corpus, train proxy and target")
    sub.add_parser("collect", parents=[common], help="collect LoRA/full gradient pairs on the proxy")
    td = sub.add_parser("train-decoder", parents=[common], help="fit the gradient decoder")
    td.add_argument("--pairs", type=Path)
    un = sub.add_parser("unlearn", parents=[common], help="apply one unlearning method to the target")
    un.add_argument("--method", help="overrides unlearn.method")
    un.add_argument("--decoder", type=Path)
    ev = sub.add_parser("eval", parents=[common], help="USR, GUR, RAP and MIA for a before/after pair")
    ev.add_argument("--method", help="overrides unlearn.method")
    ev.add_argument("--before", type=Path)
    ev.add_argument("--after", type=Path)
    sw = sub.add_parser("sweep", parents=[common], help="repeat one axis over seeds")
    sw.add_argument("--axis", choices=("views", "rank", "eta", "method"), required=True)
    sw.add_argument("--grid", help="comma-separated values replacing the configured grid")
    sw.add_argument("--seeds", type=int, help="overrides sweep.seeds")
    au = sub.add_parser("audit-prop1", parents=[common], help="audit the reconstruction-error bound")
    au.add_argument("--proxy", type=Path)
    au.add_argument("--target", type=Path)
    au.add_argument("--decoder", type=Path)
    sub.add_parser("config", parents=[common], help="print every config key with its default")
    return p


def _parse_grid(text: str, axis: str) -> list:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise ConfigError("empty sweep grid")
    if axis == "method":
        return items
    try:
        return [float(t) if axis == "eta" else int(t) for t in items]
    except ValueError as exc:
        raise ConfigError(f"bad grid value: {exc}") from exc


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "config":
        sys.stdout.write(describe())
        return 0
    cfg = load_config(args.config).with_seed_offset(args.seed_offset)
    layout = pipeline.Layout(args.out or Path(cfg["run.out"]))
    method = getattr(args, "method", None) or cfg["unlearn.method"]
    if method not in pipeline.METHODS:
        raise ConfigError(f"unknown method {method!r}")

    if args.command == "pretrain":
        out = pipeline.stage_pretrain(cfg, layout)
    elif args.command == "collect":
        ds = pipeline.stage_collect(cfg, layout)
        out = {"pairs": len(ds), "path": str(layout.pairs)}
    elif args.command == "train-decoder":
        _, curve = pipeline.stage_train_decoder(cfg, layout, args.pairs)
        out = {"initial_holdout": curve.initial_holdout,
               "best_holdout": min(curve.holdout) if curve.holdout else curve.initial_holdout,
               "best_epoch": curve.best_epoch, "epochs_run": len(curve.holdout)}
    elif args.command == "unlearn":
        m = pipeline.stage_unlearn(cfg, layout, method, args.decoder)
        out = {k: m[k] for k in ("method", "eta", "eta_source", "output", "applied_norm")}
    elif args.command == "eval":
        out = pipeline.stage_eval(cfg, layout, method, args.before, args.after).summary()
    elif args.command == "sweep":
        grid = _parse_grid(args.grid, args.axis) if args.grid is not None else None
        _, summary = pipeline.stage_sweep(cfg, layout.root, args.axis, grid, args.seeds)
        out = summary
    else:
        out = pipeline.stage_audit(cfg, layout, args.proxy, args.target, args.decoder)
    sys.stdout.write(json.dumps(out, indent=2, sort_keys=True, default=str) + "\n")
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except LabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
