"""Command-line entry point: ``moeq {collect,train,eval,compare}``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .dataset import DEFAULT_DEMO_FRACTION, DEFAULT_EPSILON, DatasetError, collect_dataset
from .env import LayoutError
from .harness import (VARIANTS, ConfigError, RunConfig, compare, evaluate_checkpoint, format_table,
                      load_config, mixed_flags, train)
from .qlearning import TrainingAbort

# machine-parsable codes, one per failure class
EXIT_CODES = {"E_USAGE": 2, "E_CONFIG": 3, "E_DATASET": 4, "E_TRAIN": 5, "E_IO": 6, "E_ENV": 7}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("E_USAGE", message)


def _parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value run config")
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--dataset")
    common.add_argument("--out")
    common.add_argument("--seed", type=int)
    common.add_argument("--steps", type=int)
    common.add_argument("--episodes", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--gamma", type=float)
    common.add_argument("--demo-fraction", type=float, dest="demo_fraction")

    p = _Parser(prog="moeq", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    c = sub.add_parser("collect", parents=[common], help="collect an offline dataset")
    c.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    sub.add_parser("train", parents=[common], help="train one variant")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    sub.add_parser("compare", parents=[common], help="train and evaluate all variants")
    return p


def _run_config(args) -> RunConfig:
    rc = load_config(args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k) for k in ("variant", "dataset", "out", "seed", "steps", "episodes",
                                               "alpha", "gamma", "demo_fraction")
                 if getattr(args, k, None) is not None}
    try:
        return rc.replace(**overrides)
    except ValueError as exc:
        raise CliError("E_CONFIG", str(exc)) from None


def _log(msg: str):
    print(msg, file=sys.stderr, flush=True)


def cmd_collect(args) -> int:
    rc = _run_config(args)
    out = Path(args.out or "dataset.jsonl")
    if out.suffix != ".jsonl" and (out.is_dir() or not out.suffix):
        out = out / "dataset.jsonl"
    if not out.resolve().parent.is_dir():
        raise CliError("E_IO", f"output directory does not exist: {out.resolve().parent}")
    frac = DEFAULT_DEMO_FRACTION if rc.demo_fraction is None else rc.demo_fraction
    n = args.episodes if args.episodes is not None else 1000
    _, summ = collect_dataset(n, frac, out_path=out, epsilon=args.epsilon, seed=rc.seed, horizon=rc.horizon)
    print(f"wrote {out}")
    print(f"episodes {summ['episodes']}  transitions {summ['transitions']}  successes {summ['successes']}")
    print(f"mixture  demo {summ['demo_pct']:.2f}%  sub-optimal {summ['suboptimal_pct']:.2f}%")
    print(f"{'family':<12} {'demo':>5} {'subopt':>6} {'success':>7}")
    for fam, c in summ["families"].items():
        print(f"{fam:<12} {c['demo']:>5} {c['suboptimal']:>6} {c['success']:>7}")
    print(json.dumps({"summary": summ}))
    return 0


def cmd_train(args) -> int:
    rc = _run_config(args)
    if not rc.dataset:
        raise CliError("E_USAGE", "train needs --dataset")
    out = Path(rc.out)
    res = train(rc, None, out, _log)
    last = res.metrics[-1] if res.metrics else {}
    print(json.dumps({"checkpoint": str(res.checkpoint), "steps": rc.steps, "variant": rc.variant,
                      "final_J": last.get("J")}))
    return 0


def cmd_eval(args) -> int:
    rc = _run_config(args)
    rep = evaluate_checkpoint(args.checkpoint, rc.episodes, rc.eval_seed, horizon=rc.horizon)
    print(format_table([rep]))
    print(f"wall-clock {rep.wall_clock:.1f}s")
    record = json.dumps(rep.to_record())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.jsonl").write_text(record + "\n")
    print(record)
    return 0


def cmd_compare(args) -> int:
    rc = _run_config(args)
    if not rc.dataset:
        raise CliError("E_USAGE", "compare needs --dataset")
    out = Path(rc.out)
    reports = compare(rc, None, out, log=_log)
    print(format_table(reports, mixed_flags()))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.jsonl", "w", encoding="utf-8") as f:
        for r in reports:
            f.write(json.dumps(r.to_record()) + "\n")
    for r in reports:
        print(json.dumps(r.to_record()))
    return 0


COMMANDS = {"collect": cmd_collect, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except ConfigError as exc:
        code, msg = "E_CONFIG", str(exc)
    except DatasetError as exc:
        code, msg = "E_DATASET", str(exc)
    except TrainingAbort as exc:
        code, msg = "E_TRAIN", str(exc)
    except LayoutError as exc:
        code, msg = "E_ENV", str(exc)
    except OSError as exc:
        code, msg = "E_IO", f"{exc.strerror or exc}: {exc.filename or ''}".rstrip(": ")
    print(f"error {code}: {' '.join(msg.split())}", file=sys.stderr)
    return EXIT_CODES[code]


if __name__ == "__main__":
    sys.exit(main())
