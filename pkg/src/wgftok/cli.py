"""``wgftok <subcommand> --config <path> [--out <dir>] [--seed <u64>]``

Exit codes: 0 success, 1 usage or config error, 2 oracle failure,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, from_dict, load_config
from .data import DataFormatError
from .wgf import NumericalAbort

EXIT_OK, EXIT_USAGE, EXIT_ORACLE, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("wgftok")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wgftok", description="Tokenizer training with forward-pass-only prior matching.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="YAML or JSON run config")
        sp.add_argument("--out", help="output directory (overrides out_dir)")
        sp.add_argument("--seed", type=_u64, help="run seed (overrides seed)")
        return sp

    common(sub.add_parser("gen-data", help="write the configured dataset to <out>/dataset.npz"))
    t = common(sub.add_parser("train", help="train one config"))
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    t.add_argument("--steps", type=int, help="stop after this many total steps")
    common(sub.add_parser("eval", help="evaluate the latest checkpoint of a run"))
    s = common(sub.add_parser("sample", help="sample token sequences and images from a finished run"))
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--temperature", type=float, default=1.0)
    common(sub.add_parser("compare", help="matched-reconstruction comparison of the configured methods"))
    o = common(sub.add_parser("oracle", help="run the exact-oracle suite"), config_required=False)
    o.add_argument("--quick", action="store_true", help="fewer random points per check")
    return p


def _resolve(args) -> tuple[RunConfig, Path | None]:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if overrides:
        cfg = from_dict({**cfg.to_dict(), **overrides})
    out = Path(cfg.out_dir) if cfg.out_dir else None
    return cfg, out


def _need_out(out: Path | None, command: str) -> Path:
    if out is None:
        raise ConfigError(f"'{command}' needs an output directory (--out or out_dir)", "out_dir")
    return out


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, out = _resolve(args)
        return _dispatch(args, cfg, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as e:
        print(f"numerical abort: {e} {json.dumps(e.diagnostics)}", file=sys.stderr)
        return EXIT_NUMERIC


def _dispatch(args, cfg: RunConfig, out: Path | None) -> int:
    # heavy imports deferred so `wgftok --help` stays fast
    from . import harness

    cmd = args.command
    if cmd == "gen-data":
        out = _need_out(out, cmd)
        out.mkdir(parents=True, exist_ok=True)
        train, test = harness.load_dataset(cfg)
        np.savez_compressed(out / "dataset.npz", train=train.numpy(), test=test.numpy())
        _print_json({"train": list(train.shape), "test": list(test.shape), "mean": float(train.mean()),
                     "path": str(out / "dataset.npz")})
        return EXIT_OK

    if cmd == "train":
        out = _need_out(out, cmd)
        res = harness.run_experiment(cfg, out, resume=args.resume, steps=args.steps)
        _print_json(res.report)
        return EXIT_OK

    if cmd == "eval":
        out = _need_out(out, cmd)
        report = harness.evaluate_run(cfg, out)
        (out / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="ascii")
        _print_json(report)
        return EXIT_OK

    if cmd == "sample":
        out = _need_out(out, cmd)
        if args.count <= 0 or args.temperature < 0:
            raise ConfigError("--count must be positive and --temperature non-negative", "sample")
        _print_json(harness.sample_run(out, args.count, args.temperature, seed=cfg.seed))
        return EXIT_OK

    if cmd == "compare":
        rep = harness.compare(cfg, out)
        print(rep.table())
        return EXIT_OK

    if cmd == "oracle":
        from .oracles import oracle_suite

        rep = oracle_suite(seed=cfg.seed, quick=args.quick)
        print(rep.table())
        print(f"{sum(c.passed for c in rep.checks)}/{len(rep.checks)} checks passed")
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "oracle.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n", encoding="ascii")
        return EXIT_OK if rep.passed else EXIT_ORACLE

    raise ConfigError(f"unknown command {cmd!r}")


if __name__ == "__main__":
    sys.exit(main())
