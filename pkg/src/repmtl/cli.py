"""Command-line entry point: ``repmtl run|sweep|repeat|compare|analyze``.

Exit code 0 on success. Failures print a JSON object ``{"error": ..., "message": ...}``
to stderr and exit with 2 (bad config or arguments) or 1 (run failure).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import runner


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="repmtl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train STL baselines and one MTL method")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="output directory (default: <root>/<method>-seed<seed>)")

    s = sub.add_parser("sweep", help="grid over config keys")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True, help="grid YAML, or the literal default-lambda / default-lr")
    s.add_argument("--out")

    rp = sub.add_parser("repeat", help="repeat a run over consecutive seeds")
    rp.add_argument("--config", required=True)
    rp.add_argument("--seeds", type=int, default=3)
    rp.add_argument("--out")

    c = sub.add_parser("compare", help="repeat several configs and compare them")
    c.add_argument("--config", action="append", required=True, help="may be given several times")
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--out")

    a = sub.add_parser("analyze", help="power-law audit of a checkpoint")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--out")
    a.add_argument("--min-tail", type=int, default=8)
    a.add_argument("--no-csv", action="store_true")
    return p


def _grid(arg: str) -> dict:
    if arg == "default-lambda":
        return runner.default_lambda_grid()
    if arg == "default-lr":
        return runner.default_lr_grid()
    return runner.load_grid(arg)


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            res = runner.run(runner.load_config(args.config), out_dir=args.out)
            payload = {"out_dir": str(res.out_dir), "delta_p": res.report["delta_p"],
                       "head_spread": res.head_spread}
        elif args.command == "sweep":
            payload = runner.sweep(runner.load_config(args.config), _grid(args.grid), out_dir=args.out)
        elif args.command == "repeat":
            payload = runner.repeat(runner.load_config(args.config), args.seeds, out_dir=args.out)
        elif args.command == "compare":
            cfgs = {Path(p).stem: runner.load_config(p) for p in args.config}
            payload = runner.compare(cfgs, args.seeds, out_dir=args.out)
        else:
            payload = runner.analyze_checkpoint(args.checkpoint, args.out, args.min_tail,
                                                write_csv_file=not args.no_csv)
    except (runner.ConfigError, FileNotFoundError, IsADirectoryError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure must surface as machine-readable JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
