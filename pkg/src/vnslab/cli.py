"""Command line: ``run``, ``resume``, ``diag``, ``profile`` and ``selftest``.

Exit codes: 0 success, 1 a selftest criterion failed, 2 configuration error,
3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .asymptotics import ConvergenceFailure
from .config import ConfigError, parse_config
from .spectral import NumericalError
from .storage import CheckpointError
from .transport import ConvergenceError

EXIT_OK, EXIT_CRITERION, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("vnslab")


def _cmd_run(args) -> int:
    from .runner import run_config

    cfg = parse_config(Path(args.config).read_text())
    out = run_config(cfg, args.out)
    last = out.records[-1]
    print(f"{out.state.step} steps to t={out.state.t:g} in {out.wall:.1f}s; "
          f"Emod={last.Emod:.3e} strong_ok={last.strong_ok} bootstrap_ok={last.bootstrap_ok}")
    print(f"wrote {out.out_dir}")
    return EXIT_OK


def _cmd_resume(args) -> int:
    from .runner import resume_run

    out = resume_run(args.checkpoint, args.out, args.t_final)
    print(f"resumed to t={out.state.t:g} ({out.state.step} steps); wrote {out.out_dir}")
    return EXIT_OK


def _cmd_diag(args) -> int:
    from .runner import diag_run

    summary = diag_run(args.series, args.out, eps=args.eps)
    print(json.dumps({k: v for k, v in summary.items() if k != "pair_bounds"}, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_profile(args) -> int:
    from .runner import profile_run

    meta = profile_run(args.run_dir, args.out)
    print(json.dumps(meta, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_selftest(args) -> int:
    from .acceptance import run_all

    numbers = [int(k) for k in args.only.split(",")] if args.only else None
    results = run_all(numbers)
    if args.out:
        path = Path(args.out)
        path.mkdir(parents=True, exist_ok=True)
        lines = [f"{r.number},{r.name},{'PASS' if r.passed else 'FAIL'},\"{r.detail}\"" for r in results]
        (path / "selftest.csv").write_text("number,name,result,detail\n" + "\n".join(lines) + "\n")
    failed = [r.number for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria pass" + (f"; failing: {failed}" if failed else ""))
    return EXIT_CRITERION if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vnslab", description="Particle-fluid decay lab.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run from a config file")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default: io.out)")
    r.set_defaults(func=_cmd_run)

    r = sub.add_parser("resume", help="continue from a checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("--out", help="output directory (default: the run holding the checkpoint)")
    r.add_argument("--t-final", type=float, default=None, help="override the final time")
    r.set_defaults(func=_cmd_resume)

    r = sub.add_parser("diag", help="summaries and W1 tables of a finished run")
    r.add_argument("series", help="series.csv of the run")
    r.add_argument("--out", help="output directory (default: the run directory)")
    r.add_argument("--eps", type=float, default=1e-3, help="entropic regularisation for large histograms")
    r.set_defaults(func=_cmd_diag)

    r = sub.add_parser("profile", help="limit density of a finished run")
    r.add_argument("run_dir")
    r.add_argument("--out", help="output directory (default: the run directory)")
    r.set_defaults(func=_cmd_profile)

    r = sub.add_parser("selftest", help="run the acceptance checks")
    r.add_argument("--only", help="comma-separated criterion numbers")
    r.add_argument("--out", help="also write selftest.csv here")
    r.set_defaults(func=_cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ConvergenceError, ConvergenceFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
