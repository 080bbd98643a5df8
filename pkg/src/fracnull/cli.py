"""Command line: ``fracnull run CONFIG [--seed N] [--out DIR]``, ``fracnull report MANIFEST``.

Exit codes: 0 success, 2 invalid input/config, 3 numerical failure,
4 resource limit.  ``FRACNULL_NUM_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import __version__
from .errors import ConvergenceError, InvalidInputError, NonFiniteError, ResourceLimitError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_RESOURCE = 0, 2, 3, 4
THREADS_ENV = "FRACNULL_NUM_THREADS"

log = logging.getLogger("fracnull")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fracnull", description="Run fractional-noise experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--list-scenarios", action="store_true", help="list shipped scenario configs and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")
    r = sub.add_parser("run", help="run a config file or a shipped scenario name")
    r.add_argument("config")
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    r.add_argument("--out", default=None, help="output directory (default: runs/<config name>)")
    rep = sub.add_parser("report", help="summarise a finished run")
    rep.add_argument("manifest", help="manifest.json or the run directory")
    return p


_BLAS_ENV = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")


def _requested_threads():
    val = os.environ.get(THREADS_ENV)
    if not val:
        return None
    try:
        n = int(val)
        if n < 1:
            raise ValueError
    except ValueError:
        raise InvalidInputError(f"{THREADS_ENV} must be a positive integer, got {val!r}") from None
    return n


def _export_threads():
    """Pass the thread count to BLAS through its environment, before numpy loads."""
    n = _requested_threads()
    if n is not None and "numpy" not in sys.modules:
        for key in _BLAS_ENV:
            os.environ[key] = str(n)


def _thread_limit():
    # numpy already loaded (e.g. main() called in-process): lower the pools at
    # runtime; raising an OpenBLAS pool above its startup size is unsafe
    n = _requested_threads()
    if n is None:
        return None
    from threadpoolctl import threadpool_info, threadpool_limits

    current = max((lib["num_threads"] for lib in threadpool_info()), default=n)
    return threadpool_limits(limits=min(n, current))


def _dispatch(args) -> int:
    from . import experiments as ex

    if args.list_scenarios:
        for name, desc in ex.list_scenarios():
            print(f"{name:28s} {desc}")
        return EXIT_OK
    if args.command == "run":
        cfg = ex.load_config(args.config)
        name = os.path.splitext(os.path.basename(args.config))[0]
        out = args.out or os.path.join("runs", name)
        limiter = _thread_limit()
        try:
            man = ex.run_experiment(cfg, out, seed=args.seed, name=name)
        finally:
            if limiter is not None:
                limiter.unregister()
        print(f"wrote {len(man['outputs'])} outputs and manifest.json to {out}")
        for k, v in man["summary"].items():
            print(f"  {k}: {v}")
        return EXIT_OK
    if args.command == "report":
        sys.stdout.write(ex.emit_report(args.manifest))
        return EXIT_OK
    _parser().print_usage(sys.stderr)
    return EXIT_INVALID


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        _export_threads()
    except InvalidInputError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ResourceLimitError, MemoryError) as exc:
        print(f"error: resource limit: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except InvalidInputError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConvergenceError, NonFiniteError, FloatingPointError, ArithmeticError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
