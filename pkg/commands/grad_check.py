import argparse
import logging

from commands import EXIT_CHECK_FAILED, EXIT_OK
from services.diagnostics_service import run_grad_check

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("grad-check", help="Finite-difference check of every backward rule")
    parser.add_argument("--dtype", choices=["f64", "f32"], default="f64")
    parser.add_argument("--tol", type=float, help="relative error tolerance (default 1e-4 f64, 1e-3 f32)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--suite", action="append", choices=["op", "block", "model"],
                        help="restrict to these suites (repeatable)")
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    suites = tuple(args.suite) if args.suite else ("op", "block", "model")
    report = run_grad_check(dtype=args.dtype, tol=args.tol, seed=args.seed, suites=suites)
    print(report.to_text(), end="")
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED
