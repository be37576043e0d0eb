"""genservice command line: serve the generator, or check an endpoint."""

from __future__ import annotations

import argparse
import sys

from .backends import LM_BACKENDS, T2I_BACKENDS, BackendConfig
from .conformance import conformance_check


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genservice",
        description="Generator microservice (see protocol.md)")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8008)
    s.add_argument("--lm", choices=LM_BACKENDS, default="mock")
    s.add_argument("--t2i", choices=T2I_BACKENDS, default="mock")
    s.add_argument("--device", default="cpu")
    s.add_argument("--max-concurrent", type=int, default=4)

    c = sub.add_parser("check", help="run the conformance checks")
    c.add_argument("--endpoint", required=True)
    c.add_argument("--timeout", type=float, default=10.0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        from .app import serve
        try:
            config = BackendConfig(lm_backend=args.lm, t2i_backend=args.t2i,
                                   device=args.device,
                                   max_concurrent=args.max_concurrent)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        serve(config, host=args.host, port=args.port)
        return 0
    report = conformance_check(args.endpoint, timeout=args.timeout)
    print(report.summary())
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
