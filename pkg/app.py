import argparse
import sys
from typing import List, Optional

from dotenv import load_dotenv

# Load environment variables before the package reads its settings
load_dotenv(override=False)

from svmframe import __version__  # noqa: E402
from svmframe.errors import ConfigurationError  # noqa: E402
from svmframe.logger import logger, set_quiet  # noqa: E402
from svmframe.runner import load_config, run  # noqa: E402
from svmframe.schema import MODES  # noqa: E402


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svmframe",
        description="Stochastic-variational quantization in non-inertial frames: solvers and crosschecks.",
    )
    parser.add_argument("mode", help=f"one of: {', '.join(MODES)}")
    parser.add_argument("--config", required=True, help="scenario file (JSON)")
    parser.add_argument("--seed", type=_seed, default=None, help="master seed, overrides run.master_seed")
    parser.add_argument("--out", default=None, help="output directory, overrides SVMFRAME_OUTPUT_DIR")
    parser.add_argument("--quiet", action="store_true", help="log warnings and errors only")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # usage errors are configuration errors, --help/--version are not
        return ConfigurationError.exit_code if e.code else 0

    if args.mode not in MODES:
        parser.print_usage(sys.stderr)
        print(f"svmframe: unknown mode {args.mode!r}; choose from {', '.join(MODES)}", file=sys.stderr)
        return ConfigurationError.exit_code

    set_quiet(args.quiet)
    try:
        config = load_config(args.config)
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        return e.exit_code
    return run(args.mode, config, seed=args.seed, out=args.out)


if __name__ == "__main__":
    sys.exit(main())
