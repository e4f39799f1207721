"""Command-line entry points. Each module is run as `python -m pretext_eval.bin.<command>`."""

import argparse
import logging
import os
import sys
import typing

from pretext_eval import util
from pretext_eval.util import UsageError
from pretext_eval.util import checkpoint_util
from pretext_eval.util import log_util
from pretext_eval.util.config_util import RunConfig


_LOG = logging.getLogger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """argparse, except usage errors exit with the package's usage exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(util.EXIT_USAGE, f'{self.prog}: error: {message}\n')


def add_verbosity(parser : argparse.ArgumentParser):
    parser.add_argument('--verbose', '-v', action='store_true', help='log DEBUG lines')
    parser.add_argument('--console-only', action='store_true', help="don't write a log file")


def log_level(args) -> int:
    return logging.DEBUG if args.verbose else logging.INFO


def add_run_args(parser : argparse.ArgumentParser):
    """Flags shared by the training commands."""
    parser.add_argument('--config', help='JSON run config (see util.config_util.RUN_CONFIG_KEYS)')
    parser.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='override one config key; may be repeated')
    parser.add_argument('--init', help='checkpoint to start from')
    parser.add_argument('--out', required=True, help='output directory')
    parser.add_argument('--train-data', help='training dataset (overrides train_data)')
    parser.add_argument('--test-data', help='evaluation dataset (overrides test_data)')
    add_verbosity(parser)


def resolve_run(args, extra : typing.Sequence[str] = ()) -> RunConfig:
    """RunConfig from --config, then --set overrides, then the dedicated flags."""
    overrides = list(args.set)
    for key, value in (('init', args.init), ('train_data', args.train_data),
                       ('test_data', args.test_data)):
        if value is not None:
            overrides.append(f'{key}={os.path.abspath(value)}')
    overrides.extend(extra)
    return RunConfig.resolve(args.config, overrides)


def start_logging(labels : typing.List[str], args, log_dir : typing.Optional[str] = None):
    log_util.config(labels, level=log_level(args), console_only=args.console_only,
                    log_dir=log_dir)


def load_init(path : typing.Optional[str]) -> typing.Optional[checkpoint_util.Checkpoint]:
    if path is None:
        return None
    if not os.path.isfile(path):
        raise UsageError(f'checkpoint {path} does not exist')
    return checkpoint_util.load(path)


def run_main(main : typing.Callable[[], int]):
    """Run a command's main(), turning package errors into their exit codes."""
    try:
        code = main()
    except util.PretextEvalError as err:
        _LOG.error('%s: %s', type(err).__name__, err)
        if not logging.getLogger().hasHandlers():
            print(f'error: {err}', file=sys.stderr)
        sys.exit(err.exit_code)
    sys.exit(code or util.EXIT_OK)
