"""Print the factor tags (IM/ST/SC) of the canonical degradations and check them.

    python -m pretext_eval.bin.tags

The table is compared line by line with the reference classification; any difference is printed
as a unified diff and the command exits with status 3.
"""

import difflib
import logging
import sys

from pretext_eval import bin as cli
from pretext_eval import util
from pretext_eval.degrade import CANONICAL_TASKS, FACTOR_TABLE_REFERENCE, TASKS, render_factor_table
from pretext_eval.util import log_util


_LOG = logging.getLogger(__name__)


def table_diff(table : str, reference : str = FACTOR_TABLE_REFERENCE) -> str:
    return ''.join(difflib.unified_diff(reference.splitlines(keepends=True),
                                        table.splitlines(keepends=True),
                                        fromfile='reference', tofile='computed'))


def parse_args(argv=None):
    parser = cli.ArgumentParser(description='Print degradation factor tags.')
    parser.add_argument('--all', action='store_true',
                        help='also print the derived tasks (not checked against the reference)')
    cli.add_verbosity(parser)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    cli.start_logging(['tags'], args)
    table = render_factor_table(CANONICAL_TASKS)
    sys.stdout.write(table)
    if args.all:
        sys.stdout.write(render_factor_table(t for t in TASKS if t not in CANONICAL_TASKS))
    diff = table_diff(table)
    log_util.check_result(_LOG, 'factor table', not diff, 'matches the reference' if not diff
                          else 'differs from the reference')
    if diff:
        sys.stdout.write(diff)
        return util.EXIT_RUNTIME
    return util.EXIT_OK


if __name__ == '__main__':
    cli.run_main(lambda: main(sys.argv[1:]))
