"""Write the procedural shapes dataset as packed train and test files.

    python -m pretext_eval.bin.make_dataset --out data/shapes --train 2000 --test 500
"""

import logging
import os
import sys

from pretext_eval import bin as cli
from pretext_eval import util
from pretext_eval.dataset import DatasetGenerator
from pretext_eval.dataset.packed import write_packed
from pretext_eval.util import UsageError


_LOG = logging.getLogger(__name__)

TRAIN_NAME = 'train.vtds'
TEST_NAME = 'test.vtds'


def parse_args(argv=None):
    parser = cli.ArgumentParser(description='Generate the synthetic shapes dataset.')
    parser.add_argument('--out', required=True, help='output directory')
    parser.add_argument('--train', type=int, default=2000, help='training images')
    parser.add_argument('--test', type=int, default=500, help='test images')
    parser.add_argument('--side', type=int, default=32, help='image side in pixels')
    parser.add_argument('--classes', type=int, default=10, help='number of classes, at most 10')
    parser.add_argument('--seed', type=int, default=0)
    cli.add_verbosity(parser)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    cli.start_logging(['make_dataset'], args)
    if not 1 <= args.classes <= 10:
        raise UsageError(f'--classes must be in [1, 10], got {args.classes}')
    if args.train < 0 or args.test < 0 or args.side < 1:
        raise UsageError('--train and --test must be >= 0 and --side >= 1')
    os.makedirs(args.out, exist_ok=True)
    # Train and test draw from disjoint seeds so no test image repeats a training one.
    for name, count, seed in ((TRAIN_NAME, args.train, 2 * args.seed),
                              (TEST_NAME, args.test, 2 * args.seed + 1)):
        generator = DatasetGenerator.instantiate('synthetic', {
            'image_side': args.side, 'num_classes': args.classes, 'seed': seed})
        path = os.path.join(args.out, name)
        write_packed(path, generator.generate_dataset(count))
        _LOG.info('wrote %d images to %s', count, path)
    return util.EXIT_OK


if __name__ == '__main__':
    cli.run_main(lambda: main(sys.argv[1:]))
