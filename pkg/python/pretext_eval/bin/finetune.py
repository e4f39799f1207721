"""Fine-tune a pre-trained (or randomly initialized) encoder with a linear classifier.

    python -m pretext_eval.bin.finetune --config data/toy-finetune.json \
        --init runs/masked/checkpoint.vtpt --out runs/masked-ft

Without --init the encoder starts from random weights, the no-pre-training baseline.
"""

import logging
import os
import sys

from pretext_eval import bin as cli
from pretext_eval import train
from pretext_eval import util
from pretext_eval.dataset import ingest_dataset
from pretext_eval.train import protocols
from pretext_eval.util import ConfigError


_LOG = logging.getLogger(__name__)


def checkpoint_geometry(ckpt):
    """The checkpoint's model geometry without its class count, which follows the data."""
    if ckpt is None or 'model' not in ckpt.meta:
        return None
    return {k: v for k, v in ckpt.meta['model'].items() if k != 'num_classes'}


def load_data(run):
    if run['train_data'] is None:
        raise ConfigError('train_data is not set')
    dataset = ingest_dataset(run['train_data']).head(run['max_train_images'])
    eval_dataset = ingest_dataset(run['test_data']) if run['test_data'] else None
    return dataset, eval_dataset


def parse_args(argv=None):
    parser = cli.ArgumentParser(description='Fine-tune on labelled images.')
    cli.add_run_args(parser)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    run = cli.resolve_run(args)
    os.makedirs(args.out, exist_ok=True)
    cli.start_logging(['finetune', run['run_id']], args, log_dir=args.out)

    init = cli.load_init(run['init'])
    dataset, eval_dataset = load_data(run)
    plan = train.plan_from_config(run, 'finetune', dataset.num_classes, checkpoint_geometry(init))
    run.write(args.out)

    result = protocols.finetune(plan, dataset, init, eval_dataset, args.out)
    _LOG.info('top-1 accuracy %.4f; checkpoint: %s', result.accuracy, result.checkpoint)
    print(f'acc_top1 {result.accuracy:.6f}')
    return util.EXIT_OK


if __name__ == '__main__':
    cli.run_main(lambda: main(sys.argv[1:]))
