"""Pre-train the encoder-decoder on a degradation task.

    python -m pretext_eval.bin.pretrain --config data/toy-pretrain-masked.json --out runs/masked

--init continues an earlier pre-training run from its checkpoint.
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


def parse_args(argv=None):
    parser = cli.ArgumentParser(description='Pre-train on a degradation task.')
    cli.add_run_args(parser)
    parser.add_argument('--task', help='degradation task (overrides task)')
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    run = cli.resolve_run(args, [f'task={args.task}'] if args.task else [])
    os.makedirs(args.out, exist_ok=True)
    cli.start_logging(['pretrain', run['run_id'], run['task']], args, log_dir=args.out)
    if run['train_data'] is None:
        raise ConfigError('train_data is not set')

    resume = cli.load_init(run['init'])
    dataset = ingest_dataset(run['train_data']).head(run['max_train_images'])
    model_base = resume.meta.get('model') if resume is not None else None
    plan = train.plan_from_config(run, 'pretrain', model_base=model_base)
    run.write(args.out)

    result = protocols.pretrain(plan, dataset, args.out, resume)
    last = result.records[-1] if result.records else None
    if last is not None:
        _LOG.info('final pre-training loss %.6f after %d steps', last.loss_total, last.step)
    _LOG.info('checkpoint: %s', result.checkpoint)
    return util.EXIT_OK


if __name__ == '__main__':
    cli.run_main(lambda: main(sys.argv[1:]))
