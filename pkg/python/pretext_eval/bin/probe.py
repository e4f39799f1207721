"""Probe a frozen encoder with a linear head or with inserted transformer blocks.

    python -m pretext_eval.bin.probe --config data/toy-probe.json \
        --init runs/masked/checkpoint.vtpt --out runs/masked-probe --mode nonlinear --blocks 2
"""

import logging
import os
import sys

from pretext_eval import bin as cli
from pretext_eval import train
from pretext_eval import util
from pretext_eval.bin.finetune import checkpoint_geometry, load_data
from pretext_eval.train import protocols


_LOG = logging.getLogger(__name__)


def parse_args(argv=None):
    parser = cli.ArgumentParser(description='Train a probe on a frozen encoder.')
    cli.add_run_args(parser)
    parser.add_argument('--mode', choices=('linear', 'nonlinear'), help='overrides probe_mode')
    parser.add_argument('--blocks', type=int, help='inserted blocks (overrides probe_blocks)')
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    extra = []
    if args.mode:
        extra.append(f'probe_mode={args.mode}')
    if args.blocks is not None:
        extra.append(f'probe_blocks={args.blocks}')
    run = cli.resolve_run(args, extra)
    os.makedirs(args.out, exist_ok=True)
    cli.start_logging(['probe', run['run_id'], run['probe_mode']], args, log_dir=args.out)

    init = cli.load_init(run['init'])
    dataset, eval_dataset = load_data(run)
    plan = train.plan_from_config(run, 'probe', dataset.num_classes, checkpoint_geometry(init))
    run.write(args.out)

    result = protocols.probe(plan, dataset, init, eval_dataset, args.out)
    _LOG.info('%s probe top-1 accuracy %.4f', plan.train.probe_mode, result.accuracy)
    print(f'acc_top1 {result.accuracy:.6f}')
    return util.EXIT_OK


if __name__ == '__main__':
    cli.run_main(lambda: main(sys.argv[1:]))
