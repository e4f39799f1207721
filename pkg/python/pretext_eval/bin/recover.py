"""Recover degraded images with a pre-trained encoder-decoder and report the pixel MSE.

    python -m pretext_eval.bin.recover --init runs/masked/checkpoint.vtpt --in img.ppm --out rec/

--in may be a directory; its images (up to --limit) are recovered one by one and the average MSE
is printed last. Per-image lines read `<name> mse <value>` with 6 decimals. The resolved
config is written to <out>/config.json.
"""

import logging
import os
import sys

import numpy as np

from pretext_eval import bin as cli
from pretext_eval import train
from pretext_eval import util
from pretext_eval.bin.degrade import parse_params
from pretext_eval.dataset import image_io
from pretext_eval.degrade import TASKS, DegradationSpec
from pretext_eval.degrade.rng import Rng
from pretext_eval.model import vit
from pretext_eval.train import protocols
from pretext_eval.util import UsageError


_LOG = logging.getLogger(__name__)

DEFAULT_LIMIT = 100


def parse_args(argv=None):
    parser = cli.ArgumentParser(description='Recover degraded images.')
    parser.add_argument('--init', required=True, help='pre-training checkpoint')
    parser.add_argument('--in', dest='input', required=True, help='image file or directory')
    parser.add_argument('--out', required=True, help='output directory')
    parser.add_argument('--task', choices=TASKS,
                        help="degradation (default: the checkpoint's training task)")
    parser.add_argument('--param', action='append', default=[], metavar='KEY=VALUE',
                        help='degradation parameter, as for pretext_eval.bin.degrade')
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--limit', type=int, default=DEFAULT_LIMIT,
                        help='most images to read from a directory')
    cli.add_verbosity(parser)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    cli.start_logging(['recover'], args, log_dir=args.out)
    ckpt = cli.load_init(args.init)
    model = protocols.model_from_checkpoint(ckpt)
    params = protocols.params_from_checkpoint(ckpt, model,
                                              vit.ENCODER_PREFIXES + vit.DECODER_PREFIXES,
                                              decoder=True)
    trained_task = ckpt.meta.get('task')
    task = args.task or trained_task
    if task is None:
        raise UsageError('the checkpoint records no task; pass --task')
    if trained_task is not None and task != trained_task:
        _LOG.warning('checkpoint was pre-trained on %s; recovering %s inputs anyway', trained_task,
                     task)
    overrides = parse_params(args.param)
    overrides.pop('patch_size', None)
    spec = DegradationSpec.default(task, model.image_side, model.patch_size, **overrides).validate()
    normalized = bool(ckpt.config.get('normalized_targets', True))

    if os.path.isdir(args.input):
        paths = image_io.list_images(args.input)[:args.limit]
    elif os.path.isfile(args.input):
        paths = [args.input]
    else:
        raise UsageError(f'{args.input} does not exist')
    if not paths:
        raise UsageError(f'no images under {args.input}')

    os.makedirs(args.out, exist_ok=True)
    geometry = {k: getattr(model, k) for k in train.MODEL_KEYS}
    run = train.spec_run_config(spec, seed=args.seed, init=os.path.abspath(args.init),
                                normalized_targets=normalized, **geometry)
    run.write(args.out)
    errors = []
    for index, path in enumerate(paths):
        name = os.path.splitext(os.path.basename(path))[0]
        rec = protocols.recover(params, model, spec, image_io.load_image(path),
                                Rng(args.seed).derive('recover', index), normalized)
        image_io.save_image(os.path.join(args.out, f'{name}.input.ppm'), rec.degraded)
        image_io.save_image(os.path.join(args.out, f'{name}.recovered.ppm'), rec.reconstruction)
        errors.append(rec.mse)
        print(f'{name} mse {rec.mse:.6f}')
    if len(paths) > 1:
        print(f'average mse {float(np.mean(errors)):.6f} over {len(errors)} images')
    _LOG.info('recovered %d images with %s into %s', len(paths), task, args.out)
    return util.EXIT_OK


if __name__ == '__main__':
    cli.run_main(lambda: main(sys.argv[1:]))
