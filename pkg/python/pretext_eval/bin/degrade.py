"""Apply one degradation to an image file.

    python -m pretext_eval.bin.degrade --task zoomed_in --in cat.ppm --out cat.a.ppm --param S=160

Masked tasks also write a sidecar listing the hidden token indices, one per line. The resolved
parameters go to <out stem>.config.json.
"""

import logging
import os
import sys
import typing

import attr
import numpy as np

from pretext_eval import bin as cli
from pretext_eval import train
from pretext_eval import util
from pretext_eval.dataset import image_io
from pretext_eval.degrade import TASKS, DegradationSpec, make_sample
from pretext_eval.degrade.rng import Rng
from pretext_eval.util import DegradationParamError, UsageError
from pretext_eval.util.config_util import parse_override


_LOG = logging.getLogger(__name__)


# Short parameter names accepted by --param, next to the DegradationSpec field names.
PARAM_ALIASES = {
    'S': 'zoom_side',
    'pad': 'pad_mode',
    'k': 'kernel_size',
    'kernel': 'kernel_mode',
    's': 'saturation',
    'ratio': 'mask_ratio',
    'mode': 'mask_mode',
    'amplitude': 'wave_amplitude',
    'period': 'wave_period',
    'aux': 'aux_side',
    'P': 'patch_size',
}


def spec_fields() -> typing.Set[str]:
    return {a.name for a in attr.fields(DegradationSpec)} - {'task', 'image_side'}


def parse_params(params : typing.Sequence[str]) -> typing.Dict[str, typing.Any]:
    """--param k=v pairs -> DegradationSpec overrides. a and b together set position."""
    fields = spec_fields()
    out, problems = {}, []
    position = {}
    for text in params:
        key, value = parse_override(text)
        if key in ('a', 'b'):
            position[key] = value
            continue
        field = PARAM_ALIASES.get(key, key)
        if field not in fields:
            problems.append(f'unknown degradation parameter {key!r}')
            continue
        if field == 'twist':
            value = tuple(value) if isinstance(value, list) else (float(value), float(value))
        elif field in ('position', 'zoom_choices', 'kernel_choices') and isinstance(value, list):
            value = tuple(value)
        out[field] = value
    if position:
        if set(position) != {'a', 'b'}:
            problems.append('a and b must be given together')
        else:
            out['position'] = (position['a'], position['b'])
    if problems:
        raise DegradationParamError(problems)
    return out


def mask_sidecar_path(out_path : str) -> str:
    return os.path.splitext(out_path)[0] + '.mask.txt'


def config_sidecar_name(out_path : str) -> str:
    return os.path.splitext(os.path.basename(out_path))[0] + '.config.json'


def write_mask(path : str, visible_mask : np.ndarray):
    hidden = np.flatnonzero(~np.asarray(visible_mask, dtype=bool))
    with util.atomic_write(path, 'w') as f:
        f.write(''.join(f'{i}\n' for i in hidden))


def parse_args(argv=None):
    parser = cli.ArgumentParser(description='Degrade one image.')
    parser.add_argument('--task', required=True, choices=TASKS)
    parser.add_argument('--in', dest='input', required=True, help='input .ppm or .png')
    parser.add_argument('--out', required=True, help='output image path')
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--param', action='append', default=[], metavar='KEY=VALUE',
                        help=('degradation parameter; short names: '
                              f'{", ".join(f"{k}={v}" for k, v in PARAM_ALIASES.items())}, '
                              'plus a and b for the zoomed_out position'))
    parser.add_argument('--other', action='append', default=[],
                        help='fill image for pad=other_image; may be repeated')
    parser.add_argument('--mask-out', help='mask sidecar path (default: <out>.mask.txt)')
    cli.add_verbosity(parser)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    cli.start_logging(['degrade', args.task], args)
    if not os.path.isfile(args.input):
        raise UsageError(f'input image {args.input} does not exist')
    img = image_io.load_image(args.input)
    _, h, w = img.shape
    if h != w:
        raise util.GeometryError(f'{args.input} is {w}x{h}; degradations work on square images')
    overrides = parse_params(args.param)
    patch_size = overrides.pop('patch_size', 16)
    spec = DegradationSpec.default(args.task, h, patch_size, **overrides).validate()
    others = [image_io.load_image(p) for p in args.other]
    sample = make_sample(spec, img, Rng(args.seed).derive('degrade'), others)

    image_io.save_image(args.out, sample.input)
    _LOG.info('wrote %s (%s)', args.out, ', '.join(f'{k}={v}' for k, v in sample.info.items()))
    if not sample.visible_mask.all():
        mask_path = args.mask_out or mask_sidecar_path(args.out)
        write_mask(mask_path, sample.visible_mask)
        _LOG.info('wrote %d hidden token indices to %s', int((~sample.visible_mask).sum()),
                  mask_path)
    run = train.spec_run_config(spec, seed=args.seed)
    config_path = run.write(os.path.dirname(os.path.abspath(args.out)),
                            config_sidecar_name(args.out))
    _LOG.info('wrote resolved config to %s', config_path)
    return util.EXIT_OK


if __name__ == '__main__':
    cli.run_main(lambda: main(sys.argv[1:]))
