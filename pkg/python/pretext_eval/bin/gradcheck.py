"""Verify every differentiable primitive and the toy model's losses against central differences.

    python -m pretext_eval.bin.gradcheck --seeds 20

Exits with status 3 when any check fails.
"""

import logging
import sys
import typing

import attr
import numpy as np

from pretext_eval import bin as cli
from pretext_eval import util
from pretext_eval.degrade.rng import Rng
from pretext_eval.engine import ParamSet, Tensor
from pretext_eval.engine import ops
from pretext_eval.engine.gradcheck import GradCheckReport, grad_check
from pretext_eval.model import ViTConfig
from pretext_eval.model import vit
from pretext_eval.model.objectives import area_resize_tensor, integrated_loss, recovery_loss
from pretext_eval.model.patch_ops import patchify_array, unpatchify_tensor
from pretext_eval.util import log_util


_LOG = logging.getLogger(__name__)

PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3
# Coordinates sampled per parameter tensor in the end-to-end checks.
MODEL_COORDS = 2

# Keeps layer_norm inputs away from zero variance, where central differences lose accuracy.
SPREAD = np.array([-1.5, -0.5, 0.5, 1.5])

# The end-to-end checks run the toy preset itself, one image per batch.
CHECK_MODEL = ViTConfig.toy(num_classes=3)
CHECK_RATIO = 0.75


@attr.s(auto_attribs=True)
class Oracle:
    """One gradient check: a scalar function of named inputs and the point to check it at."""

    name : str
    function : typing.Callable[[ParamSet], Tensor]
    point : typing.Dict[str, np.ndarray]
    tol : float = PRIMITIVE_TOL
    max_coords : typing.Optional[int] = None


def _weighted(t : Tensor, w : np.ndarray) -> Tensor:
    """sum(t * w): a scalar whose gradient wrt t is w."""
    return ops.sum(ops.mul(t, w))


def primitive_oracles(gen : np.random.Generator) -> typing.List[Oracle]:
    n = gen.normal
    w3 = n(size=(2, 3, 4))
    w5 = n(size=(2, 3, 5))
    target = n(size=(2, 4, 3))
    mask = np.zeros((2, 4), dtype=bool)
    mask[0, 1] = mask[1, 0] = mask[1, 3] = True
    labels = gen.integers(0, 5, size=4)
    return [
        Oracle('matmul', lambda p: _weighted(ops.matmul(p['a'], p['b']), w5),
               {'a': n(size=(2, 3, 4)), 'b': n(size=(4, 5))}),
        Oracle('add', lambda p: _weighted(ops.add(p['a'], p['b']), w3),
               {'a': n(size=(2, 3, 4)), 'b': n(size=(4,))}),
        Oracle('sub', lambda p: _weighted(ops.sub(p['a'], p['b']), w3),
               {'a': n(size=(4,)), 'b': n(size=(2, 3, 4))}),
        Oracle('mul', lambda p: _weighted(ops.mul(p['a'], p['b']), w3),
               {'a': n(size=(2, 3, 4)), 'b': n(size=(3, 4))}),
        Oracle('scale', lambda p: _weighted(ops.scale(p['x'], -1.7), w3),
               {'x': n(size=(2, 3, 4))}),
        Oracle('gelu', lambda p: _weighted(ops.gelu(p['x']), w3), {'x': 2 * n(size=(2, 3, 4))}),
        Oracle('softmax', lambda p: _weighted(ops.softmax(p['x']), w3), {'x': n(size=(2, 3, 4))}),
        Oracle('layer_norm', lambda p: _weighted(ops.layer_norm(p['x'], p['g'], p['b']), w3),
               {'x': n(size=(2, 3, 4)) + SPREAD, 'g': 1 + 0.1 * n(size=(4,)),
                'b': n(size=(4,))}),
        Oracle('mse', lambda p: ops.mse(p['x'], target), {'x': n(size=(2, 4, 3))}),
        Oracle('mse_masked', lambda p: ops.mse(p['x'], target, mask=mask),
               {'x': n(size=(2, 4, 3))}),
        Oracle('sum_axis', lambda p: _weighted(ops.sum(p['x'], axis=1), n(size=(2, 4))),
               {'x': n(size=(2, 3, 4))}),
        Oracle('mean', lambda p: ops.mean(ops.mul(p['x'], p['x'])), {'x': n(size=(3, 4))}),
        Oracle('reshape_permute',
               lambda p: _weighted(ops.permute(ops.reshape(p['x'], (4, 3, 2)), (2, 0, 1)),
                                   n(size=(2, 4, 3))),
               {'x': n(size=(2, 3, 4))}),
        Oracle('getitem', lambda p: _weighted(ops.getitem(p['x'], (slice(None), [0, 2, 2])),
                                              n(size=(2, 3, 4))),
               {'x': n(size=(2, 3, 4))}),
        Oracle('concat', lambda p: _weighted(ops.concat([p['a'], p['b']], axis=1),
                                             n(size=(2, 5, 4))),
               {'a': n(size=(2, 3, 4)), 'b': n(size=(2, 2, 4))}),
        Oracle('broadcast_to', lambda p: _weighted(ops.broadcast_to(p['x'], (2, 3, 4)), w3),
               {'x': n(size=(4,))}),
        Oracle('cross_entropy', lambda p: ops.cross_entropy(p['x'], labels),
               {'x': n(size=(4, 5))}),
        Oracle('area_resize', lambda p: _weighted(area_resize_tensor(p['x'], 3, 4),
                                                  n(size=(2, 3, 3, 4))),
               {'x': n(size=(2, 3, 5, 7))}),
        Oracle('unpatchify', lambda p: _weighted(unpatchify_tensor(p['x'], 2, (2, 2)),
                                                 n(size=(1, 3, 4, 4))),
               {'x': n(size=(1, 4, 12))}),
    ]


def model_oracles(gen : np.random.Generator, seed : int) -> typing.List[Oracle]:
    cfg = CHECK_MODEL
    point = {name: t.data.astype(np.float64) for name, t in
             vit.init_params(cfg, Rng(seed), decoder=True, head=True).items()}
    # Perturb the zero-initialized biases so every path carries gradient.
    point = {k: v + 0.05 * gen.normal(size=v.shape) for k, v in point.items()}
    images = gen.uniform(size=(1, 3, cfg.image_side, cfg.image_side))
    patches = patchify_array(images, cfg.patch_size)
    visible = np.ones((1, cfg.num_tokens), dtype=bool)
    hidden = int(CHECK_RATIO * cfg.num_tokens)
    visible[0, gen.permutation(cfg.num_tokens)[:hidden]] = False
    all_visible = np.ones_like(visible)
    aux_side = cfg.image_side + 2 * cfg.patch_size
    aux = gen.uniform(size=(1, 3, aux_side, aux_side))
    labels = np.array([2])

    def recovery(p):
        pred = vit.forward_recovery(patches, visible, p, cfg)
        return recovery_loss(pred, patches, visible, normalized=True).total

    def integrated(p):
        pred = vit.forward_recovery(patches, visible, p, cfg)
        return integrated_loss(pred, patches, aux, visible, cfg.patch_size, 0.5).total

    def classification(p):
        tb = vit.encode(vit.embed_tokens(patches, all_visible, p, cfg), p, cfg)
        return ops.cross_entropy(vit.classify_linear(tb, p), labels)

    def restrict(prefixes):
        return {k: v for k, v in point.items() if k.startswith(prefixes)}

    return [
        Oracle('model_recovery', recovery,
               restrict(vit.ENCODER_PREFIXES + vit.DECODER_PREFIXES), MODEL_TOL, MODEL_COORDS),
        Oracle('model_integrated', integrated,
               restrict(vit.ENCODER_PREFIXES + vit.DECODER_PREFIXES), MODEL_TOL, MODEL_COORDS),
        Oracle('model_classification', classification,
               restrict(vit.ENCODER_PREFIXES + vit.HEAD_PREFIXES), MODEL_TOL, MODEL_COORDS),
    ]


def oracle_suite(seed : int) -> typing.List[Oracle]:
    gen = np.random.default_rng(seed)
    return primitive_oracles(gen) + model_oracles(gen, seed)


def run_suite(seeds : typing.Iterable[int],
              names : typing.Optional[typing.Collection[str]] = None
              ) -> typing.List[typing.Tuple[str, int, GradCheckReport]]:
    """Run every oracle (or those in `names`) at every seed; returns (name, seed, report)."""
    results = []
    for seed in seeds:
        for oracle in oracle_suite(seed):
            if names is not None and oracle.name not in names:
                continue
            report = grad_check(oracle.function, oracle.point, tol=oracle.tol,
                                max_coords=oracle.max_coords, seed=seed)
            results.append((oracle.name, seed, report))
            log_util.check_result(_LOG, f'{oracle.name}[seed={seed}]', report.passed,
                                  f'max rel err {report.max_error:.2e} (tol {oracle.tol:g})')
    return results


def parse_args(argv=None):
    parser = cli.ArgumentParser(description='Check back-propagated gradients numerically.')
    parser.add_argument('--seeds', type=int, default=20, help='random points per check')
    parser.add_argument('--only', action='append', help='run only the named check(s)')
    cli.add_verbosity(parser)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    cli.start_logging(['gradcheck'], args)
    results = run_suite(range(args.seeds), args.only)
    failed = [(name, seed, r) for name, seed, r in results if not r.passed]
    for name, seed, report in failed:
        _LOG.error('fail %s[seed=%d]: %s', name, seed, ', '.join(report.failures))
    _LOG.info('%d of %d gradient checks passed', len(results) - len(failed), len(results))
    return util.EXIT_RUNTIME if failed or not results else util.EXIT_OK


if __name__ == '__main__':
    cli.run_main(lambda: main(sys.argv[1:]))
