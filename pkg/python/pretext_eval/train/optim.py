"""AdamW with decoupled weight decay, the warmup + cosine schedule and layer-wise lr scales."""

import logging
import math
import re
import typing

import numpy as np

from pretext_eval.engine import ParamSet
from pretext_eval.util import NonFiniteError, ShapeError, ValidationError
from . import OptimizerState


_LOG = logging.getLogger(__name__)

_BLOCK_RE = re.compile(r'^blocks\.(\d+)\.')
EMBED_PREFIXES = ('patch_embed.', 'cls_token')
NO_DECAY_SUFFIXES = ('cls_token', 'mask_token')


def decays(name : str, value : np.ndarray) -> bool:
  """Whether weight decay applies to a parameter.

  Matrices decay. Vectors do not: biases, norm gains, the class token and the mask token.
  """
  return value.ndim > 1 and not name.endswith(NO_DECAY_SUFFIXES)


def adamw_step(params : ParamSet, grads : typing.Mapping[str, np.ndarray], state : OptimizerState,
               lr : float, wd : float, betas : typing.Tuple[float, float] = (0.9, 0.95),
               eps : float = 1e-8,
               lr_scales : typing.Optional[typing.Mapping[str, float]] = None) -> OptimizerState:
  """Apply one AdamW update in place to the parameters named in `grads`.

  Parameters missing from `grads` are frozen: neither they nor their moments change. The update
  is theta <- theta * (1 - lr_i * wd) - lr_i * m_hat / (sqrt(v_hat) + eps) with bias-corrected
  moments, where lr_i is lr times the parameter's scale.

  Raises
  ------
  ShapeError :
      When a gradient does not match its parameter.
  NonFiniteError :
      When a gradient holds NaN or inf; nothing is updated.
  """
  for name, g in grads.items():
    if name not in params:
      raise ShapeError(f'gradient for unknown parameter {name}')
    if g.shape != params[name].shape:
      raise ShapeError(f'gradient of {name} has shape {g.shape}, parameter has '
                       f'{params[name].shape}')
    if not np.isfinite(g).all():
      raise NonFiniteError(f'gradient of {name} is not finite at step {state.step + 1}',
                           name=name)

  beta1, beta2 = betas
  state.step += 1
  t = state.step
  correction1 = 1.0 - beta1 ** t
  correction2 = 1.0 - beta2 ** t
  for name in sorted(grads):
    p = params[name]
    g = grads[name].astype(p.dtype, copy=False)
    m, v = state.buffers(name, p.shape, p.dtype)
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    step_lr = lr * (lr_scales.get(name, 1.0) if lr_scales else 1.0)
    if wd and decays(name, p.data):
      p.data *= p.dtype.type(1.0 - step_lr * wd)
    denom = np.sqrt(v / correction2) + eps
    p.data -= (step_lr * (m / correction1) / denom).astype(p.dtype)
  return state


def cosine_lr(step : int, total_steps : int, base_lr : float,
              warmup_fraction : float = 0.1) -> float:
  """Learning rate at optimizer step `step` of `total_steps`.

  Linear warmup from 0 reaches base_lr at step round(warmup_fraction * total_steps); the rate
  then follows half a cosine down to 0 at step total_steps.
  """
  if total_steps < 1:
    raise ValidationError(f'cosine_lr needs total_steps >= 1, got {total_steps}')
  if not 0.0 <= warmup_fraction < 1.0:
    raise ValidationError(f'warmup_fraction must be in [0, 1), got {warmup_fraction}')
  warmup = min(int(round(warmup_fraction * total_steps)), total_steps - 1)
  step = min(max(step, 0), total_steps)
  if step < warmup:
    return base_lr * step / warmup
  progress = (step - warmup) / (total_steps - warmup)
  return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def layerwise_scales(depth : int, rate : float = 0.75) -> typing.Dict[str, float]:
  """Learning-rate multipliers per parameter group.

  Block i (0-based) gets rate ** (depth - i), the patch embedding and class token rate **
  (depth + 1), and everything after the last block (final norm, heads) 1.
  """
  if not 0.0 < rate <= 1.0:
    raise ValidationError(f'layer-wise decay rate must be in (0, 1], got {rate}')
  scales = {'embed': rate ** (depth + 1)}
  for i in range(depth):
    scales[f'blocks.{i:02d}'] = rate ** (depth - i)
  scales['head'] = 1.0
  return scales


def param_group(name : str) -> str:
  """The layerwise_scales group a parameter belongs to."""
  if name.startswith(EMBED_PREFIXES):
    return 'embed'
  match = _BLOCK_RE.match(name)
  if match:
    return f'blocks.{int(match.group(1)):02d}'
  return 'head'


def param_lr_scales(names : typing.Iterable[str], depth : int,
                    rate : float = 0.75) -> typing.Dict[str, float]:
  scales = layerwise_scales(depth, rate)
  return {name: scales[param_group(name)] for name in names}
