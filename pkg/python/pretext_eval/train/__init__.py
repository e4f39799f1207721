"""Training configuration and optimizer state shared by the pre-train, fine-tune and probe loops."""

import logging
import math
import typing

import attr
import numpy as np

from pretext_eval.degrade import RAND, DegradationSpec
from pretext_eval.model import PRESETS, ViTConfig
from pretext_eval.util import ConfigError, ShapeError, ValidationError
from pretext_eval.util.config_util import RunConfig


_LOG = logging.getLogger(__name__)


PHASES = ('pretrain', 'finetune', 'probe')

# Learning rates are per 256 images; the applied peak rate is base_lr * batch_size / 256.
PHASE_DEFAULTS = {
  'pretrain': dict(base_lr=1.5e-4, weight_decay=0.05, betas=(0.9, 0.95), epochs=300,
                   layerwise_decay=1.0),
  'finetune': dict(base_lr=5e-4, weight_decay=0.05, betas=(0.9, 0.999), epochs=100,
                   layerwise_decay=0.75),
  'probe': dict(base_lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), epochs=90,
                layerwise_decay=1.0),
}

LR_REFERENCE_BATCH = 256

MODEL_KEYS = ('patch_size', 'image_side', 'depth', 'width', 'heads', 'decoder_depth',
              'decoder_width', 'decoder_heads', 'mlp_ratio', 'num_classes', 'drop_rate',
              'drop_path_rate')

# RunConfig key -> DegradationSpec field, for keys whose names differ.
_SPEC_KEYS = {
  'mask_ratio': 'mask_ratio',
  'mask_mode': 'mask_mode',
  'zoom_side': 'zoom_side',
  'zoom_location': 'location',
  'zoom_position': 'position',
  'pad_mode': 'pad_mode',
  'aligned': 'aligned',
  'twist': 'twist',
  'kernel_size': 'kernel_size',
  'kernel_mode': 'kernel_mode',
  'saturation': 'saturation',
  'wave_amplitude': 'wave_amplitude',
  'wave_period': 'wave_period',
  'aux_side': 'aux_side',
}


@attr.s(auto_attribs=True, frozen=True)
class TrainConfig:
  """Optimization settings of one phase.

  Attributes
  ----------
  phase : str
      pretrain, finetune or probe.
  base_lr : float
      Learning rate per 256 images.
  weight_decay : float
      Decoupled weight decay.
  betas : Tuple[float, float]
      AdamW moment decay rates.
  epochs : int
      Passes over the training set.
  warmup_fraction : float
      Fraction of the optimizer steps spent in linear warmup.
  batch_size : int
      Images per optimizer step.
  layerwise_decay : float
      Per-block learning-rate decay rate; 1 disables it.
  spec : Optional[DegradationSpec]
      Degradation applied to pre-training inputs.
  seed : int
      Run seed.
  """

  phase : str
  base_lr : float
  weight_decay : float
  betas : typing.Tuple[float, float]
  epochs : int
  warmup_fraction : float = 0.1
  batch_size : int = 256
  layerwise_decay : float = 1.0
  spec : typing.Optional[DegradationSpec] = None
  seed : int = 0
  eps : float = 1e-8
  augment : bool = True
  crop_scale_min : float = 0.2
  normalized_targets : bool = True
  outer_weight : float = 1.0
  probe_mode : str = 'linear'
  probe_blocks : int = 2
  run_id : str = 'run'
  checkpoint_every : int = 0
  log_every : int = 10
  num_workers : int = 1
  seeded_shards : bool = True
  record_wall_time : bool = True

  @classmethod
  def for_phase(cls, phase : str, **overrides) -> 'TrainConfig':
    """The phase defaults, with `overrides` applied."""
    if phase not in PHASE_DEFAULTS:
      raise ValidationError(f'unknown phase {phase!r}; expected one of {", ".join(PHASES)}')
    kw = dict(PHASE_DEFAULTS[phase], phase=phase)
    kw.update(overrides)
    return cls(**kw)

  @property
  def mask_ratio(self) -> typing.Optional[float]:
    return self.spec.mask_ratio if self.spec is not None else None

  @property
  def peak_lr(self) -> float:
    return self.base_lr * self.batch_size / LR_REFERENCE_BATCH

  def steps_per_epoch(self, num_images : int) -> int:
    return math.ceil(num_images / self.batch_size)

  def total_steps(self, num_images : int) -> int:
    return self.epochs * self.steps_per_epoch(num_images)

  def problems(self) -> typing.List[str]:
    p = []
    if self.phase not in PHASES:
      p.append(f'unknown phase {self.phase!r}')
    if not self.base_lr > 0:
      p.append(f'base_lr must be positive, got {self.base_lr}')
    if self.weight_decay < 0:
      p.append(f'weight_decay must be >= 0, got {self.weight_decay}')
    if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
      p.append(f'betas must be two values in [0, 1), got {self.betas}')
    if self.epochs < 1:
      p.append(f'epochs must be >= 1, got {self.epochs}')
    if not 0.0 <= self.warmup_fraction < 1.0:
      p.append(f'warmup_fraction must be in [0, 1), got {self.warmup_fraction}')
    if self.batch_size < 1:
      p.append(f'batch_size must be >= 1, got {self.batch_size}')
    if not 0.0 < self.layerwise_decay <= 1.0:
      p.append(f'layerwise_decay must be in (0, 1], got {self.layerwise_decay}')
    if not 0.0 < self.crop_scale_min <= 1.0:
      p.append(f'crop_scale_min must be in (0, 1], got {self.crop_scale_min}')
    if self.outer_weight < 0:
      p.append(f'outer_weight must be >= 0, got {self.outer_weight}')
    if self.probe_mode not in ('linear', 'nonlinear'):
      p.append(f'probe_mode must be linear or nonlinear, got {self.probe_mode!r}')
    if self.probe_mode == 'nonlinear' and self.probe_blocks < 1:
      p.append(f'probe_blocks must be >= 1 for non-linear probing, got {self.probe_blocks}')
    if self.num_workers < 1:
      p.append(f'num_workers must be >= 1, got {self.num_workers}')
    if self.checkpoint_every < 0 or self.log_every < 1:
      p.append('checkpoint_every must be >= 0 and log_every >= 1')
    if self.phase == 'pretrain':
      if self.spec is None:
        p.append('pre-training needs a degradation spec')
      else:
        p.extend(self.spec.problems())
        if self.spec.task == 'zoomed_out' and self.spec.pad_mode == 'none' and \
           self.spec.zoom_side == RAND:
          p.append('zoomed_out with pad_mode=none needs a fixed zoom_side for training: every '
                   'sample of a batch must keep the same number of tokens')
    return p

  def validate(self) -> 'TrainConfig':
    problems = self.problems()
    if problems:
      raise ValidationError(problems)
    return self


@attr.s(auto_attribs=True)
class OptimizerState:
  """AdamW moment buffers.

  Attributes
  ----------
  m, v : Dict[str, np.ndarray]
      First and second moment per parameter name, shaped like the parameter.
  step : int
      Number of updates applied; never decreases.
  """

  m : typing.Dict[str, np.ndarray] = attr.Factory(dict)
  v : typing.Dict[str, np.ndarray] = attr.Factory(dict)
  step : int = 0

  def buffers(self, name : str, shape : tuple, dtype) -> typing.Tuple[np.ndarray, np.ndarray]:
    """The (m, v) buffers of `name`, created as zeros on first use."""
    if name not in self.m:
      self.m[name] = np.zeros(shape, dtype=dtype)
      self.v[name] = np.zeros(shape, dtype=dtype)
    m, v = self.m[name], self.v[name]
    if m.shape != tuple(shape) or v.shape != tuple(shape):
      raise ShapeError(f'optimizer moments of {name} have shape {m.shape}, parameter has {shape}')
    return m, v

  def to_tensors(self) -> typing.Dict[str, np.ndarray]:
    out = {f'optim.m.{n}': a for n, a in self.m.items()}
    out.update({f'optim.v.{n}': a for n, a in self.v.items()})
    return out

  @classmethod
  def from_tensors(cls, tensors : typing.Mapping[str, np.ndarray], step : int) -> 'OptimizerState':
    m = {k[len('optim.m.'):]: np.array(a) for k, a in tensors.items() if k.startswith('optim.m.')}
    v = {k[len('optim.v.'):]: np.array(a) for k, a in tensors.items() if k.startswith('optim.v.')}
    if set(m) != set(v):
      raise ValidationError('checkpoint holds first and second moments for different parameters')
    return cls(m, v, int(step))


@attr.s(auto_attribs=True, frozen=True)
class RunPlan:
  """Everything a phase needs besides data: model geometry, optimization and the resolved config.

  Attributes
  ----------
  model : ViTConfig
  train : TrainConfig
  config : Dict[str, Any]
      The resolved RunConfig, stored in every checkpoint.
  """

  model : ViTConfig
  train : TrainConfig
  config : typing.Dict[str, typing.Any] = attr.Factory(dict)


def vit_config(run : RunConfig, num_classes : typing.Optional[int] = None,
               base : typing.Optional[typing.Mapping[str, typing.Any]] = None) -> ViTConfig:
  """The preset named by `model`, then `base` (a checkpoint's geometry), then explicit keys."""
  kw = dict(base or {})
  if num_classes is not None:
    kw['num_classes'] = num_classes
  kw.update(run.explicit(MODEL_KEYS))
  try:
    return PRESETS[run['model']](**kw)
  except TypeError as err:
    raise ConfigError(f'bad model geometry: {err}') from err


def degradation_spec(run : RunConfig, model : ViTConfig) -> DegradationSpec:
  """Task defaults scaled to the model canvas, with explicit degradation keys applied."""
  overrides = {}
  for key, field in _SPEC_KEYS.items():
    value = run.get(key)
    if value is None:
      continue
    if key == 'twist':
      value = tuple(value) if isinstance(value, list) else (float(value), float(value))
    elif key == 'zoom_position':
      value = tuple(value)
    overrides[field] = value
  return DegradationSpec.default(run['task'], model.image_side, model.patch_size, **overrides)


def spec_run_config(spec : DegradationSpec, **values) -> RunConfig:
  """The inverse of degradation_spec: a RunConfig recording every field of `spec`, plus `values`.

  Commands that take degradation parameters instead of a config file write this next to their
  outputs.
  """
  base = dict(values, task=spec.task, image_side=spec.image_side, patch_size=spec.patch_size)
  for key, field in _SPEC_KEYS.items():
    value = getattr(spec, field)
    base[key] = list(value) if isinstance(value, tuple) else value
  return RunConfig.resolve(base=base)


def train_config(run : RunConfig, phase : str,
                 spec : typing.Optional[DegradationSpec] = None) -> TrainConfig:
  """Phase defaults overridden by every explicit optimization key of `run`."""
  kw = dict(
    seed=run['seed'],
    run_id=run['run_id'],
    batch_size=run['batch_size'],
    warmup_fraction=run['warmup_fraction'],
    augment=run['augment'],
    crop_scale_min=run['crop_scale_min'],
    normalized_targets=run['normalized_targets'],
    outer_weight=run['outer_weight'],
    probe_mode=run['probe_mode'],
    probe_blocks=run['probe_blocks'],
    checkpoint_every=run['checkpoint_every'],
    log_every=run['log_every'],
    num_workers=run['num_workers'],
    seeded_shards=run['seeded_shards'],
    record_wall_time=run['record_wall_time'],
    spec=spec,
  )
  kw.update(run.explicit(('base_lr', 'weight_decay', 'epochs', 'layerwise_decay')))
  betas = PHASE_DEFAULTS.get(phase, PHASE_DEFAULTS['pretrain'])['betas']
  kw['betas'] = (run.get('beta1') if run.get('beta1') is not None else betas[0],
                 run.get('beta2') if run.get('beta2') is not None else betas[1])
  return TrainConfig.for_phase(phase, **kw)


def plan_from_config(run : RunConfig, phase : str, num_classes : typing.Optional[int] = None,
                     model_base : typing.Optional[typing.Mapping[str, typing.Any]] = None
                     ) -> RunPlan:
  """Build and validate the model, degradation and optimization settings of a run.

  Params
  ------
  run : RunConfig
      Resolved configuration.
  phase : str
      pretrain, finetune or probe.
  num_classes : Optional[int]
      Class count of the training data; an explicit num_classes key must agree with it.
  model_base : Optional[Mapping]
      Geometry recorded in the checkpoint being continued; explicit model keys still win.

  Raises
  ------
  ConfigError :
      Listing every problem of the model, the degradation and the optimization settings at once.
  """
  problems = []
  if num_classes is not None and run.get('num_classes') not in (None, num_classes):
    problems.append(f'num_classes is {run["num_classes"]} but the dataset has {num_classes} '
                    'classes')
  model = vit_config(run, num_classes, model_base)
  problems.extend(model.problems())
  spec = None
  if phase == 'pretrain' and not model.problems():
    spec = degradation_spec(run, model)
  train = train_config(run, phase, spec)
  problems.extend(p for p in train.problems() if p not in problems)
  if problems:
    raise ConfigError(problems)
  _LOG.debug('%s plan: %r', phase, train)
  return RunPlan(model, train, dict(run))
