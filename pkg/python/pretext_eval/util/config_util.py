import json
import os
import typing

import attr

from . import ConfigError, atomic_write


class Config(dict):
  """Extends dict to add path lookup capabilities."""

  @classmethod
  def load(cls, path : str):
    """Load JSON dict from path.

    Params
    ------
    path : str
        The path to the JSON file. The JSON file should contain a dict at the
        top-level.

    Returns
    -------
    Config :
        The loaded Config instance.
    """
    with open(path) as f:
      obj = json.load(f)

    if not isinstance(obj, dict):
      raise ValueError(f'Expected JSON file to contain a dict, got {obj!r}')

    return cls(path, obj)

  def __init__(self, path, data):
    super(Config, self).__init__(data)
    self._path = path

  @property
  def path(self) -> typing.Optional[str]:
    return self._path

  def relpath(self, key : typing.Union[str, int, bool]) -> str:
    return os.path.join(os.path.dirname(self._path), self[key])


@attr.s(auto_attribs=True, frozen=True)
class ConfigKey:
  """One documented RunConfig key.

  Attributes
  ----------
  name : str
      Key as written in JSON and on the --set command line.
  kind : type
      Expected value type (int, float, bool, str or list); None is always accepted and means
      "derive from the preset or task defaults".
  default : Any
      Value used when neither the config file nor an override sets the key.
  doc : str
      One-line description.
  choices : Optional[Tuple]
      Allowed values, when the key is an enumeration.
  is_path : bool
      Relative values are resolved against the config file's directory.
  """

  name : str
  kind : type
  default : typing.Any
  doc : str
  choices : typing.Optional[tuple] = None
  is_path : bool = False


_KEYS = [
  # run
  ConfigKey('run_id', str, 'run', 'Identifier copied into every metrics row.'),
  ConfigKey('seed', int, 0, 'Run seed; every random stream derives from it.'),
  ConfigKey('train_data', str, None, 'Training dataset: class directory or packed file.',
            is_path=True),
  ConfigKey('test_data', str, None, 'Evaluation dataset for fine-tuning and probing.',
            is_path=True),
  ConfigKey('init', str, None, 'Checkpoint to start from (finetune, probe, recover).',
            is_path=True),
  ConfigKey('num_workers', int, 1, 'Degradation workers; 1 keeps runs bit-deterministic.'),
  ConfigKey('seeded_shards', bool, True,
            'With several workers, give each sample its own stream so batches stay deterministic.'),
  ConfigKey('record_wall_time', bool, True, 'Fill wall_ms in metrics rows.'),
  ConfigKey('checkpoint_every', int, 0, 'Checkpoint cadence in epochs; 0 writes only at the end.'),
  ConfigKey('log_every', int, 10, 'Steps between DEBUG progress lines.'),
  ConfigKey('max_train_images', int, None, 'Use only the first N training images.'),
  # model
  ConfigKey('model', str, 'toy', 'ViT preset.', choices=('toy', 'base')),
  ConfigKey('patch_size', int, None, 'Token side P in pixels.'),
  ConfigKey('image_side', int, None, 'Model canvas side in pixels.'),
  ConfigKey('depth', int, None, 'Encoder blocks.'),
  ConfigKey('width', int, None, 'Encoder width.'),
  ConfigKey('heads', int, None, 'Encoder attention heads.'),
  ConfigKey('decoder_depth', int, None, 'Decoder blocks.'),
  ConfigKey('decoder_width', int, None, 'Decoder width.'),
  ConfigKey('decoder_heads', int, None, 'Decoder attention heads.'),
  ConfigKey('mlp_ratio', float, None, 'MLP hidden width multiple.'),
  ConfigKey('num_classes', int, None, 'Classifier outputs; defaults to the dataset class count.'),
  ConfigKey('drop_rate', float, None, 'Dropout rate.'),
  ConfigKey('drop_path_rate', float, None, 'Stochastic depth rate.'),
  # optimization
  ConfigKey('epochs', int, None, 'Epochs; phase default when unset.'),
  ConfigKey('batch_size', int, 256, 'Images per step.'),
  ConfigKey('base_lr', float, None, 'Learning rate per 256 images; phase default when unset.'),
  ConfigKey('weight_decay', float, None, 'Decoupled weight decay; phase default when unset.'),
  ConfigKey('beta1', float, None, 'AdamW beta1.'),
  ConfigKey('beta2', float, None, 'AdamW beta2; 0.95 for pre-training, 0.999 otherwise.'),
  ConfigKey('warmup_fraction', float, 0.1, 'Fraction of steps spent in linear warmup.'),
  ConfigKey('layerwise_decay', float, None, 'Layer-wise lr decay for fine-tuning.'),
  ConfigKey('augment', bool, True, 'Random resized crop + horizontal flip on training images.'),
  ConfigKey('crop_scale_min', float, 0.2, 'Smallest crop area fraction.'),
  ConfigKey('normalized_targets', bool, True, 'Standardize each target patch.'),
  ConfigKey('outer_weight', float, 1.0, 'Weight of the outer-band term (integrated task).'),
  # degradation
  ConfigKey('task', str, 'masked', 'Pre-training degradation.',
            choices=('masked', 'zoomed_in', 'zoomed_out', 'distorted', 'blurred', 'decolorized',
                     'shuffled', 'wave_distorted', 'integrated')),
  ConfigKey('mask_ratio', float, None, 'Fraction of hidden tokens.'),
  ConfigKey('mask_mode', str, None, 'Token masking layout.', choices=('random', 'block', 'center')),
  ConfigKey('zoom_side', (int, str), None, 'Zoom S in pixels, or "rand" for zoomed_out.'),
  ConfigKey('zoom_location', str, None, 'zoomed_in crop location.', choices=('center', 'random')),
  ConfigKey('zoom_position', list, None, 'Fixed zoomed_out (a, b); random when unset.'),
  ConfigKey('pad_mode', str, None, 'zoomed_out fill.',
            choices=('mirror', 'none', 'black', 'other_image')),
  ConfigKey('aligned', bool, None, 'Align zoomed_out S, a and b to tokens.'),
  ConfigKey('twist', (float, list), None, 'Fisheye twist ratio, or a [lo, hi] interval.'),
  ConfigKey('kernel_size', (int, str), None, 'Blur kernel side, or "rand".'),
  ConfigKey('kernel_mode', str, None, 'Blur kernel family.',
            choices=('random_normal', 'delta', 'raw_normal')),
  ConfigKey('saturation', float, None, 'Saturation multiplier for decolorized.'),
  ConfigKey('wave_amplitude', float, None, 'Wave amplitude in pixels.'),
  ConfigKey('wave_period', float, None, 'Wave period in pixels.'),
  ConfigKey('aux_side', int, None, 'Outer canvas side of the integrated task.'),
  # probing
  ConfigKey('probe_mode', str, 'linear', 'Probe head.', choices=('linear', 'nonlinear')),
  ConfigKey('probe_blocks', int, 2, 'Blocks inserted for non-linear probing.'),
]

RUN_CONFIG_KEYS = {k.name: k for k in _KEYS}


def parse_override(text : str) -> typing.Tuple[str, typing.Any]:
  """Parse `key=value`; the value is read as JSON when possible and as a string otherwise."""
  if '=' not in text:
    raise ConfigError(f'override {text!r} is not of the form key=value')
  key, raw = text.split('=', 1)
  try:
    value = json.loads(raw)
  except ValueError:
    value = raw
  return key.strip(), value


def _check_value(key : ConfigKey, value) -> typing.Optional[str]:
  if value is None:
    return None
  kinds = key.kind if isinstance(key.kind, tuple) else (key.kind,)
  ok = False
  for kind in kinds:
    if kind is float:
      ok = ok or (isinstance(value, (int, float)) and not isinstance(value, bool))
    elif kind is int:
      ok = ok or (isinstance(value, int) and not isinstance(value, bool))
    else:
      ok = ok or isinstance(value, kind)
  if not ok:
    names = ' or '.join(k.__name__ for k in kinds)
    return f'{key.name} must be {names}, got {value!r}'
  if key.choices is not None and value not in key.choices:
    return f'{key.name} must be one of {", ".join(key.choices)}, got {value!r}'
  return None


class RunConfig(Config):
  """A fully resolved, validated run configuration (a flat dict over RUN_CONFIG_KEYS)."""

  @classmethod
  def resolve(cls, config_path : typing.Optional[str] = None,
              overrides : typing.Iterable[str] = (),
              base : typing.Optional[typing.Mapping[str, typing.Any]] = None) -> 'RunConfig':
    """Defaults, then `base` (command defaults), then the config file, then overrides.

    Raises
    ------
    ConfigError :
        Listing every unknown key and invalid value at once.
    """
    values = {name: key.default for name, key in RUN_CONFIG_KEYS.items()}
    values.update(base or {})
    problems = []
    file_values = {}
    if config_path is not None:
      try:
        loaded = Config.load(os.path.abspath(config_path))
      except (OSError, ValueError) as err:
        raise ConfigError(f'could not load config {config_path}: {err}') from err
      file_values = dict(loaded)
      for name, value in loaded.items():
        key = RUN_CONFIG_KEYS.get(name)
        if key is not None and key.is_path and isinstance(value, str) and not os.path.isabs(value):
          file_values[name] = os.path.normpath(loaded.relpath(name))
    parsed = []
    for text in overrides:
      try:
        parsed.append(parse_override(text))
      except ConfigError as err:
        problems.extend(err.problems)
    for name, value in list(file_values.items()) + parsed:
      if name not in RUN_CONFIG_KEYS:
        problems.append(f'unknown config key {name!r}')
        continue
      values[name] = value
    for name, value in values.items():
      problem = _check_value(RUN_CONFIG_KEYS[name], value)
      if problem:
        problems.append(problem)
    if problems:
      raise ConfigError(problems)
    return cls(config_path, values)

  def explicit(self, names : typing.Iterable[str]) -> typing.Dict[str, typing.Any]:
    """The subset of `names` with non-None values."""
    return {n: self[n] for n in names if self.get(n) is not None}

  def to_json(self) -> str:
    return json.dumps(dict(self), indent=2, sort_keys=True) + '\n'

  def write(self, out_dir : str, name : str = 'config.json') -> str:
    path = os.path.join(out_dir, name)
    with atomic_write(path, 'w') as f:
      f.write(self.to_json())
    return path
