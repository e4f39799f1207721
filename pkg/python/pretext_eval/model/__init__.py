import logging
import typing

import attr

from pretext_eval.util import ValidationError
from pretext_eval.util import config_util


_LOG = logging.getLogger(__name__)


@attr.s(auto_attribs=True, frozen=True)
class ViTConfig:
  """Geometry of the encoder-decoder ViT and its heads.

  Attributes
  ----------
  patch_size : int
      Token side P in pixels.
  image_side : int
      Square input canvas side in pixels.
  depth, width, heads : int
      Encoder blocks L, channel width D and attention heads h.
  decoder_depth, decoder_width, decoder_heads : int
      The same for the pre-training decoder.
  mlp_ratio : float
      MLP hidden width as a multiple of the block width.
  num_classes : int
      Output count of the classification heads.
  drop_rate : float
      Dropout on attention and MLP outputs during training.
  drop_path_rate : float
      Per-sample residual-branch drop probability, ramped linearly up to this value over depth.
  """

  patch_size : int = 4
  image_side : int = 32
  depth : int = 4
  width : int = 96
  heads : int = 4
  decoder_depth : int = 2
  decoder_width : int = 48
  decoder_heads : int = 4
  mlp_ratio : float = 4.0
  num_classes : int = 10
  drop_rate : float = 0.0
  drop_path_rate : float = 0.0

  @classmethod
  def base(cls, **overrides) -> 'ViTConfig':
    """ViT-Base encoder (12 x 768) with the 4 x 384 decoder, 224 px canvas, 1000 classes."""
    kw = dict(patch_size=16, image_side=224, depth=12, width=768, heads=12, decoder_depth=4,
              decoder_width=384, decoder_heads=12, num_classes=1000)
    kw.update(overrides)
    return cls(**kw)

  @classmethod
  def toy(cls, **overrides) -> 'ViTConfig':
    """Desk-scale preset for 32 x 32 images."""
    return cls(**overrides)

  @property
  def grid(self) -> typing.Tuple[int, int]:
    n = self.image_side // self.patch_size
    return n, n

  @property
  def num_tokens(self) -> int:
    return self.grid[0] * self.grid[1]

  @property
  def patch_dim(self) -> int:
    return 3 * self.patch_size * self.patch_size

  @property
  def mlp_width(self) -> int:
    return int(self.width * self.mlp_ratio)

  @property
  def decoder_mlp_width(self) -> int:
    return int(self.decoder_width * self.mlp_ratio)

  def problems(self) -> typing.List[str]:
    p = []
    for name in ('patch_size', 'image_side', 'depth', 'width', 'heads', 'decoder_depth',
                 'decoder_width', 'decoder_heads', 'num_classes'):
      if getattr(self, name) < 1:
        p.append(f'{name} must be >= 1, got {getattr(self, name)}')
    if p:
      return p
    if self.image_side % self.patch_size:
      p.append(f'image_side {self.image_side} is not a multiple of patch_size {self.patch_size}')
    if self.width % self.heads:
      p.append(f'width {self.width} is not divisible by heads {self.heads}')
    if self.decoder_width % self.decoder_heads:
      p.append(f'decoder_width {self.decoder_width} is not divisible by decoder_heads '
               f'{self.decoder_heads}')
    for name in ('width', 'decoder_width'):
      if getattr(self, name) % 4:
        p.append(f'{name} {getattr(self, name)} must be divisible by 4 for 2-D sin-cos '
                 'position embeddings')
    if self.mlp_ratio <= 0:
      p.append(f'mlp_ratio must be positive, got {self.mlp_ratio}')
    for name in ('drop_rate', 'drop_path_rate'):
      if not 0.0 <= getattr(self, name) < 1.0:
        p.append(f'{name} must be in [0, 1), got {getattr(self, name)}')
    return p

  def validate(self) -> 'ViTConfig':
    problems = self.problems()
    if problems:
      raise ValidationError(problems)
    return self


PRESETS = {
  'base': ViTConfig.base,
  'toy': ViTConfig.toy,
}


class ModelInstantiationError(ValidationError):
  """Raised when a model can't be instantiated."""


def instantiate_from_spec(spec : str) -> ViTConfig:
  """Build a ViTConfig from a model specification string.

  Params
  ------
  spec : str
      `vit:<preset>` or `vit:<preset>:config=<path>`, where the JSON config at path overrides
      ViTConfig fields of the preset.

  Returns
  -------
  ViTConfig :
      The validated configuration.

  Raises
  ------
  ModelInstantiationError:
      When the spec is malformed, names an unknown preset, or yields an invalid config.
  """
  parts = spec.split(':')
  if len(parts) > 3:
    raise ModelInstantiationError(f'model spec: want at most 3 colon-separated parts, got {spec}')
  elif len(parts) == 3:
    model_name, preset, config_path = parts
  elif len(parts) == 2:
    model_name, preset = parts
    config_path = None
  else:
    raise ModelInstantiationError(f'model spec: want at least 2 colon-separated parts, got {spec}')

  if model_name != 'vit':
    raise ModelInstantiationError(f'model spec: unknown model {model_name!r}; only vit is built')
  if preset not in PRESETS:
    raise ModelInstantiationError(f'model spec: unknown preset {preset!r}; expected one of '
                                  f'{", ".join(sorted(PRESETS))}')

  overrides = {}
  if config_path is not None:
    expected = 'config='
    if '=' in config_path and not config_path.startswith(expected):
      raise ModelInstantiationError(
        f'model spec: expected item #2 to begin with label "{expected}" if one is present; got '
        f'{config_path}')
    config_path = config_path[len(expected):] if config_path.startswith(expected) else config_path
    try:
      overrides = dict(config_util.Config.load(config_path))
    except (OSError, ValueError) as err:
      raise ModelInstantiationError(f'Could not load model config from {config_path}') from err

  known = {f.name for f in attr.fields(ViTConfig)}
  unknown = sorted(set(overrides) - known)
  if unknown:
    raise ModelInstantiationError([f'unknown ViTConfig key {k!r}' for k in unknown])
  try:
    config = PRESETS[preset](**overrides).validate()
  except ValidationError as err:
    raise ModelInstantiationError(err.problems) from err
  _LOG.debug('instantiated %s from %s', config, spec)
  return config
