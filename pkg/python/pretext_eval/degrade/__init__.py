"""Degradation tasks: configuration, factor tags and degraded training pairs.

Each task turns a clean image x into a model input x~; the model is trained to recover x. The
six canonical tasks are masked (m), zoomed_in (a), zoomed_out (b), distorted (c), blurred (d) and
decolorized (e). shuffled and wave_distorted are diagnostic variants; integrated combines zoom-in
with masking and adds an outer-band target.
"""

import math
import typing

import attr
import numpy as np

from pretext_eval.util import DegradationParamError, GeometryError
from .rng import Rng


CANONICAL_TASKS = ('masked', 'zoomed_in', 'zoomed_out', 'distorted', 'blurred', 'decolorized')
VARIANT_TASKS = ('shuffled', 'wave_distorted', 'integrated')
TASKS = CANONICAL_TASKS + VARIANT_TASKS

TASK_LABELS = {
  'masked': '(m)',
  'zoomed_in': '(a)',
  'zoomed_out': '(b)',
  'distorted': '(c)',
  'blurred': '(d)',
  'decolorized': '(e)',
  'integrated': '(m)+(a)',
  'shuffled': '(*)',
  'wave_distorted': '(c*)',
}

MASK_MODES = ('random', 'block', 'center')
PAD_MODES = ('mirror', 'none', 'black', 'other_image')
ZOOM_LOCATIONS = ('center', 'random')
KERNEL_MODES = ('random_normal', 'delta', 'raw_normal')

# Reference-scale (224 px canvas, 16 px tokens) constants.
REFERENCE_SIDE = 224
ZOOM_SIDE = 160
ZOOM_OUT_CHOICES = (96, 128, 160, 192)
KERNEL_SIZE = 9
KERNEL_CHOICES = (5, 7, 9, 11)
SMALL_CANVAS_KERNEL_SIZE = 3
SMALL_CANVAS_KERNEL_CHOICES = (3, 5, 7, 9)
TWIST_INTERVAL = (0.20, 0.25)
SATURATION = 0.3
SATURATION_CHOICES = (0.0, 0.3, 0.6)
MASK_RATIO = 0.75
AUX_SIDE = 320
WAVE_AMPLITUDE = 8.0
WAVE_PERIOD = 64.0

RAND = 'rand'


def scale_to_tokens(value : float, side : int, patch_size : int) -> int:
  """Scale a reference-scale pixel length to a `side` canvas, rounded to whole tokens (>= 1 token)."""
  tokens = max(1, int(round(value * side / REFERENCE_SIDE / patch_size)))
  return tokens * patch_size


@attr.s(auto_attribs=True, frozen=True)
class DegradationSpec:
  """One task and its parameters.

  Attributes
  ----------
  task : str
      One of TASKS.
  image_side : int
      Model canvas side in pixels.
  patch_size : int
      Token side P in pixels.
  mask_ratio : float
      Fraction of tokens removed (masked, integrated).
  mask_mode : str
      random, block (one visible rectangle) or center (central zoom_side block visible).
  zoom_side : Union[int, str]
      S for zoomed_in / zoomed_out and the visible block of mask_mode=center; 'rand' draws from
      zoom_choices per sample (zoomed_out only).
  zoom_choices : Tuple[int, ...]
      Options for zoom_side='rand'.
  location : str
      zoomed_in crop location, center or random.
  position : Optional[Tuple[int, int]]
      Fixed (a, b) for zoomed_out (column, row of the top-left corner); random when None.
  pad_mode : str
      zoomed_out fill: mirror, none, black or other_image.
  aligned : bool
      Require zoomed_out S, a, b to be multiples of P.
  twist : Tuple[float, float]
      Interval the fisheye twist ratio is drawn from; (t, t) fixes it.
  kernel_size : Union[int, str]
      Blur kernel side (odd) or 'rand'.
  kernel_choices : Tuple[int, ...]
      Options for kernel_size='rand'.
  kernel_mode : str
      random_normal (|w| / sum |w|), delta or raw_normal.
  saturation : float
      Saturation multiplier for decolorized.
  wave_amplitude, wave_period : float
      Horizontal wave parameters in pixels.
  aux_side : int
      Outer canvas side for integrated.
  """

  task : str
  image_side : int = REFERENCE_SIDE
  patch_size : int = 16
  mask_ratio : float = MASK_RATIO
  mask_mode : str = 'random'
  zoom_side : typing.Union[int, str] = ZOOM_SIDE
  zoom_choices : typing.Tuple[int, ...] = ZOOM_OUT_CHOICES
  location : str = 'center'
  position : typing.Optional[typing.Tuple[int, int]] = None
  pad_mode : str = 'mirror'
  aligned : bool = True
  twist : typing.Tuple[float, float] = TWIST_INTERVAL
  kernel_size : typing.Union[int, str] = KERNEL_SIZE
  kernel_choices : typing.Tuple[int, ...] = KERNEL_CHOICES
  kernel_mode : str = 'random_normal'
  saturation : float = SATURATION
  wave_amplitude : float = WAVE_AMPLITUDE
  wave_period : float = WAVE_PERIOD
  aux_side : int = AUX_SIDE

  @classmethod
  def default(cls, task : str, image_side : int = REFERENCE_SIDE, patch_size : int = 16,
              **overrides) -> 'DegradationSpec':
    """Defaults for `task`, with reference-scale lengths scaled to the given canvas."""
    scale = image_side / REFERENCE_SIDE
    full_scale = image_side >= REFERENCE_SIDE
    kw = dict(
      task=task,
      image_side=image_side,
      patch_size=patch_size,
      zoom_side=scale_to_tokens(ZOOM_SIDE, image_side, patch_size),
      zoom_choices=tuple(scale_to_tokens(s, image_side, patch_size) for s in ZOOM_OUT_CHOICES),
      kernel_size=KERNEL_SIZE if full_scale else SMALL_CANVAS_KERNEL_SIZE,
      kernel_choices=KERNEL_CHOICES if full_scale else SMALL_CANVAS_KERNEL_CHOICES,
      wave_amplitude=WAVE_AMPLITUDE * scale,
      wave_period=WAVE_PERIOD * scale,
      aux_side=scale_to_tokens(AUX_SIDE, image_side, patch_size),
    )
    kw.update(overrides)
    return cls(**kw)

  @property
  def grid(self) -> typing.Tuple[int, int]:
    n = self.image_side // self.patch_size
    return n, n

  @property
  def num_tokens(self) -> int:
    rows, cols = self.grid
    return rows * cols

  @property
  def uses_zoom_side(self) -> bool:
    return self.task in ('zoomed_in', 'zoomed_out') or (
      self.task == 'masked' and self.mask_mode == 'center')

  def _zoom_problems(self) -> typing.List[str]:
    p = []
    if self.zoom_side == RAND and self.task != 'zoomed_out':
      p.append(f'{self.task} needs a fixed zoom_side; a random scale makes the task unpredictable')
    sides = self.zoom_choices if self.zoom_side == RAND else (self.zoom_side,)
    aligned = self.aligned or self.task != 'zoomed_out'
    for s in sides:
      if not isinstance(s, int) or s < 1 or s > self.image_side:
        p.append(f'zoom side {s!r} must be an integer in [1, {self.image_side}]')
      elif aligned and s % self.patch_size:
        p.append(f'zoom side {s} must be a multiple of the token size {self.patch_size}')
    if self.task == 'zoomed_out' and self.position is not None:
      a, b = self.position
      for s in sides:
        if not isinstance(s, int):
          continue
        if min(a, b) < 0 or max(a, b) + s > self.image_side:
          p.append(f'square of side {s} at (a={a}, b={b}) leaves the {self.image_side} canvas')
      if aligned and (a % self.patch_size or b % self.patch_size):
        p.append(f'position (a={a}, b={b}) is not aligned to the token size {self.patch_size}')
    return p

  def problems(self) -> typing.List[str]:
    """Every validation problem with this spec; empty when valid."""
    p = []
    if self.task not in TASKS:
      p.append(f'unknown task {self.task!r}; expected one of {", ".join(TASKS)}')
    if self.patch_size < 1 or self.image_side < 1 or self.image_side % self.patch_size:
      p.append(f'image_side {self.image_side} must be a positive multiple of patch_size '
               f'{self.patch_size}')
    if not 0.0 <= self.mask_ratio < 1.0:
      p.append(f'mask_ratio must be in [0, 1), got {self.mask_ratio}')
    if self.mask_mode not in MASK_MODES:
      p.append(f'mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}')
    if self.location not in ZOOM_LOCATIONS:
      p.append(f'location must be one of {ZOOM_LOCATIONS}, got {self.location!r}')
    if self.pad_mode not in PAD_MODES:
      p.append(f'pad_mode must be one of {PAD_MODES}, got {self.pad_mode!r}')
    if self.uses_zoom_side:
      p.extend(self._zoom_problems())
    lo, hi = self.twist
    if not 0.0 <= lo <= hi < 1.0:
      p.append(f'twist interval must satisfy 0 <= lo <= hi < 1, got {self.twist}')
    ks = self.kernel_choices if self.kernel_size == RAND else (self.kernel_size,)
    for k in ks:
      if not isinstance(k, int) or k < 1 or k % 2 == 0:
        p.append(f'kernel size must be an odd integer >= 1, got {k!r}')
    if self.kernel_mode not in KERNEL_MODES:
      p.append(f'kernel_mode must be one of {KERNEL_MODES}, got {self.kernel_mode!r}')
    if not 0.0 <= self.saturation <= 1.0:
      p.append(f'saturation must be in [0, 1], got {self.saturation}')
    if self.wave_amplitude < 0 or self.wave_period <= 0:
      p.append(f'wave needs amplitude >= 0 and period > 0, got {self.wave_amplitude}, '
               f'{self.wave_period}')
    if self.task == 'integrated':
      if self.aux_side < self.image_side or (self.aux_side - self.image_side) % 2:
        p.append(f'aux_side {self.aux_side} must be >= image_side {self.image_side} with an even '
                 'difference')
    return p

  def validate(self) -> 'DegradationSpec':
    problems = self.problems()
    if problems:
      raise DegradationParamError(problems)
    return self


@attr.s(auto_attribs=True, frozen=True)
class FactorTags:
  """Which factors a degradation involves.

  Attributes
  ----------
  im : bool
      Information missing.
  st : bool
      Spatial transformation.
  sc : bool
      Style change.
  derived : bool
      True for variant tasks whose tags are inferred rather than tabulated.
  """

  im : bool
  st : bool
  sc : bool
  derived : bool = False

  def render(self) -> str:
    yn = lambda flag: 'Y' if flag else 'N'
    return f'IM={yn(self.im)} ST={yn(self.st)} SC={yn(self.sc)}'


_FACTOR_TABLE = {
  'masked': FactorTags(True, False, False),
  'zoomed_in': FactorTags(True, True, False),
  'zoomed_out': FactorTags(False, True, False),
  'distorted': FactorTags(False, True, True),
  'blurred': FactorTags(False, False, True),
  'decolorized': FactorTags(False, False, True),
  'integrated': FactorTags(True, True, False),
  # Patches move but none is lost or restyled.
  'shuffled': FactorTags(False, True, False, derived=True),
  # Like the fisheye, minus the pixels it pushes off the canvas.
  'wave_distorted': FactorTags(False, True, True, derived=True),
}


# Factor columns of the study's classification table, one row per canonical task.
FACTOR_TABLE_REFERENCE = '\n'.join([
  '(m) masked: IM=Y ST=N SC=N',
  '(a) zoomed_in: IM=Y ST=Y SC=N',
  '(b) zoomed_out: IM=N ST=Y SC=N',
  '(c) distorted: IM=N ST=Y SC=Y',
  '(d) blurred: IM=N ST=N SC=Y',
  '(e) decolorized: IM=N ST=N SC=Y',
]) + '\n'


def factor_tags(spec : typing.Union[DegradationSpec, str]) -> FactorTags:
  task = spec.task if isinstance(spec, DegradationSpec) else spec
  if task not in _FACTOR_TABLE:
    raise DegradationParamError(f'unknown task {task!r}')
  return _FACTOR_TABLE[task]


def render_factor_row(task : str) -> str:
  return f'{TASK_LABELS[task]} {task}: {factor_tags(task).render()}'


def render_factor_table(tasks : typing.Iterable[str] = CANONICAL_TASKS) -> str:
  return ''.join(render_factor_row(t) + '\n' for t in tasks)


@attr.s(auto_attribs=True)
class DegradedSample:
  """A training pair.

  Attributes
  ----------
  input : np.ndarray
      Degraded image. (3, side, side), except zoomed_out with pad_mode=none, where it is the bare
      (3, S, S) raster.
  target : np.ndarray
      Original image on the model canvas.
  visible_mask : np.ndarray
      (M,) bool, True where the token reaches the encoder.
  aux : Optional[np.ndarray]
      integrated only: the larger canvas whose center is `target`.
  masked_only : bool
      Whether the recovery loss is restricted to the hidden tokens.
  permutation : Optional[np.ndarray]
      shuffled only: input patch i is target patch permutation[i].
  info : Dict[str, Any]
      Realized random parameters (scale, position, twist, center, kernel, ...).
  """

  input : np.ndarray
  target : np.ndarray
  visible_mask : np.ndarray
  aux : typing.Optional[np.ndarray] = None
  masked_only : bool = False
  permutation : typing.Optional[np.ndarray] = None
  info : typing.Dict[str, typing.Any] = attr.Factory(dict)

  def canvas_input(self) -> np.ndarray:
    """The input placed on the target canvas (a bare raster goes top-left, zero elsewhere)."""
    if self.input.shape == self.target.shape:
      return self.input
    canvas = np.zeros_like(self.target)
    _, h, w = self.input.shape
    canvas[:, :h, :w] = self.input
    return canvas


def masked_count(num_tokens : int, ratio : float) -> int:
  """floor(ratio * M), tolerant of ratios that are not exact in binary (0.29 * 100)."""
  return int(math.floor(ratio * num_tokens + 1e-9))


def make_sample(spec : DegradationSpec, img : np.ndarray, rng : Rng,
                others : typing.Optional[typing.Sequence[np.ndarray]] = None) -> DegradedSample:
  """Degrade `img` according to `spec`.

  Params
  ------
  spec : DegradationSpec
      Validated task configuration.
  img : np.ndarray
      (3, side, side) clean image; integrated also accepts larger sources.
  rng : Rng
      Stream for every random choice of this sample.
  others : Optional[Sequence[np.ndarray]]
      Candidate images for zoomed_out with pad_mode=other_image (the rest of the batch).
  """
  spec.validate()
  side = spec.image_side
  if spec.task != 'integrated' and tuple(img.shape) != (3, side, side):
    raise GeometryError(f'{spec.task} expects a (3, {side}, {side}) image, got {img.shape}')
  return _DISPATCH[spec.task](spec, img, rng, others)


def _masked(spec, img, rng, others):
  visible = _mask_for(spec, rng)
  return DegradedSample(img.copy(), img.copy(), visible, masked_only=True)


def _mask_for(spec, rng):
  if spec.mask_mode == 'random':
    return ops.mask_random(spec.num_tokens, spec.mask_ratio, rng.derive('mask'))
  if spec.mask_mode == 'block':
    return ops.mask_block(spec.num_tokens, spec.grid, spec.mask_ratio, rng.derive('mask'))
  return ops.mask_center(spec.grid, spec.zoom_side // spec.patch_size)


def _zoomed_in(spec, img, rng, others):
  return ops.zoom_in(img, spec.zoom_side, spec.patch_size, spec.location, rng.derive('zoom_in'))


def _zoomed_out(spec, img, rng, others):
  gen = rng.derive('zoom_out').generator()
  side = img.shape[1]
  s = spec.zoom_side if spec.zoom_side != RAND else int(gen.choice(spec.zoom_choices))
  if spec.position is not None:
    a, b = spec.position
  else:
    step = spec.patch_size if spec.aligned else 1
    slots = (side - s) // step + 1
    a, b = (int(v) * step for v in gen.integers(0, slots, size=2))
  other = None
  if spec.pad_mode == 'other_image':
    if not others:
      raise DegradationParamError('pad_mode=other_image needs at least one other image')
    other = others[int(gen.integers(0, len(others)))]
  return ops.zoom_out(img, s, a, b, spec.pad_mode, spec.patch_size, other=other,
                      aligned=spec.aligned)


def _distorted(spec, img, rng, others):
  gen = rng.derive('fisheye').generator()
  _, h, w = img.shape
  lo, hi = spec.twist
  twist = float(gen.uniform(lo, hi)) if hi > lo else float(lo)
  center = (float(gen.uniform(0, w)), float(gen.uniform(0, h)))
  return ops.fisheye(img, center, twist, spec.patch_size)


def _blurred(spec, img, rng, others):
  blur_rng = rng.derive('blur')
  k = spec.kernel_size
  if k == RAND:
    k = int(blur_rng.derive('size').generator().choice(spec.kernel_choices))
  return ops.blur(img, k, blur_rng, spec.kernel_mode, spec.patch_size)


def _decolorized(spec, img, rng, others):
  return ops.desaturate(img, spec.saturation, spec.patch_size)


def _shuffled(spec, img, rng, others):
  return ops.shuffle_patches(img, spec.patch_size, rng.derive('shuffle'))


def _wave_distorted(spec, img, rng, others):
  return ops.wave_distort(img, spec.wave_amplitude, spec.wave_period, spec.patch_size)


def _integrated(spec, img, rng, others):
  return ops.integrated(img, spec.image_side, spec.aux_side, spec.patch_size, spec.mask_ratio,
                        rng.derive('integrated'))


_DISPATCH = {
  'masked': _masked,
  'zoomed_in': _zoomed_in,
  'zoomed_out': _zoomed_out,
  'distorted': _distorted,
  'blurred': _blurred,
  'decolorized': _decolorized,
  'shuffled': _shuffled,
  'wave_distorted': _wave_distorted,
  'integrated': _integrated,
}


from . import ops  # noqa: E402  (ops builds DegradedSample values defined above)
