"""Degradation operators.

Images are float arrays of shape (3, H, W) in [0, 1]; every operator returns values in [0, 1].
Random choices come from the Rng handed in, never from global state.
"""

import logging
import math
import typing

import matplotlib.colors
import numpy as np
import scipy.ndimage

from pretext_eval.model.patch_ops import check_image, grid_for, patchify_array, unpatchify_array
from pretext_eval.util import DegradationParamError, GeometryError
from . import DegradedSample, masked_count
from .resample import bilinear_sample, resize_bilinear
from .rng import Rng


_LOG = logging.getLogger(__name__)


def _all_visible(num_tokens : int) -> np.ndarray:
  return np.ones(num_tokens, dtype=bool)


def _num_tokens(img : np.ndarray, patch_size : int) -> int:
  rows, cols = grid_for(img.shape[1], img.shape[2], patch_size)
  return rows * cols


def _finish(img : np.ndarray, out : np.ndarray) -> np.ndarray:
  return np.clip(out, 0.0, 1.0).astype(img.dtype)


def _restyled(img : np.ndarray, out : np.ndarray, patch_size : int, **info) -> DegradedSample:
  """A full-canvas sample: every token visible, loss over all tokens."""
  return DegradedSample(_finish(img, out), img.copy(), _all_visible(_num_tokens(img, patch_size)),
                        info=info)


def _check_ratio(ratio : float):
  if not 0.0 <= ratio < 1.0:
    raise DegradationParamError(f'mask ratio must be in [0, 1), got {ratio}')


def mask_random(num_tokens : int, ratio : float, rng : Rng) -> np.ndarray:
  """Hide floor(ratio * M) tokens chosen uniformly without replacement; returns visible flags."""
  _check_ratio(ratio)
  hidden = masked_count(num_tokens, ratio)
  order = rng.generator().permutation(num_tokens)
  visible = _all_visible(num_tokens)
  visible[order[:hidden]] = False
  return visible


def block_shape(grid : typing.Tuple[int, int], ratio : float) -> typing.Tuple[int, int]:
  """(h, w) of the visible rectangle whose area is closest to (1 - ratio) * M.

  Ties go to the squarer rectangle, then to the shorter one.
  """
  rows, cols = grid
  want = (1.0 - ratio) * rows * cols
  candidates = [(h, w) for h in range(1, rows + 1) for w in range(1, cols + 1)]
  return min(candidates, key=lambda hw: (abs(hw[0] * hw[1] - want), abs(hw[0] - hw[1]), hw[0]))


def mask_block(num_tokens : int, grid : typing.Tuple[int, int], ratio : float,
               rng : Rng) -> np.ndarray:
  """Keep one axis-aligned rectangle of tokens visible, placed uniformly at random."""
  _check_ratio(ratio)
  rows, cols = grid
  if rows * cols != num_tokens:
    raise GeometryError(f'grid {rows}x{cols} does not hold {num_tokens} tokens')
  h, w = block_shape(grid, ratio)
  gen = rng.generator()
  top = int(gen.integers(0, rows - h + 1))
  left = int(gen.integers(0, cols - w + 1))
  visible = np.zeros((rows, cols), dtype=bool)
  visible[top:top + h, left:left + w] = True
  return visible.reshape(-1)


def mask_center(grid : typing.Tuple[int, int], block : int) -> np.ndarray:
  """Keep the central block x block tokens visible and hide the rest."""
  rows, cols = grid
  if not 1 <= block <= min(rows, cols):
    raise DegradationParamError(f'visible block of {block} tokens does not fit a '
                                f'{rows}x{cols} grid')
  top, left = (rows - block) // 2, (cols - block) // 2
  visible = np.zeros((rows, cols), dtype=bool)
  visible[top:top + block, left:left + block] = True
  return visible.reshape(-1)


def _square_side(img : np.ndarray) -> int:
  check_image(img)
  _, h, w = img.shape
  if h != w:
    raise GeometryError(f'zoom operators need a square canvas, got {h}x{w}')
  return h


def zoom_in(img : np.ndarray, zoom_side : int, patch_size : int, location : str = 'center',
            rng : typing.Optional[Rng] = None) -> DegradedSample:
  """Crop an S x S region and scale it back up to the full canvas with bilinear interpolation.

  Params
  ------
  img : np.ndarray
      (3, side, side) source.
  zoom_side : int
      S, a multiple of `patch_size` no larger than the canvas.
  location : str
      center, or random (token-aligned top-left corner drawn from `rng`).
  """
  side = _square_side(img)
  if zoom_side < 1 or zoom_side > side or zoom_side % patch_size:
    raise DegradationParamError(f'zoom side {zoom_side} must be a multiple of {patch_size} '
                                f'in [1, {side}]')
  if location == 'center':
    top = left = (side - zoom_side) / 2.0
  elif location == 'random':
    if rng is None:
      raise DegradationParamError('random zoom-in location needs an Rng')
    slots = (side - zoom_side) // patch_size + 1
    top, left = (float(v * patch_size) for v in rng.generator().integers(0, slots, size=2))
  else:
    raise DegradationParamError(f'unknown zoom-in location {location!r}')

  # Output pixel i center maps into the crop at the same relative offset.
  step = zoom_side / side
  centers = (np.arange(side) + 0.5) * step - 0.5
  rr, cc = np.meshgrid(top + centers, left + centers, indexing='ij')
  out = _finish(img, bilinear_sample(img, rr, cc))
  info = {'zoom_side': zoom_side, 'top': top, 'left': left}
  return DegradedSample(out, img.copy(), _all_visible((side // patch_size) ** 2), info=info)


def zoom_out(img : np.ndarray, zoom_side : int, a : int, b : int, pad_mode : str,
             patch_size : int, other : typing.Optional[np.ndarray] = None,
             aligned : bool = True) -> DegradedSample:
  """Shrink the image to S x S, place it with its top-left corner at column a, row b, and fill
  the rest of the canvas according to `pad_mode`.

  pad_mode=none returns the bare S x S raster as input; its tokens are the top-left
  (S/P) x (S/P) block of the full grid in visible_mask, and the loss covers every token.
  """
  side = _square_side(img)
  if zoom_side < 1 or zoom_side > side:
    raise DegradationParamError(f'zoom side {zoom_side} must be in [1, {side}]')
  if min(a, b) < 0 or max(a, b) + zoom_side > side:
    raise DegradationParamError(f'square of side {zoom_side} at (a={a}, b={b}) leaves the '
                                f'{side}x{side} canvas')
  if (aligned or pad_mode == 'none') and (zoom_side % patch_size or a % patch_size
                                          or b % patch_size):
    raise DegradationParamError(f'S={zoom_side}, a={a}, b={b} must be multiples of the token '
                                f'size {patch_size}')
  grid = grid_for(side, side, patch_size)
  small = resize_bilinear(img, zoom_side, zoom_side)
  info = {'zoom_side': zoom_side, 'a': a, 'b': b, 'pad_mode': pad_mode}

  if pad_mode == 'none':
    k = zoom_side // patch_size
    visible = np.zeros(grid, dtype=bool)
    visible[:k, :k] = True
    return DegradedSample(small, img.copy(), visible.reshape(-1), masked_only=False, info=info)

  after_rows, after_cols = side - b - zoom_side, side - a - zoom_side
  if pad_mode == 'mirror':
    # 'symmetric' repeats the edge pixel, so column a-1-j mirrors column a+j.
    canvas = np.pad(small, ((0, 0), (b, after_rows), (a, after_cols)), mode='symmetric')
  elif pad_mode == 'black':
    canvas = np.zeros_like(img)
    canvas[:, b:b + zoom_side, a:a + zoom_side] = small
  elif pad_mode == 'other_image':
    if other is None or other.shape != img.shape:
      raise DegradationParamError('pad_mode=other_image needs another image of the '
                                  'same shape')
    canvas = np.array(other, dtype=img.dtype, copy=True)
    canvas[:, b:b + zoom_side, a:a + zoom_side] = small
  else:
    raise DegradationParamError(f'unknown pad mode {pad_mode!r}')
  return DegradedSample(canvas.astype(img.dtype), img.copy(), _all_visible(grid[0] * grid[1]),
                        info=info)


def fisheye_radius(rho : np.ndarray, twist : float) -> np.ndarray:
  """Normalized source radius sampled by an output pixel at normalized radius rho."""
  return rho * (1.0 - twist * (1.0 - rho))


def fisheye(img : np.ndarray, center : typing.Tuple[float, float], twist : float,
            patch_size : int = 16) -> DegradedSample:
  """Barrel distortion around `center` = (cx, cy) in canvas coordinates.

  An output pixel at normalized radius rho = |p - c| / R, where R is the largest distance from
  c to a canvas corner, samples the source at radius fisheye_radius(rho, twist) along the same
  ray, bilinearly. twist = 0 is the identity.
  """
  check_image(img)
  if not 0.0 <= twist < 1.0:
    raise DegradationParamError(f'twist ratio must be in [0, 1), got {twist}')
  _, h, w = img.shape
  cx, cy = center
  if not (0.0 <= cx <= w and 0.0 <= cy <= h):
    raise DegradationParamError(f'fisheye center ({cx}, {cy}) lies outside the {w}x{h} canvas')

  yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing='ij')
  dy, dx = yy - cy, xx - cx
  corners = [(0, 0), (w, 0), (0, h), (w, h)]
  radius = max(math.hypot(x - cx, y - cy) for x, y in corners)
  rho = np.sqrt(dx * dx + dy * dy) / radius if radius > 0 else np.zeros_like(dx)
  factor = 1.0 - twist * (1.0 - rho)
  out = bilinear_sample(img, cy + dy * factor - 0.5, cx + dx * factor - 0.5)
  return _restyled(img, out, patch_size, twist=twist, center=(cx, cy))


def wave_distort(img : np.ndarray, amplitude : float, period : float,
                 patch_size : int = 16) -> DegradedSample:
  """Shift row y horizontally by amplitude * sin(2 pi y / period), wrapping around the edges."""
  check_image(img)
  if amplitude < 0 or period <= 0:
    raise DegradationParamError(f'wave needs amplitude >= 0 and period > 0, got {amplitude}, '
                                f'{period}')
  _, h, w = img.shape
  # Rounding drops sin() round-off so integer shifts stay exact permutations.
  shift = np.round(amplitude * np.sin(2.0 * np.pi * np.arange(h) / period), 9)
  pos = np.arange(w)[None, :] + shift[:, None]
  base = np.floor(pos)
  frac = pos - base
  i0 = base.astype(np.int64) % w
  i1 = (i0 + 1) % w
  rows = np.arange(h)[:, None]
  src = np.asarray(img, dtype=np.float64)
  out = src[:, rows, i0] * (1.0 - frac) + src[:, rows, i1] * frac
  return _restyled(img, out, patch_size, wave_amplitude=amplitude, wave_period=period)


def blur_kernel(size : int, rng : typing.Optional[Rng], mode : str = 'random_normal') -> np.ndarray:
  """A size x size correlation kernel.

  random_normal draws standard normal weights and maps them to |w| / sum |w|; raw_normal keeps
  the raw draws; delta has a single 1 at the center.
  """
  if size < 1 or size % 2 == 0:
    raise DegradationParamError(f'blur kernel size must be odd and >= 1, got {size}')
  if mode == 'delta':
    kernel = np.zeros((size, size))
    kernel[size // 2, size // 2] = 1.0
    return kernel
  if rng is None:
    raise DegradationParamError(f'kernel mode {mode} needs an Rng')
  raw = rng.generator().standard_normal((size, size))
  if mode == 'raw_normal':
    return raw
  if mode != 'random_normal':
    raise DegradationParamError(f'unknown kernel mode {mode!r}')
  weights = np.abs(raw)
  return weights / weights.sum()


def blur(img : np.ndarray, kernel_size : int, rng : typing.Optional[Rng],
         kernel_mode : str = 'random_normal',
         patch_size : int = 16) -> DegradedSample:
  """Correlate every channel with one freshly drawn kernel, reflecting at the borders."""
  check_image(img)
  kernel = blur_kernel(kernel_size, rng, kernel_mode)
  src = np.asarray(img, dtype=np.float64)
  out = np.stack([scipy.ndimage.correlate(ch, kernel, mode='reflect') for ch in src])
  return _restyled(img, out, patch_size, kernel_size=kernel_size, kernel_mode=kernel_mode)


def desaturate(img : np.ndarray, saturation : float,
               patch_size : int = 16) -> DegradedSample:
  """Scale the HSV saturation channel by `saturation`."""
  check_image(img)
  if not 0.0 <= saturation <= 1.0:
    raise DegradationParamError(f'saturation scale must be in [0, 1], got {saturation}')
  rgb = np.clip(np.moveaxis(np.asarray(img, dtype=np.float64), 0, -1), 0.0, 1.0)
  hsv = matplotlib.colors.rgb_to_hsv(rgb)
  hsv[..., 1] *= saturation
  out = np.moveaxis(matplotlib.colors.hsv_to_rgb(hsv), -1, 0)
  return _restyled(img, out, patch_size, saturation=saturation)


def shuffle_patches(img : np.ndarray, patch_size : int, rng : typing.Optional[Rng] = None,
                    permutation : typing.Optional[np.ndarray] = None) -> DegradedSample:
  """Permute the image's patches; input patch i is target patch permutation[i]."""
  check_image(img, patch_size)
  _, h, w = img.shape
  grid = grid_for(h, w, patch_size)
  num_tokens = grid[0] * grid[1]
  if permutation is None:
    if rng is None:
      raise DegradationParamError('shuffle_patches needs an Rng or an explicit permutation')
    permutation = rng.generator().permutation(num_tokens)
  permutation = np.asarray(permutation, dtype=np.int64)
  if sorted(permutation.tolist()) != list(range(num_tokens)):
    raise DegradationParamError(f'not a permutation of {num_tokens} patches')
  patches = patchify_array(img, patch_size)
  shuffled = unpatchify_array(patches[permutation], patch_size, grid)
  return DegradedSample(shuffled, img.copy(), _all_visible(num_tokens), permutation=permutation)


def unshuffle_patches(sample : DegradedSample, patch_size : int) -> np.ndarray:
  """Undo shuffle_patches on `sample.input`."""
  _, h, w = sample.input.shape
  grid = grid_for(h, w, patch_size)
  patches = patchify_array(sample.input, patch_size)
  return unpatchify_array(patches[np.argsort(sample.permutation)], patch_size, grid)


def integrated(img : np.ndarray, image_side : int, aux_side : int, patch_size : int,
               ratio : float, rng : Rng) -> DegradedSample:
  """Zoom in by cropping the center of a larger aux canvas, then mask tokens randomly.

  The aux canvas is a random aux_side crop of `img` (or `img` resized up to aux_side when it is
  smaller). The target is its central image_side block; `aux` keeps the whole canvas so the
  outer band can be supervised.
  """
  check_image(img)
  _, h, w = img.shape
  gen = rng.derive('crop').generator()
  if h >= aux_side and w >= aux_side:
    top = int(gen.integers(0, h - aux_side + 1))
    left = int(gen.integers(0, w - aux_side + 1))
    canvas = np.array(img[:, top:top + aux_side, left:left + aux_side], copy=True)
  else:
    top = left = 0
    canvas = resize_bilinear(img, aux_side, aux_side)
  off = (aux_side - image_side) // 2
  target = np.array(canvas[:, off:off + image_side, off:off + image_side], copy=True)
  rows, cols = grid_for(image_side, image_side, patch_size)
  visible = mask_random(rows * cols, ratio, rng.derive('mask'))
  info = {'aux_side': aux_side, 'crop_top': top, 'crop_left': left}
  return DegradedSample(target.copy(), target, visible, aux=canvas, masked_only=True, info=info)
