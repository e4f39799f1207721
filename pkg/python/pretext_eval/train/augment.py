"""Training-time augmentation: random resized crop and horizontal flip."""

import math
import typing

import numpy as np

from pretext_eval.degrade.resample import resize_bilinear
from pretext_eval.degrade.rng import Rng


MODES = ('pretrain', 'finetune', 'eval')
SCALE = (0.2, 1.0)
RATIO = (3.0 / 4.0, 4.0 / 3.0)
ATTEMPTS = 10

Box = typing.Tuple[int, int, int, int]


def crop_box(height : int, width : int, gen : np.random.Generator,
             scale : typing.Tuple[float, float] = SCALE,
             ratio : typing.Tuple[float, float] = RATIO) -> Box:
  """(top, left, crop_h, crop_w) of a random crop covering a `scale` fraction of the area with
  aspect ratio in `ratio`. After ATTEMPTS misses, falls back to the largest central crop whose
  aspect ratio lies in `ratio`."""
  area = height * width
  log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
  for _ in range(ATTEMPTS):
    target = area * gen.uniform(scale[0], scale[1])
    aspect = math.exp(gen.uniform(log_ratio[0], log_ratio[1]))
    w = int(round(math.sqrt(target * aspect)))
    h = int(round(math.sqrt(target / aspect)))
    if 0 < w <= width and 0 < h <= height:
      top = int(gen.integers(0, height - h + 1))
      left = int(gen.integers(0, width - w + 1))
      return top, left, h, w
  in_ratio = width / height
  if in_ratio < min(ratio):
    w, h = width, int(round(width / min(ratio)))
  elif in_ratio > max(ratio):
    h, w = height, int(round(height * max(ratio)))
  else:
    h, w = height, width
  return (height - h) // 2, (width - w) // 2, h, w


def center_box(height : int, width : int) -> Box:
  side = min(height, width)
  return (height - side) // 2, (width - side) // 2, side, side


def crop_resize(img : np.ndarray, box : Box, side : int) -> np.ndarray:
  top, left, h, w = box
  crop = img[:, top:top + h, left:left + w]
  return resize_bilinear(crop, side, side)


def augment(img : np.ndarray, rng : typing.Optional[Rng], mode : str,
            side : typing.Optional[int] = None, scale : typing.Tuple[float, float] = SCALE,
            flip : bool = True) -> np.ndarray:
  """Augment one (3, H, W) image to (3, side, side).

  pretrain and finetune draw a random resized crop and flip horizontally with probability 0.5;
  eval takes the central square, so an image already at `side` comes back unchanged; it draws
  nothing and accepts rng=None.
  """
  if mode not in MODES:
    raise ValueError(f'augment mode must be one of {MODES}, got {mode!r}')
  _, height, width = img.shape
  side = side or min(height, width)
  if mode == 'eval':
    return crop_resize(img, center_box(height, width), side)
  box = crop_box(height, width, rng.derive('crop').generator(), scale)
  out = crop_resize(img, box, side)
  if flip and rng.derive('flip').generator().random() < 0.5:
    out = np.ascontiguousarray(out[:, :, ::-1])
  return out
