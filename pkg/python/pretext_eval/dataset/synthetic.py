"""Procedural 10-class image set for desk-scale runs.

Each class is a shape family (disk, square, stripes, ...). Colors, position, size and background
shading vary per sample, so the label is carried by shape alone.
"""

import typing

import numpy as np

from pretext_eval.degrade.rng import Rng
from . import DatasetGenerator, DatasetSample


CLASS_NAMES = ('disk', 'square', 'h_stripes', 'v_stripes', 'checker', 'ring', 'cross',
               'triangle', 'diagonal', 'two_dots')


def _shape_mask(label : int, yy : np.ndarray, xx : np.ndarray, cy : float, cx : float,
                size : float, period : float) -> np.ndarray:
  dy, dx = yy - cy, xx - cx
  r = np.sqrt(dy * dy + dx * dx)
  inside = (np.abs(dy) <= size) & (np.abs(dx) <= size)
  name = CLASS_NAMES[label]
  if name == 'disk':
    return r <= size
  if name == 'square':
    return inside
  if name == 'h_stripes':
    return inside & (np.floor(dy / period) % 2 == 0)
  if name == 'v_stripes':
    return inside & (np.floor(dx / period) % 2 == 0)
  if name == 'checker':
    return inside & ((np.floor(dy / period) + np.floor(dx / period)) % 2 == 0)
  if name == 'ring':
    return (r <= size) & (r >= 0.55 * size)
  if name == 'cross':
    bar = 0.3 * size
    return inside & ((np.abs(dy) <= bar) | (np.abs(dx) <= bar))
  if name == 'triangle':
    return (dy <= size) & (dy >= -size) & (np.abs(dx) <= (dy + size) / 2.0)
  if name == 'diagonal':
    return inside & (np.floor((dy + dx) / (1.4 * period)) % 2 == 0)
  # two_dots
  off = 0.55 * size
  small = 0.4 * size
  return (np.hypot(dy, dx - off) <= small) | (np.hypot(dy, dx + off) <= small)


def render(label : int, side : int, rng : Rng) -> np.ndarray:
  """Draw one (3, side, side) float32 image of class `label`."""
  gen = rng.generator()
  yy, xx = np.meshgrid(np.arange(side) + 0.5, np.arange(side) + 0.5, indexing='ij')
  size = gen.uniform(0.22, 0.38) * side
  margin = size * 0.6
  cy, cx = gen.uniform(margin, side - margin, size=2)
  period = max(2.0, gen.uniform(0.12, 0.2) * side)
  fg = gen.uniform(0.0, 1.0, size=3)
  bg = gen.uniform(0.0, 1.0, size=3)
  # keep the shape readable against the background
  while np.abs(fg - bg).sum() < 0.6:
    bg = gen.uniform(0.0, 1.0, size=3)
  direction = gen.normal(size=2)
  direction /= np.linalg.norm(direction) + 1e-12
  shade = 0.15 * ((yy * direction[0] + xx * direction[1]) / side - 0.5)
  mask = _shape_mask(label, yy, xx, cy, cx, size, period)
  img = np.where(mask[None], fg[:, None, None], bg[:, None, None] + shade[None])
  img = img + gen.normal(0.0, 0.02, size=img.shape)
  return np.clip(img, 0.0, 1.0).astype(np.float32)


class SyntheticShapesGenerator(DatasetGenerator):
  """Config keys: image_side (32), seed (0), num_classes (10, at most 10)."""

  def class_names(self) -> typing.Tuple[str, ...]:
    return CLASS_NAMES[:int(self.config.get('num_classes', len(CLASS_NAMES)))]

  def generate(self, num_samples : int) -> typing.List[DatasetSample]:
    side = int(self.config.get('image_side', 32))
    rng = Rng(int(self.config.get('seed', 0))).derive('synthetic')
    num_classes = len(self.class_names())
    samples = []
    for i in range(num_samples):
      label = i % num_classes
      samples.append(DatasetSample(render(label, side, rng.derive('sample', i)), label))
    return samples
