"""P6 PPM and PNG image files.

Bytes map to floats by v / 255 (so 255 is exactly 1.0); floats are written as round(255 v) after
clipping to [0, 1].
"""

import logging
import os
import typing

import numpy as np
import PIL.Image

from pretext_eval.util import DatasetFormatError, atomic_write
from . import Dataset, DatasetSample


_LOG = logging.getLogger(__name__)

IMAGE_EXTENSIONS = ('.ppm', '.png')
_FORMATS = {'.ppm': 'PPM', '.png': 'PNG'}


def _check_ppm_header(path : str, head : bytes):
  if not head.startswith(b'P6'):
    raise DatasetFormatError(f'{path}: not a binary (P6) PPM file')


def load_image(path : str) -> np.ndarray:
  """Read a PPM or PNG file as a (3, H, W) float32 array."""
  ext = os.path.splitext(path)[1].lower()
  if ext not in _FORMATS:
    raise DatasetFormatError(f'{path}: unsupported image extension {ext!r}')
  try:
    with open(path, 'rb') as f:
      if ext == '.ppm':
        _check_ppm_header(path, f.read(2))
        f.seek(0)
      with PIL.Image.open(f) as img:
        img.load()
        rgb = np.asarray(img.convert('RGB'), dtype=np.uint8)
  except (OSError, SyntaxError, ValueError) as err:
    raise DatasetFormatError(f'{path}: unreadable image: {err}') from err
  return to_float(rgb)


def to_float(rgb : np.ndarray) -> np.ndarray:
  """(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1]."""
  return (np.moveaxis(rgb, -1, 0).astype(np.float32) / np.float32(255.0))


def to_bytes(img : np.ndarray) -> np.ndarray:
  """(3, H, W) float -> (H, W, 3) uint8."""
  clipped = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
  return np.ascontiguousarray(np.moveaxis(np.round(clipped * 255.0).astype(np.uint8), 0, -1))


def save_image(path : str, img : np.ndarray):
  """Write a (3, H, W) image; the format follows the extension (.ppm writes P6)."""
  ext = os.path.splitext(path)[1].lower()
  if ext not in _FORMATS:
    raise DatasetFormatError(f'{path}: unsupported image extension {ext!r}')
  pil = PIL.Image.fromarray(to_bytes(img))
  with atomic_write(path, 'wb') as f:
    pil.save(f, format=_FORMATS[ext])


def _image_files(directory : str) -> typing.List[str]:
  return sorted(n for n in os.listdir(directory)
                if os.path.splitext(n)[1].lower() in IMAGE_EXTENSIONS
                and os.path.isfile(os.path.join(directory, n)))


def read_image_tree(root : str) -> Dataset:
  """Read `root`/<class>/<image> (labels by sorted class name), or `root`/<image> as one class."""
  classes = sorted(n for n in os.listdir(root) if os.path.isdir(os.path.join(root, n)))
  if classes:
    listing = [(label, os.path.join(root, name, f))
               for label, name in enumerate(classes)
               for f in _image_files(os.path.join(root, name))]
  else:
    classes = [os.path.basename(os.path.normpath(root))]
    listing = [(0, os.path.join(root, f)) for f in _image_files(root)]
  if not listing:
    raise DatasetFormatError(f'{root}: no .ppm or .png images found')

  samples = []
  shape = None
  for label, path in listing:
    img = load_image(path)
    if shape is None:
      shape = img.shape
    elif img.shape != shape:
      raise DatasetFormatError(f'{path}: image is {img.shape[2]}x{img.shape[1]}, expected '
                               f'{shape[2]}x{shape[1]} like the rest of the dataset')
    samples.append(DatasetSample(img, label))
  _LOG.info('read %d images in %d classes from %s', len(samples), len(classes), root)
  return Dataset.from_samples(samples, classes, source=root)


def list_images(directory : str) -> typing.List[str]:
  """Image paths directly under `directory`, sorted."""
  return [os.path.join(directory, n) for n in _image_files(directory)]
