"""Packed binary dataset files.

Layout (integers little-endian):

    magic        4 bytes  b'VTDS'
    count        uint32   number of records
    height       uint32
    width        uint32
    label_width  uint32   bytes per label: 1, 2 or 4
    num_classes  uint32   class count; every label is below it
    records      count x (label as unsigned label_width-byte int, then H x W x 3 RGB bytes,
                 row-major with interleaved channels)
"""

import logging
import struct
import typing

import numpy as np

from pretext_eval.util import DatasetFormatError, atomic_write
from . import Dataset
from .image_io import to_bytes, to_float


_LOG = logging.getLogger(__name__)

MAGIC = b'VTDS'
_HEADER = struct.Struct('<4sIIIII')
LABEL_WIDTHS = (1, 2, 4)


def _record_dtype(height : int, width : int, label_width : int) -> np.dtype:
  return np.dtype([('label', f'<u{label_width}'), ('pixels', np.uint8, (height, width, 3))])


def read_packed(path : str, class_names : typing.Optional[typing.Sequence[str]] = None) -> Dataset:
  with open(path, 'rb') as f:
    raw = f.read()
  if len(raw) < _HEADER.size:
    raise DatasetFormatError(f'{path}: file is too short for a packed dataset header')
  magic, count, height, width, label_width, num_classes = _HEADER.unpack_from(raw)
  if magic != MAGIC:
    raise DatasetFormatError(f'{path}: bad magic {magic!r}, expected {MAGIC!r}')
  if label_width not in LABEL_WIDTHS:
    raise DatasetFormatError(f'{path}: label width {label_width} not in {LABEL_WIDTHS}')
  if height < 1 or width < 1:
    raise DatasetFormatError(f'{path}: bad image size {height}x{width}')
  dtype = _record_dtype(height, width, label_width)
  payload = len(raw) - _HEADER.size
  if payload != count * dtype.itemsize:
    raise DatasetFormatError(f'{path}: header declares {count} records of {dtype.itemsize} bytes '
                             f'but the payload holds {payload} bytes')
  records = np.frombuffer(raw, dtype=dtype, count=count, offset=_HEADER.size)
  labels = records['label'].astype(np.int64)
  if count and labels.max() >= num_classes:
    raise DatasetFormatError(f'{path}: label {labels.max()} is out of range for '
                             f'{num_classes} classes')
  images = np.stack([to_float(p) for p in records['pixels']]) if count else \
      np.zeros((0, 3, height, width), dtype=np.float32)
  if class_names is None:
    class_names = [str(i) for i in range(num_classes)]
  elif len(class_names) != num_classes:
    raise DatasetFormatError(f'{path}: {len(class_names)} class names given for {num_classes} '
                             'classes')
  _LOG.info('read %d packed %dx%d images from %s', count, width, height, path)
  return Dataset(images, labels, tuple(class_names), source=path)


def write_packed(path : str, dataset : Dataset, label_width : int = 1):
  if label_width not in LABEL_WIDTHS:
    raise DatasetFormatError(f'label width {label_width} not in {LABEL_WIDTHS}')
  _, height, width = dataset.image_shape
  if len(dataset) and dataset.labels.max() >= 1 << (8 * label_width):
    raise DatasetFormatError(f'labels up to {dataset.labels.max()} do not fit {label_width} '
                             'byte(s)')
  if len(dataset) and dataset.labels.max() >= dataset.num_classes:
    raise DatasetFormatError(f'label {dataset.labels.max()} is out of range for '
                             f'{dataset.num_classes} classes')
  records = np.zeros(len(dataset), dtype=_record_dtype(height, width, label_width))
  records['label'] = dataset.labels
  for i, img in enumerate(dataset.images):
    records['pixels'][i] = to_bytes(img)
  with atomic_write(path, 'wb') as f:
    f.write(_HEADER.pack(MAGIC, len(dataset), height, width, label_width, dataset.num_classes))
    f.write(records.tobytes())
