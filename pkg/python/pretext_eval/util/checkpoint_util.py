"""Reads and writes "VTPT" checkpoint containers.

Layout (all integers little-endian):

    magic     4 bytes   b'VTPT'
    version   uint32
    length    uint64    byte length of the manifest
    manifest  UTF-8 JSON text: {"config": {...}, "meta": {...},
                                "tensors": [{"name", "shape", "offset", "nbytes"}, ...]}
    payload   raw little-endian float32 blobs in manifest order; offsets are relative to the
              payload start and tile it exactly.
"""

import json
import logging
import struct
import typing

import attr
import numpy as np

from . import CheckpointFormatError, atomic_write


_LOG = logging.getLogger(__name__)

MAGIC = b'VTPT'
FORMAT_VERSION = 1
_HEADER = struct.Struct('<4sIQ')
_DTYPE = np.dtype('<f4')


@attr.s(auto_attribs=True)
class Checkpoint:
  """Contents of a checkpoint file.

  Attributes
  ----------
  config : Dict[str, Any]
      The resolved run config that produced it.
  tensors : Dict[str, np.ndarray]
      float32 arrays keyed by name (model parameters, optimizer moments).
  meta : Dict[str, Any]
      JSON-serializable bookkeeping: phase, epoch, optimizer step, task.
  """

  config : typing.Dict[str, typing.Any]
  tensors : typing.Dict[str, np.ndarray]
  meta : typing.Dict[str, typing.Any] = attr.Factory(dict)

  def subset(self, prefix : str, strip : bool = True) -> typing.Dict[str, np.ndarray]:
    return {(k[len(prefix):] if strip else k): v for k, v in self.tensors.items()
            if k.startswith(prefix)}


def save(path : str, ckpt : Checkpoint):
  """Write `ckpt` to `path` atomically."""
  entries = []
  blobs = []
  offset = 0
  for name in sorted(ckpt.tensors):
    arr = np.ascontiguousarray(ckpt.tensors[name], dtype=_DTYPE)
    blob = arr.tobytes()
    entries.append({'name': name, 'shape': list(arr.shape), 'offset': offset,
                    'nbytes': len(blob)})
    blobs.append(blob)
    offset += len(blob)
  manifest = json.dumps({'config': ckpt.config, 'meta': ckpt.meta, 'tensors': entries},
                        indent=1, sort_keys=True).encode('utf-8')
  with atomic_write(path, 'wb') as f:
    f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest)))
    f.write(manifest)
    for blob in blobs:
      f.write(blob)
  _LOG.debug('wrote checkpoint %s: %d tensors, %d payload bytes', path, len(entries), offset)


def _check_tiling(path : str, entries : typing.List[dict], payload_len : int):
  end = 0
  for entry in sorted(entries, key=lambda e: e['offset']):
    expected = int(np.prod(entry['shape'], dtype=np.int64)) * _DTYPE.itemsize
    if entry['nbytes'] != expected:
      raise CheckpointFormatError(f'{path}: tensor {entry["name"]} declares {entry["nbytes"]} '
                                  f'bytes for shape {entry["shape"]}')
    if entry['offset'] != end:
      raise CheckpointFormatError(f'{path}: tensor {entry["name"]} at offset {entry["offset"]} '
                                  f'overlaps or leaves a gap (expected {end})')
    end += entry['nbytes']
  if end != payload_len:
    raise CheckpointFormatError(f'{path}: manifest covers {end} payload bytes, file has '
                                f'{payload_len}')


def load(path : str) -> Checkpoint:
  """Read a checkpoint, validating magic, version and manifest tiling.

  Raises
  ------
  CheckpointFormatError :
      On a foreign file, a version mismatch, or an inconsistent manifest.
  """
  with open(path, 'rb') as f:
    raw = f.read()
  if len(raw) < _HEADER.size:
    raise CheckpointFormatError(f'{path}: file is too short to be a checkpoint')
  magic, version, length = _HEADER.unpack_from(raw)
  if magic != MAGIC:
    raise CheckpointFormatError(f'{path}: not a checkpoint (magic {magic!r}, expected {MAGIC!r})')
  if version != FORMAT_VERSION:
    raise CheckpointFormatError(f'{path}: checkpoint format version {version} is not supported '
                                f'by this build (expected {FORMAT_VERSION})')
  start = _HEADER.size + length
  if start > len(raw):
    raise CheckpointFormatError(f'{path}: manifest runs past the end of the file')
  try:
    manifest = json.loads(raw[_HEADER.size:start].decode('utf-8'))
    entries = list(manifest['tensors'])
    config = dict(manifest['config'])
    meta = dict(manifest.get('meta', {}))
  except (ValueError, KeyError, TypeError) as err:
    raise CheckpointFormatError(f'{path}: unreadable manifest: {err}') from err

  payload = memoryview(raw)[start:]
  _check_tiling(path, entries, len(payload))
  tensors = {}
  for entry in entries:
    blob = payload[entry['offset']:entry['offset'] + entry['nbytes']]
    tensors[entry['name']] = np.frombuffer(blob, dtype=_DTYPE).astype(np.float32).reshape(
      entry['shape'])
  return Checkpoint(config=config, tensors=tensors, meta=meta)
