"""Image <-> patch-token conversion, per-patch target normalization and position embeddings.

An image is a float array of shape (3, H, W) with values in [0, 1]. A patch holds the P x P x 3
block at rows rP..rP+P-1, cols cP..cP+P-1, flattened channel-major, then row-major, then column
(i.e. the C-order flattening of the (3, P, P) block). Patches are numbered row by row over the
(H/P, W/P) grid. Checkpoints depend on this order.
"""

import functools
import typing

import attr
import numpy as np

from pretext_eval.engine import Tensor
from pretext_eval.engine import ops
from pretext_eval.util import GeometryError


Image = np.ndarray


def check_image(img : np.ndarray, patch_size : typing.Optional[int] = None) -> np.ndarray:
  """Validate an image array, returning it unchanged."""
  if img.ndim != 3 or img.shape[0] != 3:
    raise GeometryError(f'expected an image of shape (3, H, W), got {img.shape}')
  if patch_size is not None and (img.shape[1] % patch_size or img.shape[2] % patch_size):
    raise GeometryError(f'image of {img.shape[1]}x{img.shape[2]} pixels is not divisible into '
                        f'{patch_size}x{patch_size} patches')
  return img


@attr.s(auto_attribs=True)
class PatchSequence:
  """Patches of one image.

  Attributes
  ----------
  data : np.ndarray
      (M, 3 * P * P) patch values.
  patch_size : int
      P, the patch side in pixels.
  grid : Tuple[int, int]
      (rows, cols) with rows * cols == M.
  """

  data : np.ndarray
  patch_size : int
  grid : typing.Tuple[int, int]

  @property
  def num_tokens(self) -> int:
    return self.data.shape[0]


@attr.s(auto_attribs=True)
class TargetStats:
  """Per-patch statistics used to undo target normalization.

  Attributes
  ----------
  mean : np.ndarray
      (..., M, 1) patch means.
  std : np.ndarray
      (..., M, 1) patch standard deviations (population, without eps).
  eps : float
      The eps normalization used.
  """

  mean : np.ndarray
  std : np.ndarray
  eps : float

  @property
  def scale(self) -> np.ndarray:
    return np.sqrt(self.std * self.std + self.eps)


def grid_for(height : int, width : int, patch_size : int) -> typing.Tuple[int, int]:
  if height % patch_size or width % patch_size:
    raise GeometryError(f'{height}x{width} is not divisible by patch size {patch_size}')
  return height // patch_size, width // patch_size


def patchify_array(imgs : np.ndarray, patch_size : int) -> np.ndarray:
  """(..., 3, H, W) -> (..., M, 3 * P * P)."""
  *lead, c, h, w = imgs.shape
  rows, cols = grid_for(h, w, patch_size)
  p = patch_size
  x = imgs.reshape(*lead, c, rows, p, cols, p)
  n = len(lead)
  x = np.moveaxis(x, [n + 1, n + 3], [n, n + 1])
  return x.reshape(*lead, rows * cols, c * p * p)


def unpatchify_array(patches : np.ndarray, patch_size : int,
                     grid : typing.Tuple[int, int]) -> np.ndarray:
  """(..., M, 3 * P * P) -> (..., 3, rows * P, cols * P)."""
  *lead, m, k = patches.shape
  rows, cols = grid
  p = patch_size
  if m != rows * cols or k != 3 * p * p:
    raise GeometryError(f'{m} patches of {k} values do not fit a {rows}x{cols} grid of '
                        f'{p}x{p} RGB patches')
  x = patches.reshape(*lead, rows, cols, 3, p, p)
  n = len(lead)
  x = np.moveaxis(x, [n, n + 1], [n + 1, n + 3])
  return x.reshape(*lead, 3, rows * p, cols * p)


def patchify(img : Image, patch_size : int) -> PatchSequence:
  check_image(img)
  grid = grid_for(img.shape[1], img.shape[2], patch_size)
  return PatchSequence(patchify_array(img, patch_size), patch_size, grid)


def unpatchify(seq : PatchSequence) -> Image:
  if seq.data.ndim != 2:
    raise GeometryError(f'patch data must be (M, 3P^2), got {seq.data.shape}')
  return unpatchify_array(seq.data, seq.patch_size, seq.grid)


def unpatchify_tensor(patches : Tensor, patch_size : int, grid : typing.Tuple[int, int]) -> Tensor:
  """Differentiable (B, M, 3P^2) -> (B, 3, H, W)."""
  b, m, k = patches.shape
  rows, cols = grid
  p = patch_size
  if m != rows * cols or k != 3 * p * p:
    raise GeometryError(f'{m} patches of {k} values do not fit a {rows}x{cols} grid')
  x = ops.reshape(patches, (b, rows, cols, 3, p, p))
  x = ops.permute(x, (0, 3, 1, 4, 2, 5))
  return ops.reshape(x, (b, 3, rows * p, cols * p))


def normalize_array(patches : np.ndarray, eps : float = 1e-6) -> typing.Tuple[np.ndarray, TargetStats]:
  """Standardize the last axis of (..., M, K) patches: (x - mean) / sqrt(var + eps)."""
  x = np.asarray(patches, dtype=np.float64)
  mean = x.mean(axis=-1, keepdims=True)
  var = x.var(axis=-1, keepdims=True)
  out = (x - mean) / np.sqrt(var + eps)
  return out.astype(patches.dtype), TargetStats(mean, np.sqrt(var), eps)


def denormalize_array(patches : np.ndarray, stats : TargetStats) -> np.ndarray:
  x = np.asarray(patches, dtype=np.float64)
  return (x * stats.scale + stats.mean).astype(patches.dtype)


def normalize_targets(seq : PatchSequence,
                      eps : float = 1e-6) -> typing.Tuple[PatchSequence, TargetStats]:
  data, stats = normalize_array(seq.data, eps)
  return PatchSequence(data, seq.patch_size, seq.grid), stats


def denormalize_targets(seq : PatchSequence, stats : TargetStats) -> PatchSequence:
  return PatchSequence(denormalize_array(seq.data, stats), seq.patch_size, seq.grid)


@functools.lru_cache(maxsize=32)
def _sincos_table(rows : int, cols : int, dim : int) -> np.ndarray:
  quarter = dim // 4
  omega = 1.0 / 10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter)
  r, c = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64),
                     indexing='ij')
  def _encode(pos):
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)
  table = np.concatenate([_encode(r), _encode(c)], axis=1)
  table.setflags(write=False)
  return table


def sincos_pos_embed_array(grid : typing.Tuple[int, int], dim : int) -> np.ndarray:
  if dim % 4:
    raise GeometryError(f'sin-cos position embeddings need dim divisible by 4, got {dim}')
  return _sincos_table(int(grid[0]), int(grid[1]), int(dim))


def sincos_pos_embed(grid : typing.Tuple[int, int], dim : int) -> Tensor:
  """Fixed 2-D sine-cosine position embeddings, shape (rows * cols, dim).

  The first dim/2 channels encode the row index, the last dim/2 the column index; each half is
  [sin(pos * w_i), cos(pos * w_i)] with w_i = 10000^(-i / (dim/4)).
  """
  return Tensor(sincos_pos_embed_array(grid, dim))
