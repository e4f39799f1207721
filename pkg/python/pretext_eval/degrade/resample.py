"""Image resampling: bilinear sampling at arbitrary points and exact area (box) weights.

Images are float arrays of shape (3, H, W). Pixel (i, j) covers [i, i+1) x [j, j+1) in continuous
canvas coordinates; its center sits at (i + 0.5, j + 0.5).
"""

import functools

import numpy as np
import scipy.ndimage


def bilinear_sample(img : np.ndarray, rows : np.ndarray, cols : np.ndarray) -> np.ndarray:
  """Sample every channel of `img` at fractional index coordinates (rows, cols).

  Coordinates are in index space (pixel centers at integers). Points outside the raster take the
  nearest edge value. The result has the shape of `rows` with a leading channel axis.
  """
  src = np.asarray(img, dtype=np.float64)
  coords = np.stack([np.asarray(rows, dtype=np.float64), np.asarray(cols, dtype=np.float64)])
  out = np.stack([scipy.ndimage.map_coordinates(ch, coords, order=1, mode='nearest')
                  for ch in src])
  return out


def resize_bilinear(img : np.ndarray, out_h : int, out_w : int) -> np.ndarray:
  """Bilinear resize with half-pixel centers; equal sizes reproduce the input exactly."""
  _, h, w = img.shape
  if (out_h, out_w) == (h, w):
    return np.array(img, copy=True)
  rows = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
  cols = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
  rr, cc = np.meshgrid(rows, cols, indexing='ij')
  return np.clip(bilinear_sample(img, rr, cc), 0.0, 1.0).astype(img.dtype)


@functools.lru_cache(maxsize=64)
def area_matrix(n_in : int, n_out : int) -> np.ndarray:
  """(n_out, n_in) matrix of exact box-overlap weights.

  Destination pixel i covers the source interval [i * n_in / n_out, (i + 1) * n_in / n_out);
  its weight on source pixel j is the overlap length divided by the interval length. Each row
  sums to 1.
  """
  if n_in < 1 or n_out < 1:
    raise ValueError(f'area_matrix needs positive sides, got {n_in} -> {n_out}')
  edges = np.arange(n_out + 1) * (n_in / n_out)
  lo, hi = edges[:-1, None], edges[1:, None]
  j = np.arange(n_in)[None, :]
  overlap = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
  weights = overlap / (n_in / n_out)
  weights.setflags(write=False)
  return weights
