"""Pre-training losses: plain and masked recovery, and the integrated center + outer-band loss."""

import typing

import attr
import numpy as np

from pretext_eval.degrade.resample import area_matrix
from pretext_eval.engine import Tensor
from pretext_eval.engine import ops
from pretext_eval.util import GeometryError
from .patch_ops import PatchSequence, normalize_array, unpatchify_tensor


@attr.s(auto_attribs=True)
class LossBreakdown:
  """Terms of one loss evaluation.

  Attributes
  ----------
  total : Tensor
      Scalar to back-propagate: center + outer_weight * outer.
  center : Tensor
      Recovery term on the model canvas.
  outer : Optional[Tensor]
      Outer-band term (integrated objective only).
  selected_tokens : int
      Number of tokens the center term averages over.
  outer_weight : float
      Weight of the outer term in total.
  """

  total : Tensor
  center : Tensor
  outer : typing.Optional[Tensor] = None
  selected_tokens : int = 0
  outer_weight : float = 1.0

  @property
  def total_value(self) -> float:
    return self.total.item()

  @property
  def center_term(self) -> float:
    return self.center.item()

  @property
  def outer_term(self) -> float:
    return self.outer.item() if self.outer is not None else 0.0


def _patch_data(x) -> typing.Union[Tensor, np.ndarray]:
  return x.data if isinstance(x, PatchSequence) else x


def recovery_loss(pred : typing.Union[Tensor, PatchSequence],
                  target : typing.Union[np.ndarray, PatchSequence],
                  visible_mask : np.ndarray, normalized : bool = True,
                  masked_only : typing.Optional[bool] = None, eps : float = 1e-6) -> LossBreakdown:
  """MSE between predicted and target patches.

  Params
  ------
  pred : Tensor or PatchSequence
      (..., M, 3P^2) prediction. A PatchSequence is wrapped as a constant Tensor.
  target : np.ndarray or PatchSequence
      Raw-pixel target patches of the same shape.
  visible_mask : np.ndarray
      (..., M) bool, True where the token was visible to the encoder.
  normalized : bool
      Standardize each target patch before comparing.
  masked_only : Optional[bool]
      Average over hidden tokens only. When None, hidden tokens are used whenever any token is
      hidden, and all tokens otherwise.

  Returns
  -------
  LossBreakdown :
      With outer unset; total is center.
  """
  pred = _patch_data(pred)
  if not isinstance(pred, Tensor):
    pred = Tensor(pred)
  target = np.asarray(_patch_data(target))
  if pred.shape != target.shape:
    raise GeometryError(f'prediction {pred.shape} and target {target.shape} differ')
  visible = np.asarray(visible_mask, dtype=bool)
  if visible.shape != pred.shape[:-1]:
    raise GeometryError(f'visible mask {visible.shape} does not match {pred.shape[:-1]} tokens')
  if normalized:
    target, _ = normalize_array(target, eps)
  target = target.astype(pred.dtype)

  hidden = ~visible
  if masked_only is None:
    masked_only = bool(hidden.any())
  if masked_only:
    loss = ops.mse(pred, target, mask=hidden)
    selected = int(hidden.sum())
  else:
    loss = ops.mse(pred, target)
    selected = int(visible.size)
  return LossBreakdown(total=loss, center=loss, selected_tokens=selected)


def area_resize(img : np.ndarray, out_h : int, out_w : typing.Optional[int] = None) -> np.ndarray:
  """Resize the last two axes by exact box averaging (each output pixel is the area-weighted
  mean of the source region it covers)."""
  out_w = out_h if out_w is None else out_w
  h, w = img.shape[-2:]
  rh, rw = area_matrix(h, out_h), area_matrix(w, out_w)
  out = rh @ np.asarray(img, dtype=np.float64) @ rw.T
  return out.astype(img.dtype)


def area_resize_tensor(x : Tensor, out_h : int, out_w : typing.Optional[int] = None) -> Tensor:
  """Differentiable area_resize of the last two axes."""
  out_w = out_h if out_w is None else out_w
  h, w = x.shape[-2:]
  rh = area_matrix(h, out_h).astype(x.dtype)
  rwt = np.ascontiguousarray(area_matrix(w, out_w).T, dtype=x.dtype)
  return ops.matmul(ops.matmul(rh, x), rwt)


def band_mask(aux_side : int, inner_side : int) -> np.ndarray:
  """(aux, aux) bool, True outside the centered inner_side x inner_side square."""
  off = (aux_side - inner_side) // 2
  mask = np.ones((aux_side, aux_side), dtype=bool)
  mask[off:off + inner_side, off:off + inner_side] = False
  return mask


def integrated_loss(pred : Tensor, target : np.ndarray, aux : np.ndarray,
                    visible_mask : np.ndarray, patch_size : int,
                    outer_weight : float = 1.0, eps : float = 1e-6) -> LossBreakdown:
  """Masked recovery of the center plus raw-pixel supervision of the outer band.

  Params
  ------
  pred : Tensor
      (B, M, 3P^2) prediction in normalized-patch space.
  target : np.ndarray
      (B, M, 3P^2) raw-pixel patches of the center crop.
  aux : np.ndarray
      (B, 3, A, A) original canvas whose central side x side block is the center crop.
  visible_mask : np.ndarray
      (B, M) bool.
  outer_weight : float
      Weight of the outer term; 0 reduces the loss to masked recovery exactly.

  Notes
  -----
  The prediction is mapped back to pixels with the target's per-patch statistics, reassembled
  into an image, area-resized to A x A, and compared with `aux` outside the central block.
  """
  if pred.ndim != 3:
    raise GeometryError(f'integrated_loss expects (B, M, 3P^2) predictions, got {pred.shape}')
  b, m, _ = pred.shape
  side = int(round(np.sqrt(m))) * patch_size
  grid = (side // patch_size, side // patch_size)
  if grid[0] * grid[1] != m:
    raise GeometryError(f'{m} tokens do not form a square grid')
  if aux.ndim != 4 or aux.shape[:2] != (b, 3) or aux.shape[2] != aux.shape[3]:
    raise GeometryError(f'aux canvas must be (B, 3, A, A), got {aux.shape}')
  aux_side = aux.shape[-1]
  if aux_side < side:
    raise GeometryError(f'aux canvas {aux_side} is smaller than the model canvas {side}')

  center = recovery_loss(pred, target, visible_mask, normalized=True, masked_only=True, eps=eps)

  _, stats = normalize_array(np.asarray(target), eps)
  scale = np.broadcast_to(stats.scale, pred.shape).astype(pred.dtype)
  shift = np.broadcast_to(stats.mean, pred.shape).astype(pred.dtype)
  pixels = ops.add(ops.mul(pred, scale), shift)
  img = unpatchify_tensor(pixels, patch_size, grid)
  resized = area_resize_tensor(img, aux_side)
  band = np.broadcast_to(band_mask(aux_side, side), resized.shape)
  outer = ops.mse(resized, np.asarray(aux, dtype=pred.dtype), mask=band)

  if outer_weight == 0:
    total = center.total
  else:
    total = ops.add(center.total, ops.scale(outer, outer_weight))
  return LossBreakdown(total=total, center=center.total, outer=outer,
                       selected_tokens=center.selected_tokens, outer_weight=outer_weight)
