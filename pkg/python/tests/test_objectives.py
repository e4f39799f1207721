import numpy as np
import pytest

from pretext_eval.engine import Tape, Tensor, backward, precision
from pretext_eval.model import objectives
from pretext_eval.model.patch_ops import patchify_array
from pretext_eval.util import GeometryError


def _box_average(img, out_h, out_w):
  """Each destination pixel is the plain mean of its box on a grid refined out_h x out_w times,
  where every box edge falls on a sub-pixel boundary."""
  h, w = img.shape[-2:]
  fine = np.repeat(np.repeat(np.asarray(img, dtype=np.float64), out_h, axis=-2), out_w, axis=-1)
  out = np.empty(img.shape[:-2] + (out_h, out_w))
  for i in range(out_h):
    for j in range(out_w):
      out[..., i, j] = fine[..., i * h:(i + 1) * h, j * w:(j + 1) * w].mean(axis=(-2, -1))
  return out


def test_area_resize_matches_box_overlap_for_small_sides(gen):
  for h in range(1, 9):
    for w in range(1, 9):
      img = gen.uniform(size=(3, h, w))
      for out_h in range(1, 9):
        for out_w in range(1, 9):
          got = objectives.area_resize(img, out_h, out_w)
          np.testing.assert_allclose(got, _box_average(img, out_h, out_w), rtol=0, atol=1e-6,
                                     err_msg=f'{h}x{w} -> {out_h}x{out_w}')


def test_area_resize_tensor_agrees_with_array_version(gen):
  img = gen.uniform(size=(2, 3, 6, 6))
  with precision(np.float64):
    out = objectives.area_resize_tensor(Tensor(img), 4)
  np.testing.assert_allclose(out.data, objectives.area_resize(img, 4), atol=1e-12)


def _batch(gen, b=2, side=8, patch_size=4, aux_side=12):
  aux = gen.uniform(size=(b, 3, aux_side, aux_side))
  off = (aux_side - side) // 2
  target = patchify_array(aux[:, :, off:off + side, off:off + side], patch_size)
  pred = gen.standard_normal(target.shape)
  visible = np.zeros(target.shape[:2], dtype=bool)
  visible[:, ::2] = True
  return pred, target, aux, visible


def test_masked_loss_gives_visible_tokens_zero_gradient(gen):
  pred_values, target, _, visible = _batch(gen)
  with precision(np.float64):
    pred = Tensor(pred_values, requires_grad=True)
    with Tape() as tape:
      loss = objectives.recovery_loss(pred, target, visible)
    backward(tape, loss.total)
  assert loss.selected_tokens == int((~visible).sum())
  assert np.all(pred.grad[visible] == 0.0)
  assert np.all(np.abs(pred.grad[~visible]).sum(axis=-1) > 0)


def test_full_loss_averages_every_token(gen):
  pred, target, _, _ = _batch(gen)
  with precision(np.float64):
    loss = objectives.recovery_loss(pred, target, np.ones(target.shape[:2], dtype=bool))
  assert loss.selected_tokens == target.shape[0] * target.shape[1]
  assert loss.outer_term == 0.0


def test_integrated_loss_without_outer_weight_is_the_masked_loss(gen):
  pred_values, target, aux, visible = _batch(gen)
  with precision(np.float64):
    masked = objectives.recovery_loss(Tensor(pred_values), target, visible, masked_only=True)
    both = objectives.integrated_loss(Tensor(pred_values), target, aux, visible, 4,
                                      outer_weight=0.0)
  assert both.total_value == masked.total_value
  assert both.outer_term > 0


def test_integrated_loss_adds_the_weighted_outer_term(gen):
  pred_values, target, aux, visible = _batch(gen)
  with precision(np.float64):
    pred = Tensor(pred_values, requires_grad=True)
    with Tape() as tape:
      loss = objectives.integrated_loss(pred, target, aux, visible, 4, outer_weight=0.5)
    backward(tape, loss.total)
  assert loss.outer_term > 0
  assert loss.total_value == pytest.approx(loss.center_term + 0.5 * loss.outer_term, rel=1e-12)
  # The outer band reaches visible tokens too.
  assert np.abs(pred.grad[visible]).sum() > 0


def test_band_mask_geometry():
  band = objectives.band_mask(12, 8)
  assert band.shape == (12, 12)
  assert not band[2:10, 2:10].any()
  assert band.sum() == 144 - 64
  assert band[:2].all() and band[10:].all()
  assert band[:, :2].all() and band[:, 10:].all()
  assert not objectives.band_mask(8, 8).any()
  odd = objectives.band_mask(7, 4)
  assert not odd[1:5, 1:5].any()
  assert odd.sum() == 49 - 16


def test_integrated_loss_rejects_bad_geometry(gen):
  pred, target, aux, visible = _batch(gen)
  with pytest.raises(GeometryError):
    objectives.integrated_loss(Tensor(pred), target, aux[:, :, :6, :6], visible, 4)
  with pytest.raises(GeometryError):
    objectives.integrated_loss(Tensor(pred[0]), target[0], aux, visible[0], 4)
