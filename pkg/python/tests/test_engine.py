import numpy as np
import pytest

from pretext_eval.engine import ParamSet, Tape, Tensor, backward, default_dtype, precision
from pretext_eval.engine import ops
from pretext_eval.util import ShapeError, TapeError


def _leaf(values):
  return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def test_tensor_defaults_to_float32():
  assert default_dtype() is np.float32
  t = Tensor([[1, 2], [3, 4]])
  assert t.dtype == np.float32
  assert t.data.flags.c_contiguous
  assert t.shape == (2, 2)


def test_precision_switches_dtype():
  with precision(np.float64):
    assert Tensor([1.0]).dtype == np.float64
  assert Tensor([1.0]).dtype == np.float32
  with pytest.raises(ValueError):
    with precision(np.int32):
      pass


def test_no_tape_records_nothing():
  a = _leaf([1.0, 2.0])
  out = ops.mul(a, a)
  assert out.is_leaf
  np.testing.assert_array_equal(out.data, [1.0, 4.0])


def test_matmul_and_add_backward():
  with precision(np.float64):
    a = _leaf([[1.0, 2.0], [3.0, 4.0]])
    b = _leaf([[5.0], [6.0]])
    bias = _leaf([0.5])
    with Tape() as tape:
      loss = ops.sum(ops.add(ops.matmul(a, b), bias))
    backward(tape, loss)
  assert loss.item() == pytest.approx(17 + 39 + 1.0)
  np.testing.assert_allclose(a.grad, [[5.0, 6.0], [5.0, 6.0]])
  np.testing.assert_allclose(b.grad, [[4.0], [6.0]])
  np.testing.assert_allclose(bias.grad, [2.0])


def test_binary_ops_broadcast_leading_axes_only():
  a = Tensor(np.ones((2, 3, 4)))
  ops.add(a, Tensor(np.ones(4)))
  ops.add(Tensor(np.ones((3, 4))), a)
  with pytest.raises(ShapeError):
    ops.add(a, Tensor(np.ones((2, 1, 4))))
  with pytest.raises(ShapeError):
    ops.mul(a, Tensor(np.ones(3)))


def test_gradients_accumulate_across_backward_calls():
  with precision(np.float64):
    x = _leaf([1.0, -2.0])
    for _ in range(2):
      with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
      backward(tape, loss)
  np.testing.assert_allclose(x.grad, [4.0, -8.0])


def test_repeated_use_accumulates():
  with precision(np.float64):
    x = _leaf([3.0])
    with Tape() as tape:
      y = ops.add(ops.mul(x, x), ops.scale(x, 2.0))
      loss = ops.sum(y)
    backward(tape, loss)
  np.testing.assert_allclose(x.grad, [8.0])


def test_getitem_repeated_index_accumulates():
  with precision(np.float64):
    x = _leaf([1.0, 2.0, 3.0])
    with Tape() as tape:
      loss = ops.sum(ops.getitem(x, [0, 0, 2]))
    backward(tape, loss)
  np.testing.assert_allclose(x.grad, [2.0, 0.0, 1.0])


def test_backward_rejects_non_scalar_loss():
  x = _leaf([1.0, 2.0])
  with Tape() as tape:
    y = ops.mul(x, x)
  with pytest.raises(TapeError):
    backward(tape, y)


def test_backward_rejects_loss_from_other_tape():
  x = _leaf([1.0, 2.0])
  with Tape():
    loss = ops.sum(x)
  with Tape() as other:
    ops.sum(x)
  with pytest.raises(TapeError):
    backward(other, loss)


def test_unreached_params_get_zero_grad():
  params = ParamSet({'used': _leaf([1.0]), 'unused': _leaf([[1.0, 2.0]])})
  with Tape() as tape:
    loss = ops.sum(ops.mul(params['used'], params['used']))
  backward(tape, loss, params)
  np.testing.assert_array_equal(params['unused'].grad, np.zeros((1, 2)))


def test_softmax_rows_sum_to_one():
  x = Tensor(np.random.default_rng(0).normal(size=(4, 7)) * 50)
  out = ops.softmax(x)
  np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, rtol=1e-5)
  assert np.isfinite(out.data).all()


def test_layer_norm_standardizes_last_axis():
  x = Tensor(np.random.default_rng(0).normal(3.0, 5.0, size=(2, 3, 16)))
  out = ops.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
  np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-5)
  np.testing.assert_allclose(out.data.std(axis=-1), 1.0, atol=1e-3)


def test_masked_mse_ignores_unselected_elements():
  with precision(np.float64):
    pred = _leaf([[1.0, 10.0], [3.0, -7.0]])
    target = np.zeros((2, 2))
    mask = np.array([[True, False], [True, False]])
    with Tape() as tape:
      loss = ops.mse(pred, target, mask=mask)
    backward(tape, loss)
  assert loss.item() == pytest.approx((1.0 + 9.0) / 2)
  np.testing.assert_allclose(pred.grad, [[1.0, 0.0], [3.0, 0.0]])


def test_mse_with_nothing_selected_is_zero():
  pred = Tensor(np.ones((2, 3)))
  loss = ops.mse(pred, np.zeros((2, 3)), mask=np.zeros((2, 3), dtype=bool))
  assert loss.item() == 0.0


def test_concat_and_broadcast_to_backward():
  with precision(np.float64):
    a = _leaf(np.ones((1, 2)))
    b = _leaf(np.ones(2))
    with Tape() as tape:
      joined = ops.concat([a, ops.reshape(ops.broadcast_to(b, (3, 2)), (3, 2))], axis=0)
      loss = ops.sum(ops.mul(joined, np.arange(8.0).reshape(4, 2)))
    backward(tape, loss)
  np.testing.assert_allclose(a.grad, [[0.0, 1.0]])
  np.testing.assert_allclose(b.grad, [2.0 + 4.0 + 6.0, 3.0 + 5.0 + 7.0])


def test_cross_entropy_of_uniform_logits():
  logits = Tensor(np.zeros((5, 4)))
  loss = ops.cross_entropy(logits, [0, 1, 2, 3, 0])
  assert loss.item() == pytest.approx(np.log(4.0), rel=1e-6)


def test_elementwise_dispatch():
  a = Tensor(np.array([1.0, -1.0]))
  np.testing.assert_allclose(ops.elementwise('scale', a, factor=3.0).data, [3.0, -3.0])
  np.testing.assert_allclose(ops.elementwise('sub', a, a).data, [0.0, 0.0])
  assert ops.elementwise('gelu', a).data[0] == pytest.approx(0.841192, abs=1e-5)


def test_param_set_is_sorted_and_subset_is_a_view():
  params = ParamSet({'b.w': Tensor([1.0]), 'a.w': Tensor([2.0]), 'a.b': Tensor([3.0])})
  assert list(params) == ['a.b', 'a.w', 'b.w']
  view = params.subset(['a.'])
  assert list(view) == ['a.b', 'a.w']
  assert view['a.w'] is params['a.w']
  assert params.numel() == 3


def test_param_set_digest_tracks_bytes():
  params = ParamSet({'w': Tensor(np.arange(4.0))})
  before = params.digest()
  clone = params.copy()
  assert clone.digest() == before
  clone['w'].data[0] += 1
  assert clone.digest() != before
  assert params.digest() == before


def test_param_set_rejects_arrays():
  with pytest.raises(TypeError):
    ParamSet({'w': np.zeros(2)})
