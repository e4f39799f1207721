import numpy as np
import pytest

from pretext_eval.engine import ParamSet, Tensor, precision
from pretext_eval.train import OptimizerState
from pretext_eval.train import optim
from pretext_eval.util import NonFiniteError, ShapeError, ValidationError


def _params():
  with precision(np.float64):
    return ParamSet({
      'blocks.00.mlp.fc1.w': Tensor(np.ones((2, 3)), requires_grad=True),
      'blocks.00.mlp.fc1.b': Tensor(np.ones(3), requires_grad=True),
      'cls_token': Tensor(np.ones(3), requires_grad=True),
      'head.w': Tensor(np.ones((3, 2)), requires_grad=True),
    })


def test_first_step_moves_by_lr():
  params = _params()
  grads = {'blocks.00.mlp.fc1.w': np.full((2, 3), 0.3), 'head.w': np.full((3, 2), -2.0)}
  state = optim.adamw_step(params, grads, OptimizerState(), lr=0.01, wd=0.0)
  assert state.step == 1
  np.testing.assert_allclose(params['blocks.00.mlp.fc1.w'].data, 1.0 - 0.01, rtol=1e-6)
  np.testing.assert_allclose(params['head.w'].data, 1.0 + 0.01, rtol=1e-6)


def test_weight_decay_skips_vectors_and_tokens():
  params = _params()
  grads = {name: np.zeros(t.shape) for name, t in params.items()}
  optim.adamw_step(params, grads, OptimizerState(), lr=0.1, wd=0.5)
  np.testing.assert_allclose(params['blocks.00.mlp.fc1.w'].data, 1.0 - 0.1 * 0.5)
  np.testing.assert_array_equal(params['blocks.00.mlp.fc1.b'].data, 1.0)
  np.testing.assert_array_equal(params['cls_token'].data, 1.0)
  assert optim.decays('head.w', np.zeros((3, 2)))
  assert not optim.decays('decoder.mask_token', np.zeros((1, 3)))


def test_frozen_parameters_and_moments_stay_put():
  params = _params()
  state = optim.adamw_step(params, {'head.w': np.ones((3, 2))}, OptimizerState(), 0.01, 0.05)
  np.testing.assert_array_equal(params['blocks.00.mlp.fc1.w'].data, 1.0)
  assert set(state.m) == {'head.w'}


def test_non_finite_gradient_updates_nothing():
  params = _params()
  before = params.digest()
  state = OptimizerState()
  grads = {'head.w': np.ones((3, 2)), 'blocks.00.mlp.fc1.w': np.full((2, 3), np.nan)}
  with pytest.raises(NonFiniteError) as err:
    optim.adamw_step(params, grads, state, 0.01, 0.05)
  assert err.value.name == 'blocks.00.mlp.fc1.w'
  assert params.digest() == before
  assert state.step == 0 and not state.m


def test_gradient_shape_mismatch():
  with pytest.raises(ShapeError):
    optim.adamw_step(_params(), {'head.w': np.ones(6)}, OptimizerState(), 0.01, 0.0)
  with pytest.raises(ShapeError):
    optim.adamw_step(_params(), {'missing': np.ones(1)}, OptimizerState(), 0.01, 0.0)


def test_lr_scales_apply_per_parameter():
  params = _params()
  grads = {'head.w': np.ones((3, 2))}
  optim.adamw_step(params, grads, OptimizerState(), 0.01, 0.0, lr_scales={'head.w': 0.5})
  np.testing.assert_allclose(params['head.w'].data, 1.0 - 0.005, rtol=1e-6)


def test_optimizer_state_round_trips_through_tensors():
  params = _params()
  state = optim.adamw_step(params, {'head.w': np.ones((3, 2))}, OptimizerState(), 0.01, 0.0)
  tensors = state.to_tensors()
  assert set(tensors) == {'optim.m.head.w', 'optim.v.head.w'}
  back = OptimizerState.from_tensors(tensors, state.step)
  assert back.step == 1
  np.testing.assert_array_equal(back.m['head.w'], state.m['head.w'])
  with pytest.raises(ValidationError):
    OptimizerState.from_tensors({'optim.m.x': np.zeros(1)}, 1)


def test_cosine_schedule_endpoints():
  assert optim.cosine_lr(0, 100, 1.0) == 0.0
  assert optim.cosine_lr(5, 100, 1.0) == pytest.approx(0.5)
  assert optim.cosine_lr(10, 100, 1.0) == pytest.approx(1.0)
  assert optim.cosine_lr(55, 100, 1.0) == pytest.approx(0.5)
  assert optim.cosine_lr(100, 100, 1.0) == pytest.approx(0.0, abs=1e-12)
  assert optim.cosine_lr(0, 10, 2.0, warmup_fraction=0.0) == 2.0
  with pytest.raises(ValidationError):
    optim.cosine_lr(0, 0, 1.0)


def test_cosine_schedule_is_monotone_after_warmup():
  rates = [optim.cosine_lr(s, 50, 1.0) for s in range(5, 51)]
  assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_layerwise_scales():
  scales = optim.layerwise_scales(4, 0.5)
  assert scales['embed'] == 0.5 ** 5
  assert scales['blocks.00'] == 0.5 ** 4
  assert scales['blocks.03'] == 0.5
  assert scales['head'] == 1.0
  assert optim.param_group('patch_embed.w') == 'embed'
  assert optim.param_group('blocks.02.attn.qkv.w') == 'blocks.02'
  assert optim.param_group('norm.g') == 'head'
  assert optim.param_group('probe.blocks.00.norm1.g') == 'head'
  lr = optim.param_lr_scales(['cls_token', 'blocks.01.norm1.b', 'head.b'], 2, 0.75)
  assert lr == {'cls_token': 0.75 ** 3, 'blocks.01.norm1.b': 0.75, 'head.b': 1.0}
  with pytest.raises(ValidationError):
    optim.layerwise_scales(4, 0.0)
