import json

import pytest

from pretext_eval import train
from pretext_eval.degrade import DegradationSpec
from pretext_eval.train import TrainConfig
from pretext_eval.util import ConfigError, ValidationError
from pretext_eval.util.config_util import RunConfig


def test_phase_defaults():
  pre = TrainConfig.for_phase('pretrain', spec=DegradationSpec.default('masked', 32, 4))
  assert (pre.base_lr, pre.weight_decay, pre.betas, pre.epochs) == (1.5e-4, 0.05, (0.9, 0.95), 300)
  fine = TrainConfig.for_phase('finetune')
  assert fine.layerwise_decay == 0.75
  assert fine.betas == (0.9, 0.999)
  probe = TrainConfig.for_phase('probe')
  assert probe.weight_decay == 0.0
  assert probe.epochs == 90
  with pytest.raises(ValidationError):
    TrainConfig.for_phase('distill')


def test_peak_lr_scales_with_batch():
  cfg = TrainConfig.for_phase('pretrain', batch_size=4096)
  assert cfg.peak_lr == pytest.approx(1.5e-4 * 16)
  assert cfg.steps_per_epoch(1000) == 1
  small = TrainConfig.for_phase('probe', batch_size=64, epochs=3)
  assert small.steps_per_epoch(130) == 3
  assert small.total_steps(130) == 9


def test_pretrain_needs_a_spec():
  assert any('degradation' in p for p in TrainConfig.for_phase('pretrain').problems())


def test_zoomed_out_without_padding_needs_fixed_side():
  spec = DegradationSpec.default('zoomed_out', 32, 4, pad_mode='none', zoom_side='rand')
  problems = TrainConfig.for_phase('pretrain', spec=spec).problems()
  assert len(problems) == 1
  assert 'fixed zoom_side' in problems[0]
  fixed = DegradationSpec.default('zoomed_out', 32, 4, pad_mode='none')
  assert TrainConfig.for_phase('pretrain', spec=fixed).problems() == []


def test_train_config_collects_problems():
  cfg = TrainConfig.for_phase('finetune', base_lr=0.0, epochs=0, batch_size=0,
                              probe_mode='mlp')
  assert len(cfg.problems()) == 4
  with pytest.raises(ValidationError):
    cfg.validate()


def test_plan_from_config_defaults():
  run = RunConfig.resolve(overrides=['task="zoomed_in"', 'epochs=2'])
  plan = train.plan_from_config(run, 'pretrain', num_classes=10)
  assert plan.model.image_side == 32
  assert plan.train.spec.task == 'zoomed_in'
  assert plan.train.spec.zoom_side == 24
  assert plan.train.epochs == 2
  assert plan.train.base_lr == 1.5e-4
  assert plan.config['task'] == 'zoomed_in'


def test_plan_applies_model_and_degradation_keys():
  run = RunConfig.resolve(overrides=['image_side=16', 'patch_size=4', 'width=32', 'heads=2',
                                     'mask_ratio=0.5', 'twist=0.2', 'beta2=0.99'])
  plan = train.plan_from_config(run, 'pretrain')
  assert plan.model.grid == (4, 4)
  assert plan.train.spec.mask_ratio == 0.5
  assert plan.train.spec.twist == (0.2, 0.2)
  assert plan.train.betas == (0.9, 0.99)


def test_plan_from_config_collects_every_problem():
  run = RunConfig.resolve(overrides=['width=90', 'epochs=0', 'num_classes=5'])
  with pytest.raises(ConfigError) as err:
    train.plan_from_config(run, 'finetune', num_classes=10)
  problems = err.value.problems
  assert any('num_classes' in p for p in problems)
  assert any('width' in p for p in problems)
  assert any('epochs' in p for p in problems)


def test_plan_keeps_checkpoint_geometry(tmp_path):
  config = tmp_path / 'probe.json'
  config.write_text(json.dumps({'epochs': 1}))
  run = RunConfig.resolve(str(config))
  plan = train.plan_from_config(run, 'probe', num_classes=3,
                                model_base={'image_side': 8, 'patch_size': 4, 'width': 8,
                                            'heads': 2, 'depth': 1})
  assert plan.model.image_side == 8
  assert plan.model.num_classes == 3
  assert plan.train.spec is None
