import os
import sys

import hypothesis
import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from pretext_eval.dataset import Dataset  # noqa: E402
from pretext_eval.dataset import synthetic  # noqa: E402
from pretext_eval.model import ViTConfig  # noqa: E402


np.seterr(all='warn')

hypothesis.settings.register_profile('fast', max_examples=20, deadline=None)
hypothesis.settings.register_profile('thorough', max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.getenv('HYPOTHESIS_PROFILE', 'fast'))


def pytest_addoption(parser):
  parser.addoption('--run-slow', action='store_true', default=False,
                   help='also run desk-scale training tests')


def pytest_configure(config):
  config.addinivalue_line('markers', 'slow: desk-scale run; needs --run-slow')


def pytest_collection_modifyitems(config, items):
  if config.getoption('--run-slow'):
    return
  skip = pytest.mark.skip(reason='desk-scale run; pass --run-slow')
  for item in items:
    if 'slow' in item.keywords:
      item.add_marker(skip)


# Smallest geometry the training loops accept; a whole epoch takes well under a second.
TINY_MODEL = dict(patch_size=4, image_side=8, depth=1, width=8, heads=2, decoder_depth=1,
                  decoder_width=8, decoder_heads=2, mlp_ratio=2.0)


@pytest.fixture
def tiny_model():
  return ViTConfig(num_classes=3, **TINY_MODEL)


@pytest.fixture
def gen():
  return np.random.default_rng(1234)


@pytest.fixture
def image(gen):
  return gen.uniform(size=(3, 32, 32)).astype(np.float32)


def shapes_dataset(count, side=8, num_classes=3, seed=0) -> Dataset:
  generator = synthetic.SyntheticShapesGenerator(
    {'image_side': side, 'num_classes': num_classes, 'seed': seed})
  return generator.generate_dataset(count)


@pytest.fixture
def tiny_dataset():
  return shapes_dataset(12)
