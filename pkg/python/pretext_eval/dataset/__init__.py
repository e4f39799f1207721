import abc
import collections
import importlib
import logging
import os
import typing

import attr
import numpy as np

from pretext_eval.util import DatasetFormatError


_LOG = logging.getLogger(__name__)


class DatasetSample(collections.namedtuple('_DatasetSample', ['image', 'label'])):
  """Represents one sample in a dataset.

  Attributes
  ----------
  image : numpy.ndarray
      (3, H, W) float32 image with values in [0, 1].
  label : int
      Class index.
  """

  def __new__(cls, image : np.ndarray, label : int):
    return super(cls, cls).__new__(cls, image, int(label))


@attr.s(auto_attribs=True)
class Dataset:
  """An in-memory labelled image set.

  Attributes
  ----------
  images : np.ndarray
      (N, 3, H, W) float32 in [0, 1].
  labels : np.ndarray
      (N,) int64 class indices.
  class_names : Tuple[str, ...]
      Name of each class index.
  source : str
      Where the samples were read from.
  """

  images : np.ndarray
  labels : np.ndarray
  class_names : typing.Tuple[str, ...]
  source : str = ''

  def __len__(self) -> int:
    return int(self.images.shape[0])

  def __getitem__(self, index : int) -> DatasetSample:
    return DatasetSample(self.images[index], self.labels[index])

  @property
  def num_classes(self) -> int:
    return len(self.class_names)

  @property
  def image_shape(self) -> typing.Tuple[int, int, int]:
    return tuple(self.images.shape[1:])

  def subset(self, indices) -> 'Dataset':
    indices = np.asarray(indices, dtype=np.int64)
    return Dataset(self.images[indices], self.labels[indices], self.class_names, self.source)

  def head(self, count : typing.Optional[int]) -> 'Dataset':
    if count is None or count >= len(self):
      return self
    return self.subset(np.arange(count))

  @classmethod
  def from_samples(cls, samples : typing.Sequence[DatasetSample],
                   class_names : typing.Sequence[str], source : str = '') -> 'Dataset':
    if not samples:
      return cls(np.zeros((0, 3, 0, 0), dtype=np.float32), np.zeros(0, dtype=np.int64),
                 tuple(class_names), source)
    images = np.stack([s.image for s in samples]).astype(np.float32)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return cls(images, labels, tuple(class_names), source)


class DatasetGenerator(metaclass=abc.ABCMeta):

  @classmethod
  def instantiate(cls, name : str, config : typing.Dict):
    """Return the dataset generator named `name` given config.

    Params
    ------
    name: str
        Name of the module (in this package) which contains the dataset generator.

    config: Dict
        Arbitrary configuration for the generator.

    Returns
    -------
    DatasetGenerator :
        A subclass of this one.
    """
    try:
      mod = importlib.import_module(f'.{name}', __name__)
    except ImportError as err:
      raise DatasetFormatError(f'no dataset generator module {__name__}.{name}') from err
    for key in dir(mod):
      val = getattr(mod, key)
      try:
        is_subclass = issubclass(val, DatasetGenerator)
      except TypeError:
        continue

      if is_subclass and val != DatasetGenerator:
        return val(config)

    raise DatasetFormatError(f'{__name__}.{name} defines no DatasetGenerator')

  def __init__(self, config):
    self.config = config

  @abc.abstractmethod
  def class_names(self) -> typing.Tuple[str, ...]:
    raise NotImplementedError()

  @abc.abstractmethod
  def generate(self, num_samples : int) -> typing.List[DatasetSample]:
    """Generate samples from this dataset.

    Params
    ------
    num_samples : int
        The number of samples to generate.

    Returns
    -------
    List[DatasetSample]:
        The generated samples.
    """
    raise NotImplementedError()

  def generate_dataset(self, num_samples : int) -> Dataset:
    return Dataset.from_samples(self.generate(num_samples), self.class_names(),
                                source=f'generated:{type(self).__name__}')


def ingest_dataset(path : str) -> Dataset:
  """Load a dataset from a class directory or a packed file.

  Params
  ------
  path : str
      Either a directory holding one subdirectory per class (sorted names give the labels) with
      .ppm / .png images inside, a directory of images (a single class), or a packed file.

  Returns
  -------
  Dataset :
      Samples in deterministic order: by class, then by file name; or packed record order.

  Raises
  ------
  DatasetFormatError :
      Naming the offending file on malformed headers, truncated records or unreadable images.
  """
  from . import image_io, packed

  if os.path.isdir(path):
    return image_io.read_image_tree(path)
  if os.path.isfile(path):
    return packed.read_packed(path)
  raise DatasetFormatError(f'dataset path {path} does not exist')
