import struct

import numpy as np
import pytest

from conftest import shapes_dataset
from pretext_eval.dataset import Dataset, DatasetGenerator, image_io, ingest_dataset, packed
from pretext_eval.dataset import synthetic
from pretext_eval.util import DatasetFormatError


def _quantized(gen, shape):
  """Images whose values survive the 8-bit file formats exactly."""
  return gen.integers(0, 256, size=shape).astype(np.float32) / np.float32(255.0)


def test_byte_conversion_is_exact(gen):
  img = _quantized(gen, (3, 5, 7))
  rgb = image_io.to_bytes(img)
  assert rgb.shape == (5, 7, 3) and rgb.dtype == np.uint8
  np.testing.assert_array_equal(image_io.to_float(rgb), img)
  assert image_io.to_bytes(np.full((3, 1, 1), 2.0))[0, 0].tolist() == [255, 255, 255]


@pytest.mark.parametrize('ext', ['.ppm', '.png'])
def test_image_files_round_trip(tmp_path, gen, ext):
  img = _quantized(gen, (3, 6, 4))
  path = str(tmp_path / f'img{ext}')
  image_io.save_image(path, img)
  back = image_io.load_image(path)
  assert back.shape == (3, 6, 4)
  np.testing.assert_array_equal(back, img)


def test_ppm_is_binary_p6(tmp_path, gen):
  path = tmp_path / 'img.ppm'
  image_io.save_image(str(path), _quantized(gen, (3, 2, 2)))
  assert path.read_bytes().startswith(b'P6')
  path.write_bytes(b'P3\n2 2\n255\n' + b'0 ' * 12)
  with pytest.raises(DatasetFormatError):
    image_io.load_image(str(path))


def test_unreadable_images_name_the_file(tmp_path):
  path = tmp_path / 'broken.png'
  path.write_bytes(b'not a png')
  with pytest.raises(DatasetFormatError, match='broken.png'):
    image_io.load_image(str(path))
  with pytest.raises(DatasetFormatError):
    image_io.load_image(str(tmp_path / 'image.jpg'))


def test_read_image_tree_labels_by_sorted_class(tmp_path, gen):
  for cls, count in (('zebra', 2), ('ant', 1)):
    (tmp_path / cls).mkdir()
    for i in range(count):
      image_io.save_image(str(tmp_path / cls / f'{i}.ppm'), _quantized(gen, (3, 4, 4)))
  (tmp_path / 'ant' / 'notes.txt').write_text('ignored')
  dataset = ingest_dataset(str(tmp_path))
  assert dataset.class_names == ('ant', 'zebra')
  assert dataset.labels.tolist() == [0, 1, 1]
  assert dataset.image_shape == (3, 4, 4)


def test_flat_directory_is_one_class(tmp_path, gen):
  for name in ('b.png', 'a.png'):
    image_io.save_image(str(tmp_path / name), _quantized(gen, (3, 4, 4)))
  dataset = image_io.read_image_tree(str(tmp_path))
  assert dataset.num_classes == 1
  assert len(dataset) == 2
  assert image_io.list_images(str(tmp_path)) == [str(tmp_path / 'a.png'),
                                                str(tmp_path / 'b.png')]


def test_mixed_sizes_are_rejected(tmp_path, gen):
  image_io.save_image(str(tmp_path / 'a.png'), _quantized(gen, (3, 4, 4)))
  image_io.save_image(str(tmp_path / 'b.png'), _quantized(gen, (3, 4, 6)))
  with pytest.raises(DatasetFormatError, match='b.png'):
    image_io.read_image_tree(str(tmp_path))
  with pytest.raises(DatasetFormatError):
    ingest_dataset(str(tmp_path / 'nothing'))


@pytest.mark.parametrize('label_width', [1, 2, 4])
def test_packed_round_trip(tmp_path, gen, label_width):
  images = _quantized(gen, (5, 3, 4, 6))
  labels = np.array([0, 3, 1, 2, 3])
  dataset = Dataset(images, labels, ('a', 'b', 'c', 'd'))
  path = str(tmp_path / 'd.vtds')
  packed.write_packed(path, dataset, label_width)
  back = ingest_dataset(path)
  np.testing.assert_array_equal(back.images, images)
  assert back.labels.tolist() == labels.tolist()
  assert back.class_names == ('0', '1', '2', '3')
  named = packed.read_packed(path, dataset.class_names)
  assert named.class_names == dataset.class_names


def test_packed_rejects_corrupt_files(tmp_path, gen):
  dataset = Dataset(_quantized(gen, (2, 3, 2, 2)), np.array([0, 1]), ('a', 'b'))
  path = tmp_path / 'd.vtds'
  packed.write_packed(str(path), dataset)
  raw = path.read_bytes()
  path.write_bytes(raw[:-1])
  with pytest.raises(DatasetFormatError, match='payload'):
    packed.read_packed(str(path))
  path.write_bytes(b'NOPE' + raw[4:])
  with pytest.raises(DatasetFormatError, match='magic'):
    packed.read_packed(str(path))
  path.write_bytes(raw[:8])
  with pytest.raises(DatasetFormatError):
    packed.read_packed(str(path))
  path.write_bytes(raw[:20] + struct.pack('<I', 1) + raw[24:])
  with pytest.raises(DatasetFormatError, match='out of range'):
    packed.read_packed(str(path))
  with pytest.raises(DatasetFormatError):
    packed.write_packed(str(path), Dataset(dataset.images, np.array([0, 300]), ('a',)), 1)
  with pytest.raises(DatasetFormatError, match='out of range'):
    packed.write_packed(str(path), Dataset(dataset.images, np.array([0, 2]), ('a', 'b')))


def test_packed_keeps_the_class_count_of_a_split_missing_its_top_class(tmp_path, gen):
  images = _quantized(gen, (4, 3, 2, 2))
  dataset = Dataset(images, np.array([0, 1, 1, 0]), tuple('abcde'))
  path = str(tmp_path / 'test.vtds')
  packed.write_packed(path, dataset)
  back = ingest_dataset(path)
  assert back.num_classes == 5
  assert back.class_names == ('0', '1', '2', '3', '4')
  with pytest.raises(DatasetFormatError, match='class names'):
    packed.read_packed(path, ('a', 'b'))


def test_dataset_views(tiny_dataset):
  assert len(tiny_dataset) == 12
  assert tiny_dataset.num_classes == 3
  assert tiny_dataset.image_shape == (3, 8, 8)
  assert tiny_dataset.head(None) is tiny_dataset
  assert len(tiny_dataset.head(5)) == 5
  sample = tiny_dataset[4]
  assert sample.label == 1
  picked = tiny_dataset.subset([4, 0])
  np.testing.assert_array_equal(picked.images[0], sample.image)
  empty = Dataset.from_samples([], ('a',))
  assert len(empty) == 0


def test_synthetic_shapes_are_deterministic():
  a = shapes_dataset(20, side=16, num_classes=10)
  b = shapes_dataset(20, side=16, num_classes=10)
  np.testing.assert_array_equal(a.images, b.images)
  assert a.labels.tolist() == [i % 10 for i in range(20)]
  assert a.class_names == synthetic.CLASS_NAMES
  assert a.images.min() >= 0.0 and a.images.max() <= 1.0
  c = shapes_dataset(20, side=16, num_classes=10, seed=1)
  assert not np.array_equal(a.images, c.images)


def test_synthetic_classes_differ():
  dataset = shapes_dataset(10, side=32, num_classes=10)
  flat = dataset.images.reshape(10, -1)
  assert len({tuple(np.round(m, 3)) for m in flat}) == 10


def test_generator_lookup():
  generator = DatasetGenerator.instantiate('synthetic', {'num_classes': 2, 'image_side': 8})
  assert isinstance(generator, synthetic.SyntheticShapesGenerator)
  assert generator.class_names() == ('disk', 'square')
  with pytest.raises(DatasetFormatError):
    DatasetGenerator.instantiate('imagenet', {})
