import hypothesis
import hypothesis.strategies as st
import numpy as np
import pytest
import scipy.ndimage

from pretext_eval import degrade
from pretext_eval.degrade import DegradationSpec, make_sample, ops
from pretext_eval.degrade.resample import area_matrix, resize_bilinear
from pretext_eval.degrade.rng import Rng
from pretext_eval.model.patch_ops import patchify_array
from pretext_eval.util import DegradationParamError, GeometryError


def test_rng_is_a_value():
  a = Rng(7).derive('mask', 3).generator().random(4)
  b = Rng(7).derive('mask', 3).generator().random(4)
  np.testing.assert_array_equal(a, b)
  assert not np.array_equal(a, Rng(7).derive('mask', 4).generator().random(4))
  assert not np.array_equal(a, Rng(8).derive('mask', 3).generator().random(4))
  assert not np.array_equal(a, Rng(7).derive('blur', 3).generator().random(4))


def test_rng_advance_moves_the_counter():
  rng = Rng(1)
  assert rng.advance(2).counter == 2
  assert not np.array_equal(rng.generator().random(3), rng.advance().generator().random(3))


def test_mask_random_hides_floor_of_ratio():
  visible = ops.mask_random(196, 0.75, Rng(0))
  assert visible.dtype == bool
  assert (~visible).sum() == 147
  assert (~ops.mask_random(100, 0.29, Rng(0))).sum() == 29
  assert ops.mask_random(16, 0.0, Rng(0)).all()
  with pytest.raises(DegradationParamError):
    ops.mask_random(16, 1.0, Rng(0))


@hypothesis.given(m=st.integers(1, 300), ratio=st.floats(0.0, 0.99), seed=st.integers(0, 1000))
def test_mask_random_count_property(m, ratio, seed):
  visible = ops.mask_random(m, ratio, Rng(seed))
  assert (~visible).sum() == degrade.masked_count(m, ratio)
  assert visible.any()


def test_mask_block_keeps_one_rectangle():
  visible = ops.mask_block(64, (8, 8), 0.75, Rng(3)).reshape(8, 8)
  rows = np.flatnonzero(visible.any(axis=1))
  cols = np.flatnonzero(visible.any(axis=0))
  assert visible.sum() == 16
  assert visible[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1].all()
  assert ops.block_shape((8, 8), 0.75) == (4, 4)
  with pytest.raises(GeometryError):
    ops.mask_block(60, (8, 8), 0.75, Rng(3))


def test_mask_block_is_one_connected_rectangle_over_many_draws():
  ratios = (0.1, 0.3, 0.5, 0.75, 0.9)
  grids = ((8, 8), (4, 6), (7, 5), (14, 14))
  for i in range(1000):
    grid, ratio = grids[i % len(grids)], ratios[i % len(ratios)]
    visible = ops.mask_block(grid[0] * grid[1], grid, ratio, Rng(i)).reshape(grid)
    _, count = scipy.ndimage.label(visible)
    assert count == 1, (i, grid, ratio)
    rows = np.flatnonzero(visible.any(axis=1))
    cols = np.flatnonzero(visible.any(axis=0))
    assert visible[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1].all()
    assert (len(rows), len(cols)) == ops.block_shape(grid, ratio)


def test_mask_center():
  visible = ops.mask_center((8, 8), 6).reshape(8, 8)
  assert visible.sum() == 36
  assert visible[1:7, 1:7].all()
  with pytest.raises(DegradationParamError):
    ops.mask_center((8, 8), 9)


def test_zoom_in_full_side_is_identity(image):
  sample = ops.zoom_in(image, 32, 4)
  np.testing.assert_allclose(sample.input, image, atol=1e-6)
  assert sample.visible_mask.all()


def test_zoom_in_center_magnifies(image):
  sample = ops.zoom_in(image, 16, 4)
  assert sample.input.shape == image.shape
  assert sample.info['top'] == 8.0
  # A 2x magnification repeats pixels in smooth regions; a constant image stays constant.
  flat = np.full((3, 32, 32), 0.25, dtype=np.float32)
  np.testing.assert_allclose(ops.zoom_in(flat, 16, 4).input, 0.25, atol=1e-6)
  with pytest.raises(DegradationParamError):
    ops.zoom_in(image, 18, 4)
  with pytest.raises(DegradationParamError):
    ops.zoom_in(image, 16, 4, 'random')


def test_zoom_in_center_keeps_the_canvas_center(gen):
  odd = gen.uniform(size=(3, 15, 15)).astype(np.float32)
  out = ops.zoom_in(odd, 9, 3).input
  np.testing.assert_allclose(out[:, 7, 7], odd[:, 7, 7], atol=1e-6)
  # An even canvas has no center pixel; the central 2x2 block keeps its mean.
  even = gen.uniform(size=(3, 32, 32)).astype(np.float32)
  out = ops.zoom_in(even, 16, 4).input
  np.testing.assert_allclose(out[:, 15:17, 15:17].mean(axis=(1, 2)),
                             even[:, 15:17, 15:17].mean(axis=(1, 2)), atol=1e-6)


def test_zoom_in_random_location_is_aligned(image):
  sample = ops.zoom_in(image, 16, 4, 'random', Rng(5))
  assert sample.info['top'] % 4 == 0 and sample.info['left'] % 4 == 0


def test_zoom_out_black_places_the_small_copy(image):
  sample = ops.zoom_out(image, 16, 4, 8, 'black', 4)
  small = resize_bilinear(image, 16, 16)
  np.testing.assert_array_equal(sample.input[:, 8:24, 4:20], small)
  assert sample.input[:, :8].max() == 0.0
  assert sample.input[:, :, :4].max() == 0.0
  assert sample.visible_mask.all()


def test_zoom_out_mirror_reflects_edges(image):
  sample = ops.zoom_out(image, 16, 8, 8, 'mirror', 4)
  inp = sample.input
  np.testing.assert_array_equal(inp[:, 8:24, 7], inp[:, 8:24, 8])
  np.testing.assert_array_equal(inp[:, 8:24, 5], inp[:, 8:24, 10])
  np.testing.assert_array_equal(inp[:, 7, 8:24], inp[:, 8, 8:24])


def test_zoom_out_none_returns_bare_raster(image):
  sample = ops.zoom_out(image, 16, 0, 0, 'none', 4)
  assert sample.input.shape == (3, 16, 16)
  grid = sample.visible_mask.reshape(8, 8)
  assert grid[:4, :4].all() and grid.sum() == 16
  assert not sample.masked_only
  assert sample.canvas_input().shape == image.shape
  with pytest.raises(DegradationParamError):
    ops.zoom_out(image, 16, 2, 0, 'none', 4, aligned=False)


def test_zoom_out_other_image(image):
  other = np.full_like(image, 0.5)
  sample = ops.zoom_out(image, 8, 0, 24, 'other_image', 4, other=other)
  assert (sample.input[:, :24] == 0.5).all()
  with pytest.raises(DegradationParamError):
    ops.zoom_out(image, 8, 0, 24, 'other_image', 4)


def test_zoom_out_rejects_square_off_canvas(image):
  with pytest.raises(DegradationParamError):
    ops.zoom_out(image, 16, 20, 0, 'black', 4)


def test_fisheye_zero_twist_is_identity(image):
  sample = ops.fisheye(image, (10.0, 20.0), 0.0, 4)
  np.testing.assert_allclose(sample.input, image, atol=1e-6)


def test_fisheye_keeps_center_and_changes_the_rest(image):
  sample = ops.fisheye(image, (16.0, 16.0), 0.25, 4)
  assert sample.info['twist'] == 0.25
  assert not np.allclose(sample.input, image)
  with pytest.raises(DegradationParamError):
    ops.fisheye(image, (40.0, 16.0), 0.2, 4)
  with pytest.raises(DegradationParamError):
    ops.fisheye(image, (16.0, 16.0), 1.0, 4)


def test_fisheye_radius_fixes_the_rim():
  rho = np.array([0.0, 1.0])
  np.testing.assert_array_equal(ops.fisheye_radius(rho, 0.3), rho)
  assert ops.fisheye_radius(np.array([0.5]), 0.2)[0] == pytest.approx(0.45)


def test_wave_zero_amplitude_is_identity(image):
  np.testing.assert_array_equal(ops.wave_distort(image, 0.0, 8.0, 4).input, image)


def test_wave_integer_shift_permutes_rows(image):
  # Period 4 gives shifts 0, 1, 0, -1 for amplitude 1.
  out = ops.wave_distort(image, 1.0, 4.0, 4).input
  np.testing.assert_array_equal(out[:, 0], image[:, 0])
  np.testing.assert_allclose(out[:, 1], np.roll(image[:, 1], -1, axis=-1), atol=1e-7)
  np.testing.assert_allclose(out[:, 3], np.roll(image[:, 3], 1, axis=-1), atol=1e-7)


def test_blur_kernels():
  k = ops.blur_kernel(5, Rng(2))
  assert k.shape == (5, 5)
  assert (k >= 0).all()
  assert k.sum() == pytest.approx(1.0)
  delta = ops.blur_kernel(3, None, 'delta')
  assert delta[1, 1] == 1.0 and delta.sum() == 1.0
  raw = ops.blur_kernel(5, Rng(2), 'raw_normal')
  np.testing.assert_allclose(np.abs(raw) / np.abs(raw).sum(), k)
  with pytest.raises(DegradationParamError):
    ops.blur_kernel(4, Rng(2))
  with pytest.raises(DegradationParamError):
    ops.blur_kernel(3, None)


def test_delta_blur_is_identity(image):
  np.testing.assert_allclose(ops.blur(image, 3, None, 'delta', 4).input, image, atol=1e-6)


def test_blur_smooths(image):
  out = ops.blur(image, 5, Rng(1), 'random_normal', 4).input
  assert out.std() < image.std()
  assert out.min() >= 0.0 and out.max() <= 1.0


def test_blur_keeps_a_constant_image_constant():
  flat = np.full((3, 16, 16), 0.4, dtype=np.float32)
  for seed in range(5):
    out = ops.blur(flat, 5, Rng(seed), 'random_normal', 4).input
    np.testing.assert_allclose(out, 0.4, atol=1e-6)


def test_desaturate(image):
  np.testing.assert_allclose(ops.desaturate(image, 1.0, 4).input, image, atol=1e-6)
  gray = ops.desaturate(image, 0.0, 4).input
  np.testing.assert_allclose(gray[0], gray[1], atol=1e-6)
  np.testing.assert_allclose(gray[1], gray[2], atol=1e-6)
  # Zero saturation keeps the HSV value, the per-pixel maximum.
  np.testing.assert_allclose(gray[0], image.max(axis=0), atol=1e-6)
  with pytest.raises(DegradationParamError):
    ops.desaturate(image, 1.5, 4)


def test_desaturate_pure_red_to_white():
  red = np.zeros((3, 4, 4), dtype=np.float32)
  red[0] = 1.0
  out = ops.desaturate(red, 0.0, 4).input
  np.testing.assert_allclose(out, np.ones_like(red), atol=1e-6)


def test_shuffle_round_trip(image):
  sample = ops.shuffle_patches(image, 8, Rng(4))
  assert sorted(sample.permutation.tolist()) == list(range(16))
  np.testing.assert_array_equal(ops.unshuffle_patches(sample, 8), image)
  identity = ops.shuffle_patches(image, 8, permutation=np.arange(16))
  np.testing.assert_array_equal(identity.input, image)
  with pytest.raises(DegradationParamError):
    ops.shuffle_patches(image, 8, permutation=np.zeros(16, dtype=int))


def test_shuffle_keeps_the_multiset_of_patches(image):
  for seed in range(5):
    sample = ops.shuffle_patches(image, 8, Rng(seed))
    before = patchify_array(image, 8)
    after = patchify_array(sample.input, 8)
    assert sorted(map(tuple, before.tolist())) == sorted(map(tuple, after.tolist()))
    np.testing.assert_array_equal(np.sort(sample.input, axis=None), np.sort(image, axis=None))
    np.testing.assert_array_equal(after, before[sample.permutation])


def test_integrated_crops_the_center_of_the_aux_canvas(gen):
  big = gen.uniform(size=(3, 60, 60)).astype(np.float32)
  sample = ops.integrated(big, 32, 44, 4, 0.75, Rng(9))
  assert sample.aux.shape == (3, 44, 44)
  np.testing.assert_array_equal(sample.target, sample.aux[:, 6:38, 6:38])
  assert (~sample.visible_mask).sum() == 48
  assert sample.masked_only
  small = ops.integrated(gen.uniform(size=(3, 32, 32)), 32, 44, 4, 0.75, Rng(9))
  assert small.aux.shape == (3, 44, 44)


def test_area_matrix_rows_sum_to_one():
  for n_in, n_out in [(32, 44), (44, 32), (7, 3), (5, 5)]:
    m = area_matrix(n_in, n_out)
    assert m.shape == (n_out, n_in)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
  np.testing.assert_array_equal(area_matrix(4, 4), np.eye(4))


def test_resize_equal_size_is_a_copy(image):
  out = resize_bilinear(image, 32, 32)
  np.testing.assert_array_equal(out, image)
  assert out is not image


def test_default_spec_scales_to_the_canvas():
  spec = DegradationSpec.default('zoomed_in', 32, 4)
  assert spec.zoom_side == 24
  assert spec.aux_side == 44
  assert spec.kernel_size == 3
  assert spec.num_tokens == 64
  full = DegradationSpec.default('zoomed_in')
  assert (full.zoom_side, full.aux_side, full.kernel_size) == (160, 320, 9)
  assert full.num_tokens == 196
  tiny = DegradationSpec.default('integrated', 8, 4)
  assert (tiny.zoom_side, tiny.aux_side) == (4, 12)


def test_spec_collects_every_problem():
  spec = DegradationSpec.default('zoomed_in', 32, 4, zoom_side=30, mask_ratio=1.0,
                                 kernel_size=4)
  problems = spec.problems()
  assert len(problems) == 3
  with pytest.raises(DegradationParamError):
    spec.validate()
  assert DegradationSpec.default('nope', 32, 4).problems()


def test_spec_random_zoom_only_for_zoomed_out():
  assert DegradationSpec.default('zoomed_out', 32, 4, zoom_side='rand').problems() == []
  assert DegradationSpec.default('zoomed_in', 32, 4, zoom_side='rand').problems()


@pytest.mark.parametrize('task', degrade.TASKS)
def test_make_sample_every_task(task, image):
  spec = DegradationSpec.default(task, 32, 4, pad_mode='mirror')
  sample = make_sample(spec, image, Rng(0).derive('sample', 1))
  assert sample.target.shape == (3, 32, 32)
  assert sample.visible_mask.shape == (64,)
  assert sample.input.min() >= 0.0 and sample.input.max() <= 1.0
  again = make_sample(spec, image, Rng(0).derive('sample', 1))
  np.testing.assert_array_equal(sample.input, again.input)
  np.testing.assert_array_equal(sample.visible_mask, again.visible_mask)


def test_make_sample_rejects_wrong_size(image):
  with pytest.raises(GeometryError):
    make_sample(DegradationSpec.default('masked', 16, 4), image, Rng(0))


def test_other_image_padding_needs_candidates(image):
  spec = DegradationSpec.default('zoomed_out', 32, 4, pad_mode='other_image')
  with pytest.raises(DegradationParamError):
    make_sample(spec, image, Rng(0))
  sample = make_sample(spec, image, Rng(0), [np.zeros_like(image)])
  assert sample.input.shape == image.shape


def test_factor_table_matches_reference():
  assert degrade.render_factor_table() == degrade.FACTOR_TABLE_REFERENCE
  assert degrade.factor_tags('shuffled').derived
  assert degrade.render_factor_row('integrated') == '(m)+(a) integrated: IM=Y ST=Y SC=N'
  with pytest.raises(DegradationParamError):
    degrade.factor_tags('sharpened')
