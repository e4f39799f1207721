"""The pre-train, fine-tune and probe loops, accuracy evaluation and recovery of single images.

Every random draw of a run derives from the run seed: sample s of epoch e uses the stream
('epoch', e) / ('sample', s), keyed by the sample's dataset index rather than its batch position,
and the epoch order uses ('order', e). With one worker, or with seeded shards, a run is a pure
function of (seed, config); a resumed run continues exactly where the checkpoint left off.
"""

import collections
import concurrent.futures
import functools
import logging
import math
import os
import typing

import attr
import numpy as np

from pretext_eval.dataset import Dataset
from pretext_eval.degrade import DegradationSpec, make_sample
from pretext_eval.degrade.rng import Rng
from pretext_eval.engine import ParamSet, Tape, Tensor, backward
from pretext_eval.engine import ops
from pretext_eval.model import ViTConfig
from pretext_eval.model import vit
from pretext_eval.model.objectives import LossBreakdown, integrated_loss, recovery_loss
from pretext_eval.model.patch_ops import (denormalize_array, normalize_array, patchify_array,
                                          unpatchify_array)
from pretext_eval.util import NonFiniteError, RuntimeFailure, ValidationError
from pretext_eval.util import checkpoint_util
from pretext_eval.util.metrics_util import MetricsRecord, MetricsSink, Stopwatch
from . import OptimizerState, RunPlan, TrainConfig
from .augment import augment
from .optim import adamw_step, cosine_lr, param_lr_scales


_LOG = logging.getLogger(__name__)

CHECKPOINT_NAME = 'checkpoint.vtpt'
METRICS_NAME = 'metrics.csv'
EVAL_BATCH = 256


@attr.s(auto_attribs=True)
class PhaseResult:
  """What a training phase produced.

  Attributes
  ----------
  params : ParamSet
      Final parameters.
  state : OptimizerState
      Final optimizer state.
  records : List[MetricsRecord]
      Rows emitted by this call, in order.
  accuracy : Optional[float]
      Final top-1 accuracy (fine-tuning and probing).
  checkpoint : Optional[str]
      Path of the last checkpoint written.
  """

  params : ParamSet
  state : OptimizerState
  records : typing.List[MetricsRecord] = attr.Factory(list)
  accuracy : typing.Optional[float] = None
  checkpoint : typing.Optional[str] = None


@attr.s(auto_attribs=True)
class RecoveryBatch:
  """Degraded pre-training inputs of one step, as patches of the model canvas."""

  inputs : np.ndarray
  targets : np.ndarray
  visible : np.ndarray
  aux : typing.Optional[np.ndarray]
  masked_only : bool


@attr.s(auto_attribs=True)
class LabelledBatch:
  patches : np.ndarray
  labels : np.ndarray


@attr.s(auto_attribs=True)
class Recovery:
  """One recovered image.

  Attributes
  ----------
  degraded : np.ndarray
      The model input on the canvas.
  reconstruction : np.ndarray
      Prediction in pixel space (de-normalized with the target's per-patch statistics).
  target : np.ndarray
      The clean image the model should recover.
  mse : float
      Mean squared pixel error between reconstruction and target.
  """

  degraded : np.ndarray
  reconstruction : np.ndarray
  target : np.ndarray
  mse : float


def sample_rng(rng : Rng, epoch : int, index : int) -> Rng:
  return rng.derive('epoch', epoch).derive('sample', int(index))


def epoch_batches(num_images : int, batch_size : int, rng : Rng,
                  epoch : int) -> typing.List[np.ndarray]:
  """Dataset indices of every step of `epoch`; the last batch may be short."""
  order = rng.derive('order', epoch).generator().permutation(num_images)
  return [order[i:i + batch_size] for i in range(0, num_images, batch_size)]


def prefetch(fn : typing.Callable, jobs : typing.Sequence, workers : int = 1,
             ordered : bool = True) -> typing.Iterator:
  """Yield fn(job) for every job, computing up to 2 * workers results ahead.

  With ordered=False results come back as soon as they are ready, so their order may differ
  between runs.
  """
  if workers <= 1:
    for job in jobs:
      yield fn(job)
    return
  with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
    pending : typing.Deque[concurrent.futures.Future] = collections.deque()
    for job in jobs:
      pending.append(pool.submit(fn, job))
      if len(pending) >= 2 * workers:
        yield _next_result(pending, ordered)
    while pending:
      yield _next_result(pending, ordered)


def _next_result(pending, ordered):
  if ordered:
    return pending.popleft().result()
  done, _ = concurrent.futures.wait(pending, return_when=concurrent.futures.FIRST_COMPLETED)
  future = min(done, key=list(pending).index)
  pending.remove(future)
  return future.result()


def _train_image(img : np.ndarray, rng : Rng, train : TrainConfig, side : int) -> np.ndarray:
  if train.augment:
    return augment(img, rng.derive('augment'), 'pretrain', side, (train.crop_scale_min, 1.0))
  return augment(img, None, 'eval', side)


def recovery_batch(indices : np.ndarray, dataset : Dataset, model : ViTConfig, train : TrainConfig,
                   rng : Rng, epoch : int) -> RecoveryBatch:
  """Augment and degrade the images at `indices`."""
  images = [_train_image(dataset.images[i], sample_rng(rng, epoch, i), train, model.image_side)
            for i in indices]
  samples = []
  for k, i in enumerate(indices):
    others = images[:k] + images[k + 1:]
    samples.append(make_sample(train.spec, images[k],
                               sample_rng(rng, epoch, i).derive('degrade'), others))
  p = model.patch_size
  aux = np.stack([s.aux for s in samples]) if samples[0].aux is not None else None
  return RecoveryBatch(
      inputs=patchify_array(np.stack([s.canvas_input() for s in samples]), p),
      targets=patchify_array(np.stack([s.target for s in samples]), p),
      visible=np.stack([s.visible_mask for s in samples]),
      aux=aux,
      masked_only=samples[0].masked_only)


def labelled_batch(indices : np.ndarray, dataset : Dataset, model : ViTConfig, train : TrainConfig,
                   rng : Rng, epoch : int) -> LabelledBatch:
  images = [_train_image(dataset.images[i], sample_rng(rng, epoch, i), train, model.image_side)
            for i in indices]
  return LabelledBatch(patchify_array(np.stack(images), model.patch_size),
                       dataset.labels[indices])


def recovery_step_loss(params : ParamSet, model : ViTConfig, train : TrainConfig,
                       batch : RecoveryBatch, rng : typing.Optional[Rng] = None) -> LossBreakdown:
  pred = vit.forward_recovery(batch.inputs, batch.visible, params, model, rng)
  if batch.aux is not None:
    return integrated_loss(pred, batch.targets, batch.aux, batch.visible, model.patch_size,
                           train.outer_weight)
  return recovery_loss(pred, batch.targets, batch.visible, train.normalized_targets,
                       batch.masked_only)


def classify(params : ParamSet, model : ViTConfig, patches : np.ndarray, probe_blocks : int = 0,
             rng : typing.Optional[Rng] = None) -> Tensor:
  """(B, C) class-token logits of full, unmasked images."""
  visible = np.ones(patches.shape[:2], dtype=bool)
  tb = vit.encode(vit.embed_tokens(patches, visible, params, model), params, model, rng)
  if probe_blocks:
    return vit.probe_nonlinear(tb, probe_blocks, params, model)
  return vit.classify_linear(tb, params)


def evaluate(params : ParamSet, model : ViTConfig, dataset : Dataset, probe_blocks : int = 0,
             batch_size : int = EVAL_BATCH) -> float:
  """Top-1 accuracy: correct / total over the whole dataset, center-cropped to the canvas."""
  if not len(dataset):
    raise ValidationError('cannot measure accuracy on an empty dataset')
  correct = 0
  for start in range(0, len(dataset), batch_size):
    stop = min(start + batch_size, len(dataset))
    images = np.stack([augment(dataset.images[i], None, 'eval', model.image_side)
                       for i in range(start, stop)])
    logits = classify(params, model, patchify_array(images, model.patch_size), probe_blocks)
    correct += int((logits.data.argmax(axis=-1) == dataset.labels[start:stop]).sum())
  return correct / len(dataset)


def _apply_update(params : ParamSet, trainable : ParamSet, state : OptimizerState, lr : float,
                  train : TrainConfig, lr_scales : typing.Optional[typing.Dict[str, float]],
                  compute : typing.Callable[[], LossBreakdown]) -> LossBreakdown:
  trainable.zero_grad()
  with Tape() as tape:
    loss = compute()
  if not math.isfinite(loss.total_value):
    raise NonFiniteError(f'{train.phase} loss became {loss.total_value} at step '
                         f'{state.step + 1}')
  backward(tape, loss.total, trainable)
  grads = {name: t.grad for name, t in trainable.items()}
  adamw_step(params, grads, state, lr, train.weight_decay, train.betas, train.eps, lr_scales)
  return loss


def save_checkpoint(out_dir : str, plan : RunPlan, params : ParamSet, state : OptimizerState,
                    epoch : int, meta : typing.Optional[typing.Dict] = None,
                    keep_epoch : bool = False) -> str:
  """Write params, optimizer moments and bookkeeping to `out_dir`/checkpoint.vtpt."""
  tensors = {name: t.data for name, t in params.items()}
  tensors.update(state.to_tensors())
  full_meta = {'phase': plan.train.phase, 'epoch': epoch, 'step': state.step,
               'model': attr.asdict(plan.model)}
  if plan.train.spec is not None:
    full_meta['task'] = plan.train.spec.task
  full_meta.update(meta or {})
  ckpt = checkpoint_util.Checkpoint(dict(plan.config), tensors, full_meta)
  path = os.path.join(out_dir, CHECKPOINT_NAME)
  checkpoint_util.save(path, ckpt)
  if keep_epoch:
    checkpoint_util.save(os.path.join(out_dir, f'checkpoint-e{epoch:04d}.vtpt'), ckpt)
  _LOG.info('wrote %s checkpoint after epoch %d (step %d) to %s', plan.train.phase, epoch,
            state.step, path)
  return path


def model_from_checkpoint(ckpt : checkpoint_util.Checkpoint) -> ViTConfig:
  try:
    return ViTConfig(**ckpt.meta['model']).validate()
  except (KeyError, TypeError) as err:
    raise ValidationError(f'checkpoint does not record a usable model geometry: {err}') from err


def params_from_checkpoint(ckpt : checkpoint_util.Checkpoint, model : ViTConfig,
                           prefixes : typing.Sequence[str], decoder : bool = False,
                           head : bool = False, probe_blocks : int = 0) -> ParamSet:
  """The checkpoint tensors under `prefixes`, checked against the shapes `model` expects."""
  expected = {name: shape for name, shape in
              vit.param_shapes(model, decoder, head, probe_blocks).items()
              if name.startswith(tuple(prefixes))}
  problems = []
  params = ParamSet()
  for name, shape in sorted(expected.items()):
    if name not in ckpt.tensors:
      problems.append(f'checkpoint lacks {name}')
    elif ckpt.tensors[name].shape != tuple(shape):
      problems.append(f'checkpoint {name} has shape {ckpt.tensors[name].shape}, the model '
                      f'needs {tuple(shape)}')
    else:
      params[name] = Tensor(ckpt.tensors[name], requires_grad=True)
  if problems:
    raise ValidationError(problems)
  return params


def _resumes(ckpt : typing.Optional[checkpoint_util.Checkpoint], phase : str) -> bool:
  return ckpt is not None and ckpt.meta.get('phase') == phase


def _record(train : TrainConfig, epoch : int, state : OptimizerState, lr : float, **fields):
  return MetricsRecord(run_id=train.run_id, phase=train.phase, epoch=epoch, step=state.step,
                       lr=lr, seed=train.seed, **fields)


def _run_epochs(plan : RunPlan, params : ParamSet, trainable : ParamSet, state : OptimizerState,
                num_images : int, start_epoch : int, make_batch : typing.Callable,
                loss_of : typing.Callable, out_dir : typing.Optional[str],
                lr_scales : typing.Optional[typing.Dict[str, float]] = None,
                measure : typing.Optional[typing.Callable[[], float]] = None,
                meta : typing.Optional[typing.Dict] = None) -> PhaseResult:
  train = plan.train
  rng = Rng(train.seed)
  total = train.total_steps(num_images)
  sink = MetricsSink(os.path.join(out_dir, METRICS_NAME)) if out_dir else None
  result = PhaseResult(params, state)
  classifying = train.phase != 'pretrain'

  if classifying and start_epoch == 0:
    acc = measure() if measure else None
    result.records.append(_record(train, 0, state, 0.0, acc_top1=acc).check())
    result.accuracy = acc
    if sink:
      sink.append(result.records[-1:])

  for epoch in range(start_epoch, train.epochs):
    watch = Stopwatch(train.record_wall_time)
    jobs = epoch_batches(num_images, train.batch_size, rng, epoch)
    sums = collections.Counter()
    steps = 0
    lr = 0.0
    for batch in prefetch(functools.partial(make_batch, epoch=epoch), jobs, train.num_workers,
                          ordered=train.seeded_shards or train.num_workers == 1):
      lr = cosine_lr(state.step, total, train.peak_lr, train.warmup_fraction)
      drop_rng = rng.derive('dropout', state.step)
      loss = _apply_update(params, trainable, state, lr, train, lr_scales,
                           functools.partial(loss_of, batch, drop_rng))
      sums['total'] += loss.total_value
      sums['center'] += loss.center_term
      sums['outer'] += loss.outer_term
      steps += 1
      if state.step % train.log_every == 0:
        _LOG.debug('%s step %d: loss %.6f lr %.3e', train.phase, state.step,
                   loss.total_value, lr)
    mean = {k: v / steps for k, v in sums.items()}
    acc = measure() if measure else None
    fields = dict(loss_total=mean['total'], acc_top1=acc, wall_ms=watch.elapsed_ms())
    if not classifying:
      fields['loss_center'] = mean['center']
      if train.spec.task == 'integrated':
        fields['loss_outer'] = mean['outer']
    record = _record(train, epoch + 1, state, lr, **fields).check()
    result.records.append(record)
    result.accuracy = acc
    if sink:
      sink.append([record])
    _LOG.info('%s epoch %d/%d: loss %.6f lr %.3e%s', train.phase, epoch + 1, train.epochs,
              mean['total'], lr, '' if acc is None else f' acc {acc:.4f}')
    _LOG.debug('%s epoch %d params %s', train.phase, epoch + 1, params.digest()[:16])

    last = epoch + 1 == train.epochs
    cadence = train.checkpoint_every and (epoch + 1) % train.checkpoint_every == 0
    if out_dir and (last or cadence):
      result.checkpoint = save_checkpoint(out_dir, plan, params, state, epoch + 1, meta,
                                          keep_epoch=bool(cadence))
  return result


def _guard(out_dir : typing.Optional[str], phase : str):
  """Log which checkpoint survives a run aborted on a non-finite value."""
  path = os.path.join(out_dir, CHECKPOINT_NAME) if out_dir else None
  if path and os.path.exists(path):
    _LOG.error('%s aborted; the last good checkpoint %s is kept', phase, path)
  else:
    _LOG.error('%s aborted before any checkpoint was written', phase)


def pretrain(plan : RunPlan, dataset : Dataset, out_dir : typing.Optional[str] = None,
             resume : typing.Optional[checkpoint_util.Checkpoint] = None) -> PhaseResult:
  """Train the encoder and decoder to recover clean images from degraded ones.

  Params
  ------
  plan : RunPlan
      Model, optimization and degradation settings.
  dataset : Dataset
      Training images; labels are ignored.
  out_dir : Optional[str]
      Where metrics.csv and checkpoints go. Nothing is written when None.
  resume : Optional[Checkpoint]
      A pre-training checkpoint to continue from.

  Raises
  ------
  ValidationError :
      On an empty dataset or a checkpoint that does not fit the model.
  NonFiniteError :
      When the loss or a gradient stops being finite; the last checkpoint written stays.
  """
  model, train = plan.model.validate(), plan.train.validate()
  if not len(dataset):
    raise ValidationError('pre-training needs at least one image')
  rng = Rng(train.seed)
  if resume is not None:
    if not _resumes(resume, 'pretrain'):
      raise ValidationError(f'cannot resume pre-training from a {resume.meta.get("phase")} '
                            'checkpoint')
    params = params_from_checkpoint(resume, model, vit.ENCODER_PREFIXES + vit.DECODER_PREFIXES,
                                    decoder=True)
    state = OptimizerState.from_tensors(resume.tensors, resume.meta['step'])
    start = int(resume.meta['epoch'])
    _LOG.info('resuming pre-training at epoch %d (step %d)', start, state.step)
  else:
    params = vit.init_params(model, rng.derive('model'), decoder=True, head=False)
    state = OptimizerState()
    start = 0
  params.set_requires_grad(True)
  _LOG.info('pre-training %s on %d images: %d parameters, %d epochs of %d steps',
            train.spec.task, len(dataset), params.numel(), train.epochs,
            train.steps_per_epoch(len(dataset)))

  def make_batch(indices, epoch):
    return recovery_batch(indices, dataset, model, train, rng, epoch)

  def loss_of(batch, drop_rng):
    return recovery_step_loss(params, model, train, batch, drop_rng)

  try:
    return _run_epochs(plan, params, params, state, len(dataset), start, make_batch, loss_of,
                       out_dir)
  except NonFiniteError:
    _guard(out_dir, 'pre-training')
    raise


def _check_classes(model : ViTConfig, dataset : Dataset, eval_dataset : typing.Optional[Dataset]):
  problems = []
  if model.num_classes != dataset.num_classes:
    problems.append(f'model has {model.num_classes} classes, training data has '
                    f'{dataset.num_classes}')
  if eval_dataset is not None and eval_dataset.num_classes != model.num_classes:
    problems.append(f'model has {model.num_classes} classes, evaluation data has '
                    f'{eval_dataset.num_classes}')
  if problems:
    raise ValidationError(problems)


def _fresh(model : ViTConfig, rng : Rng, prefixes : typing.Sequence[str],
           decoder : bool = False) -> ParamSet:
  return vit.init_params(model, rng.derive('model'), decoder=decoder, head=True).subset(prefixes)


def finetune(plan : RunPlan, dataset : Dataset, init : typing.Optional[checkpoint_util.Checkpoint],
             eval_dataset : typing.Optional[Dataset] = None,
             out_dir : typing.Optional[str] = None) -> PhaseResult:
  """Train the whole encoder and a new linear head with cross-entropy.

  Blocks use layer-wise decayed learning rates. `init` may be a pre-training checkpoint (its
  decoder is discarded), a fine-tuning checkpoint to resume, or None to start from random
  weights. Accuracy is measured on `eval_dataset`, or on the training data when it is None.
  """
  model, train = plan.model.validate(), plan.train.validate()
  if not len(dataset):
    raise ValidationError('fine-tuning needs at least one image')
  _check_classes(model, dataset, eval_dataset)
  rng = Rng(train.seed)
  prefixes = vit.ENCODER_PREFIXES + vit.HEAD_PREFIXES
  start = 0
  if _resumes(init, 'finetune'):
    params = params_from_checkpoint(init, model, prefixes, head=True)
    state = OptimizerState.from_tensors(init.tensors, init.meta['step'])
    start = int(init.meta['epoch'])
    _LOG.info('resuming fine-tuning at epoch %d (step %d)', start, state.step)
  else:
    if init is None:
      _LOG.warning('fine-tuning from random initialization')
      params = _fresh(model, rng, vit.ENCODER_PREFIXES)
    else:
      params = params_from_checkpoint(init, model, vit.ENCODER_PREFIXES)
    for name, t in _fresh(model, rng, vit.HEAD_PREFIXES).items():
      params[name] = t
    state = OptimizerState()
  params.set_requires_grad(True)
  lr_scales = param_lr_scales(params, model.depth, train.layerwise_decay)
  evaluation = eval_dataset if eval_dataset is not None else dataset

  def make_batch(indices, epoch):
    return labelled_batch(indices, dataset, model, train, rng, epoch)

  def loss_of(batch, drop_rng):
    logits = classify(params, model, batch.patches, rng=drop_rng)
    loss = ops.cross_entropy(logits, batch.labels)
    return LossBreakdown(total=loss, center=loss)

  try:
    return _run_epochs(plan, params, params, state, len(dataset), start, make_batch, loss_of,
                       out_dir, lr_scales, lambda: evaluate(params, model, evaluation))
  except NonFiniteError:
    _guard(out_dir, 'fine-tuning')
    raise


def probe(plan : RunPlan, dataset : Dataset, init : typing.Optional[checkpoint_util.Checkpoint],
          eval_dataset : typing.Optional[Dataset] = None,
          out_dir : typing.Optional[str] = None) -> PhaseResult:
  """Train a head on a frozen encoder.

  Linear probing trains head.* only; non-linear probing also trains probe_blocks transformer
  blocks inserted between the encoder and the head. The encoder's bytes are hashed before and
  after training and must not change.

  Raises
  ------
  RuntimeFailure :
      When the frozen encoder changed.
  """
  model, train = plan.model.validate(), plan.train.validate()
  if not len(dataset):
    raise ValidationError('probing needs at least one image')
  _check_classes(model, dataset, eval_dataset)
  rng = Rng(train.seed)
  blocks = train.probe_blocks if train.probe_mode == 'nonlinear' else 0
  trainable_prefixes = vit.HEAD_PREFIXES + vit.PROBE_PREFIXES
  start = 0
  if _resumes(init, 'probe'):
    params = params_from_checkpoint(init, model, vit.ENCODER_PREFIXES + trainable_prefixes,
                                    head=True, probe_blocks=blocks)
    state = OptimizerState.from_tensors(init.tensors, init.meta['step'])
    start = int(init.meta['epoch'])
  else:
    if init is None:
      _LOG.warning('probing a randomly initialized encoder')
      params = _fresh(model, rng, vit.ENCODER_PREFIXES)
    else:
      params = params_from_checkpoint(init, model, vit.ENCODER_PREFIXES)
    for name, t in _fresh(model, rng, vit.HEAD_PREFIXES).items():
      params[name] = t
    if blocks:
      vit.init_probe_blocks(params, model, blocks, rng.derive('probe'))
    state = OptimizerState()

  params.set_requires_grad(False)
  trainable = params.subset(trainable_prefixes)
  trainable.set_requires_grad(True)
  backbone = [name for name in params if name.startswith(vit.ENCODER_PREFIXES)]
  digest = params.digest(backbone)
  evaluation = eval_dataset if eval_dataset is not None else dataset
  _LOG.info('%s probe: %d trainable of %d parameters, backbone %s', train.probe_mode,
            trainable.numel(), params.numel(), digest[:16])

  def make_batch(indices, epoch):
    return labelled_batch(indices, dataset, model, train, rng, epoch)

  def loss_of(batch, drop_rng):
    logits = classify(params, model, batch.patches, blocks)
    loss = ops.cross_entropy(logits, batch.labels)
    return LossBreakdown(total=loss, center=loss)

  meta = {'backbone_digest': digest, 'probe_mode': train.probe_mode, 'probe_blocks': blocks}
  try:
    result = _run_epochs(plan, params, trainable, state, len(dataset), start, make_batch,
                         loss_of, out_dir, None, lambda: evaluate(params, model, evaluation,
                                                                  blocks), meta)
  except NonFiniteError:
    _guard(out_dir, 'probing')
    raise
  after = params.digest(backbone)
  if after != digest:
    raise RuntimeFailure(f'frozen backbone changed during probing ({digest[:16]} -> '
                         f'{after[:16]})')
  _LOG.info('pass backbone unchanged (%s)', digest[:16])
  return result


def recover(params : ParamSet, model : ViTConfig, spec : DegradationSpec, img : np.ndarray,
            rng : Rng, normalized : bool = True) -> Recovery:
  """Degrade one image, run the encoder-decoder and map the prediction back to pixels."""
  canvas = augment(img, None, 'eval', model.image_side)
  sample = make_sample(spec, canvas, rng)
  p = model.patch_size
  inputs = patchify_array(sample.canvas_input()[None], p)
  targets = patchify_array(sample.target[None], p)
  pred = vit.forward_recovery(inputs, sample.visible_mask[None], params, model).data
  if normalized:
    _, stats = normalize_array(targets)
    pred = denormalize_array(pred, stats)
  reconstruction = unpatchify_array(pred, p, model.grid)[0]
  diff = reconstruction.astype(np.float64) - sample.target.astype(np.float64)
  return Recovery(sample.canvas_input(), reconstruction, sample.target,
                  float(np.mean(diff * diff)))
