"""Differentiable primitives.

Each primitive computes its forward result with numpy and, when a Tape is active and an operand
requires a gradient, records a backward closure holding the intermediates it needs.

Binary primitives broadcast over leading batch axes only: one operand's shape must be a suffix of
the other's (a bias of shape (D,) against activations of shape (B, T, D), for instance).
"""

import math
import typing

import numpy as np

from pretext_eval.util import ShapeError, ValidationError
from . import Tensor, current_tape


TensorLike = typing.Union[Tensor, np.ndarray, float]


def _as_tensor(x, ref : typing.Optional[Tensor] = None) -> Tensor:
  if isinstance(x, Tensor):
    return x
  dtype = ref.dtype if ref is not None else None
  return Tensor._wrap(np.asarray(x, dtype=dtype))


def _operands(a, b) -> typing.Tuple[Tensor, Tensor]:
  ref = a if isinstance(a, Tensor) else b
  if not isinstance(ref, Tensor):
    raise TypeError('at least one operand must be a Tensor')
  return _as_tensor(a, ref), _as_tensor(b, ref)


def _emit(op : str, out_data : np.ndarray, inputs, backward_fn) -> Tensor:
  out = Tensor._wrap(out_data)
  tape = current_tape()
  if tape is not None and any(t.requires_grad for t in inputs):
    tape.record(op, out, inputs, backward_fn)
  return out


def _is_suffix(short, long) -> bool:
  short, long = tuple(short), tuple(long)
  return len(short) <= len(long) and long[len(long) - len(short):] == short


def _check_leading_broadcast(a_shape, b_shape, op : str):
  if _is_suffix(b_shape, a_shape) or _is_suffix(a_shape, b_shape):
    return
  raise ShapeError(f'{op}: shapes {tuple(a_shape)} and {tuple(b_shape)} are not '
                   'broadcast-compatible (only leading batch axes may differ)')


def _reduce_to(g : np.ndarray, shape) -> np.ndarray:
  shape = tuple(shape)
  if g.shape == shape:
    return g
  return g.sum(axis=tuple(range(g.ndim - len(shape))))


def matmul(a : TensorLike, b : TensorLike) -> Tensor:
  """c[..., i, j] = sum_t a[..., i, t] * b[..., t, j]."""
  a, b = _operands(a, b)
  if a.ndim < 2 or b.ndim < 2:
    raise ShapeError(f'matmul: operands need at least 2 axes, got {a.shape} and {b.shape}')
  if a.shape[-1] != b.shape[-2]:
    raise ShapeError(f'matmul: inner extents differ: {a.shape} @ {b.shape}')
  _check_leading_broadcast(a.shape[:-2], b.shape[:-2], 'matmul')

  def backward_fn(g):
    ga = gb = None
    if a.requires_grad:
      ga = _reduce_to(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
    if b.requires_grad:
      if b.ndim == 2 and a.ndim > 2:
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
      else:
        gb = _reduce_to(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
    return ga, gb

  return _emit('matmul', np.matmul(a.data, b.data), (a, b), backward_fn)


def add(a : TensorLike, b : TensorLike) -> Tensor:
  a, b = _operands(a, b)
  _check_leading_broadcast(a.shape, b.shape, 'add')

  def backward_fn(g):
    return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

  return _emit('add', a.data + b.data, (a, b), backward_fn)


def sub(a : TensorLike, b : TensorLike) -> Tensor:
  a, b = _operands(a, b)
  _check_leading_broadcast(a.shape, b.shape, 'sub')

  def backward_fn(g):
    return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

  return _emit('sub', a.data - b.data, (a, b), backward_fn)


def mul(a : TensorLike, b : TensorLike) -> Tensor:
  a, b = _operands(a, b)
  _check_leading_broadcast(a.shape, b.shape, 'mul')

  def backward_fn(g):
    ga = _reduce_to(g * b.data, a.shape) if a.requires_grad else None
    gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
    return ga, gb

  return _emit('mul', a.data * b.data, (a, b), backward_fn)


def scale(a : Tensor, factor : float) -> Tensor:
  factor = a.dtype.type(factor)
  return _emit('scale', a.data * factor, (a,), lambda g: (g * factor,))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu_derivative(x : np.ndarray) -> np.ndarray:
  """d/dx of the tanh-approximated GELU."""
  c = x.dtype.type(_GELU_C)
  k = x.dtype.type(_GELU_K)
  t = np.tanh(c * (x + k * x ** 3))
  return 0.5 * (1 + t) + 0.5 * x * (1 - t * t) * c * (1 + 3 * k * x * x)


def gelu(a : Tensor) -> Tensor:
  """GELU with the tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
  x = a.data
  c = x.dtype.type(_GELU_C)
  k = x.dtype.type(_GELU_K)
  out = 0.5 * x * (1 + np.tanh(c * (x + k * x ** 3)))
  # Looked up at backward time so a replaced rule is picked up by already-recorded entries.
  return _emit('gelu', out, (a,), lambda g: (g * gelu_derivative(x),))


_ELEMENTWISE = {
    'add': add,
    'sub': sub,
    'mul': mul,
}


def elementwise(op : str, a : TensorLike, b : typing.Optional[TensorLike] = None,
                factor : typing.Optional[float] = None) -> Tensor:
  """Dispatch one of add, sub, mul, scale or gelu by name."""
  if op in _ELEMENTWISE:
    if b is None:
      raise ValidationError(f'elementwise {op} needs two operands')
    return _ELEMENTWISE[op](a, b)
  if op == 'scale':
    if factor is None:
      raise ValidationError('elementwise scale needs a factor')
    return scale(_as_tensor(a), factor)
  if op == 'gelu':
    return gelu(_as_tensor(a))
  raise ValidationError(f'unknown elementwise op {op!r}')


def softmax(x : Tensor) -> Tensor:
  """Softmax over the last axis, computed after subtracting the row max."""
  if x.ndim == 0 or x.shape[-1] < 1:
    raise ShapeError(f'softmax needs a non-empty last axis, got shape {x.shape}')
  z = x.data - x.data.max(axis=-1, keepdims=True)
  e = np.exp(z)
  y = e / e.sum(axis=-1, keepdims=True)

  def backward_fn(g):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

  return _emit('softmax', y, (x,), backward_fn)


def layer_norm(x : Tensor, gamma : Tensor, beta : Tensor, eps : float = 1e-6) -> Tensor:
  """Normalize the last axis to zero mean / unit variance, then apply gamma * x + beta."""
  d = x.shape[-1] if x.ndim else 0
  if d < 1:
    raise ShapeError(f'layer_norm needs a non-empty last axis, got shape {x.shape}')
  if gamma.shape != (d,) or beta.shape != (d,):
    raise ShapeError(f'layer_norm: gamma {gamma.shape} / beta {beta.shape} must be ({d},)')
  if eps <= 0:
    raise ValidationError(f'layer_norm eps must be positive, got {eps}')

  mu = x.data.mean(axis=-1, keepdims=True)
  xc = x.data - mu
  var = (xc * xc).mean(axis=-1, keepdims=True)
  inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
  xhat = xc * inv
  out = xhat * gamma.data + beta.data

  def backward_fn(g):
    gx = None
    if x.requires_grad:
      gh = g * gamma.data
      gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                  - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
    return gx, _reduce_to(g * xhat, (d,)), _reduce_to(g, (d,))

  return _emit('layer_norm', out, (x, gamma, beta), backward_fn)


def _selection(mask, shape) -> np.ndarray:
  m = np.asarray(mask, dtype=bool)
  if m.shape != tuple(shape):
    if m.ndim <= len(shape) and tuple(shape[:m.ndim]) == m.shape:
      m = m.reshape(m.shape + (1,) * (len(shape) - m.ndim))
    try:
      m = np.broadcast_to(m, shape)
    except ValueError as err:
      raise ShapeError(f'mse: mask of shape {np.shape(mask)} does not fit {shape}') from err
  return m


def mse(pred : Tensor, target : TensorLike, mask=None) -> Tensor:
  """Mean squared error over the selected elements.

  Params
  ------
  pred : Tensor
      Prediction.
  target : Tensor or array
      Same shape as pred.
  mask : Optional[array of bool]
      Selected elements. Either broadcastable to pred, or matching pred's leading axes (a
      per-token mask against (B, M, K) predictions). Unselected elements contribute nothing to
      the value and receive zero gradient.
  """
  target = _as_tensor(target, pred)
  if pred.shape != target.shape:
    raise ShapeError(f'mse: prediction {pred.shape} and target {target.shape} differ')
  diff = pred.data - target.data
  if mask is None:
    selected = None
    n = diff.size
    sq = diff * diff
  else:
    selected = _selection(mask, pred.shape)
    n = int(np.count_nonzero(selected))
    diff = np.where(selected, diff, diff.dtype.type(0))
    sq = diff * diff
  value = sq.sum() / diff.dtype.type(n) if n else diff.dtype.type(0)

  def backward_fn(g):
    if n == 0:
      gp = np.zeros_like(diff)
    else:
      gp = g * diff * (pred.dtype.type(2) / pred.dtype.type(n))
    return gp, -gp

  return _emit('mse', np.asarray(value, dtype=pred.dtype), (pred, target), backward_fn)


def sum(a : Tensor, axis=None) -> Tensor:  # pylint: disable=redefined-builtin
  out = a.data.sum(axis=axis)

  def backward_fn(g):
    if axis is None:
      return (np.broadcast_to(g, a.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

  return _emit('sum', np.asarray(out, dtype=a.dtype), (a,), backward_fn)


def mean(a : Tensor) -> Tensor:
  return scale(sum(a), 1.0 / a.size)


def reshape(a : Tensor, shape) -> Tensor:
  shape = tuple(shape)
  try:
    out = a.data.reshape(shape)
  except ValueError as err:
    raise ShapeError(f'cannot reshape {a.shape} to {shape}') from err
  return _emit('reshape', out, (a,), lambda g: (g.reshape(a.shape),))


def permute(a : Tensor, axes) -> Tensor:
  axes = tuple(axes)
  if sorted(axes) != list(range(a.ndim)):
    raise ShapeError(f'permute: {axes} is not a permutation of {a.ndim} axes')
  inverse = tuple(np.argsort(axes))
  return _emit('permute', np.transpose(a.data, axes), (a,),
               lambda g: (np.transpose(g, inverse),))


def _is_basic_index(index) -> bool:
  items = index if isinstance(index, tuple) else (index,)
  return all(isinstance(i, (int, slice, type(Ellipsis), type(None))) for i in items)


def getitem(a : Tensor, index) -> Tensor:
  """numpy indexing (basic or advanced); repeated advanced indices accumulate gradients."""
  out = np.array(a.data[index], copy=True)
  basic = _is_basic_index(index)

  def backward_fn(g):
    ga = np.zeros_like(a.data)
    if basic:
      ga[index] = g
    else:
      np.add.at(ga, index, g)
    return (ga,)

  return _emit('getitem', out, (a,), backward_fn)


def concat(tensors : typing.Sequence[Tensor], axis : int = 0) -> Tensor:
  tensors = tuple(tensors)
  if not tensors:
    raise ShapeError('concat needs at least one tensor')
  try:
    out = np.concatenate([t.data for t in tensors], axis=axis)
  except ValueError as err:
    raise ShapeError(f'concat: incompatible shapes {[t.shape for t in tensors]}') from err
  offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

  def backward_fn(g):
    return tuple(np.split(g, offsets, axis=axis))

  return _emit('concat', out, tensors, backward_fn)


def broadcast_to(a : Tensor, shape) -> Tensor:
  """Repeat `a` over new leading axes."""
  shape = tuple(shape)
  if not _is_suffix(a.shape, shape):
    raise ShapeError(f'broadcast_to: {a.shape} is not a suffix of {shape}')
  out = np.broadcast_to(a.data, shape).copy()
  return _emit('broadcast_to', out, (a,), lambda g: (_reduce_to(g, a.shape),))


def log_softmax(x : np.ndarray) -> np.ndarray:
  z = x - x.max(axis=-1, keepdims=True)
  return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits : Tensor, labels) -> Tensor:
  """Mean negative log-likelihood of integer labels under softmax(logits)."""
  labels = np.asarray(labels, dtype=np.int64)
  if logits.ndim != 2 or labels.shape != (logits.shape[0],):
    raise ShapeError(f'cross_entropy: logits {logits.shape} vs labels {labels.shape}')
  num_classes = logits.shape[1]
  if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
    raise ValidationError(f'cross_entropy: labels outside [0, {num_classes})')
  logp = log_softmax(logits.data)
  rows = np.arange(labels.size)
  n = logits.dtype.type(max(labels.size, 1))
  value = -logp[rows, labels].sum() / n

  def backward_fn(g):
    probs = np.exp(logp)
    probs[rows, labels] -= 1
    return (g * probs / n,)

  return _emit('cross_entropy', np.asarray(value, dtype=logits.dtype), (logits,), backward_fn)
