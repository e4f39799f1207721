"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy buffers. Primitive applications made while a Tape is active (and
with at least one operand that requires a gradient) are recorded on that Tape; backward() replays
the recorded entries in reverse order and accumulates gradients into the leaf tensors.

Training runs in 32-bit floats. Gradient verification switches to 64-bit floats with precision().
"""

import collections
import collections.abc
import contextlib
import hashlib
import logging
import threading
import typing

import numpy as np

from pretext_eval.util import TapeError


_LOG = logging.getLogger(__name__)


_STATE = threading.local()


def _state():
  if not hasattr(_STATE, 'dtype_stack'):
    _STATE.dtype_stack = [np.float32]
    _STATE.tape_stack = []
  return _STATE


def default_dtype() -> type:
  """Return the float dtype new Tensors are created with on this thread."""
  return _state().dtype_stack[-1]


@contextlib.contextmanager
def precision(dtype):
  """Create Tensors in `dtype` (np.float32 or np.float64) inside the with block."""
  dtype = np.dtype(dtype).type
  if dtype not in (np.float32, np.float64):
    raise ValueError(f'unsupported engine dtype: {dtype!r}')
  stack = _state().dtype_stack
  stack.append(dtype)
  try:
    yield dtype
  finally:
    stack.pop()


def _contiguous(arr : np.ndarray) -> np.ndarray:
  # np.ascontiguousarray would promote 0-d arrays to 1-d.
  return arr if arr.flags.c_contiguous else arr.copy(order='C')


def current_tape() -> typing.Optional['Tape']:
  tapes = _state().tape_stack
  return tapes[-1] if tapes else None


class Tensor:
  """A dense float tensor.

  Attributes
  ----------
  data : np.ndarray
      Row-major contiguous buffer; its shape is the tensor shape.
  requires_grad : bool
      True for trainable leaves and for every tensor computed from one under a Tape.
  grad : Optional[np.ndarray]
      Accumulated gradient, same shape as data. Only populated on leaves.
  name : Optional[str]
      Parameter name, used in diagnostics.
  """

  __slots__ = ('data', 'requires_grad', 'grad', 'name', '_produced')

  def __init__(self, data, requires_grad : bool = False, name : typing.Optional[str] = None):
    self.data = _contiguous(np.asarray(data, dtype=default_dtype()))
    self.requires_grad = requires_grad
    self.grad = None
    self.name = name
    self._produced = False

  @classmethod
  def _wrap(cls, data : np.ndarray) -> 'Tensor':
    """Wrap an op result without casting it to the thread's default dtype."""
    t = cls.__new__(cls)
    t.data = _contiguous(np.asarray(data))
    t.requires_grad = False
    t.grad = None
    t.name = None
    t._produced = False
    return t

  @property
  def shape(self) -> typing.Tuple[int, ...]:
    return self.data.shape

  @property
  def ndim(self) -> int:
    return self.data.ndim

  @property
  def size(self) -> int:
    return self.data.size

  @property
  def dtype(self):
    return self.data.dtype

  @property
  def is_leaf(self) -> bool:
    return not self._produced

  def item(self) -> float:
    return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

  def numpy(self) -> np.ndarray:
    return self.data

  def zero_grad(self):
    self.grad = None

  def detach(self) -> 'Tensor':
    return Tensor._wrap(self.data.copy())

  def __repr__(self):
    label = f' name={self.name!r}' if self.name else ''
    return f'Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})'

  # Operator sugar; the implementations live in engine.ops.
  def __add__(self, other):
    return ops.add(self, other)

  def __sub__(self, other):
    return ops.sub(self, other)

  def __mul__(self, other):
    if isinstance(other, (int, float)):
      return ops.scale(self, other)
    return ops.mul(self, other)

  __rmul__ = __mul__

  def __matmul__(self, other):
    return ops.matmul(self, other)

  def __getitem__(self, index):
    return ops.getitem(self, index)

  def reshape(self, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
      shape = tuple(shape[0])
    return ops.reshape(self, shape)

  def permute(self, *axes):
    return ops.permute(self, axes)

  def sum(self, axis=None):
    return ops.sum(self, axis)

  def mean(self):
    return ops.mean(self)


class TapeEntry(collections.namedtuple('_TapeEntry', ['op', 'output', 'inputs', 'backward_fn'])):
  """One recorded primitive application.

  Attributes
  ----------
  op : str
      Primitive name.
  output : Tensor
      The produced tensor.
  inputs : Tuple[Tensor, ...]
      Operand references, in the order backward_fn returns their gradients.
  backward_fn : Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
      Maps the output gradient to the operand gradients. Saved intermediates live in its closure.
  """


class Tape:
  """Ordered record of primitive applications.

  Every operand of an entry is either a leaf or the output of an earlier entry, so entries are in
  topological order by construction. A Tape belongs to the thread that opened it.
  """

  def __init__(self):
    self.entries : typing.List[TapeEntry] = []
    self._index_of : typing.Dict[int, int] = {}

  def __enter__(self):
    _state().tape_stack.append(self)
    return self

  def __exit__(self, exc_type, exc, tb):
    popped = _state().tape_stack.pop()
    assert popped is self, 'tapes must be closed in the order they were opened'
    return False

  def __len__(self):
    return len(self.entries)

  def record(self, op : str, output : Tensor, inputs, backward_fn):
    output._produced = True
    output.requires_grad = True
    self._index_of[id(output)] = len(self.entries)
    self.entries.append(TapeEntry(op, output, tuple(inputs), backward_fn))

  def index_of(self, tensor : Tensor) -> typing.Optional[int]:
    idx = self._index_of.get(id(tensor))
    if idx is None or self.entries[idx].output is not tensor:
      return None
    return idx


def backward(tape : Tape, loss : Tensor, params : typing.Optional['ParamSet'] = None):
  """Back-propagate from a scalar loss recorded on `tape`.

  Gradients accumulate into `.grad` of every leaf reached; calling backward twice without
  resetting doubles them. Leaves that require a gradient but are unreachable from the loss
  (including every entry of `params`, when given) receive a zero gradient.

  Raises
  ------
  TapeError :
      When the loss is not a scalar or was not produced under `tape`.
  """
  if loss.size != 1 or loss.ndim > 1:
    raise TapeError(f'backward() needs a scalar loss, got shape {loss.shape}')
  end = tape.index_of(loss)
  if end is None:
    raise TapeError('loss was not produced under the given tape')

  pending = {id(loss): np.ones_like(loss.data)}
  for entry in reversed(tape.entries[:end + 1]):
    g = pending.pop(id(entry.output), None)
    if g is None:
      continue
    input_grads = entry.backward_fn(g)
    for inp, ig in zip(entry.inputs, input_grads):
      if ig is None or not inp.requires_grad:
        continue
      if ig.shape != inp.shape:
        raise TapeError(f'backward rule of {entry.op} produced gradient of shape {ig.shape} for '
                        f'operand of shape {inp.shape}')
      if inp.is_leaf:
        if inp.grad is None:
          inp.grad = np.zeros_like(inp.data)
        inp.grad += ig
      elif id(inp) in pending:
        pending[id(inp)] = pending[id(inp)] + ig
      else:
        pending[id(inp)] = ig

  for entry in tape.entries[:end + 1]:
    for inp in entry.inputs:
      if inp.requires_grad and inp.is_leaf and inp.grad is None:
        inp.grad = np.zeros_like(inp.data)
  if params is not None:
    for t in params.values():
      if t.requires_grad and t.grad is None:
        t.grad = np.zeros_like(t.data)


class ParamSet(collections.abc.MutableMapping):
  """Named learnable tensors. Iteration order is lexicographic by name."""

  def __init__(self, items : typing.Optional[typing.Mapping[str, Tensor]] = None):
    self._tensors : typing.Dict[str, Tensor] = {}
    for name, t in (items or {}).items():
      self[name] = t

  def __getitem__(self, name):
    return self._tensors[name]

  def __setitem__(self, name, tensor):
    if not isinstance(tensor, Tensor):
      raise TypeError(f'ParamSet values must be Tensors, got {type(tensor).__name__} for {name}')
    tensor.name = name
    self._tensors[name] = tensor

  def __delitem__(self, name):
    del self._tensors[name]

  def __iter__(self):
    return iter(sorted(self._tensors))

  def __len__(self):
    return len(self._tensors)

  def __repr__(self):
    return f'ParamSet({len(self)} tensors, {self.numel()} values)'

  def numel(self) -> int:
    return sum(t.size for t in self._tensors.values())

  def zero_grad(self):
    for t in self._tensors.values():
      t.grad = None

  def subset(self, prefixes : typing.Iterable[str]) -> 'ParamSet':
    """Return a view ParamSet holding the tensors whose names start with any of `prefixes`."""
    prefixes = tuple(prefixes)
    view = ParamSet()
    view._tensors = {k: v for k, v in self._tensors.items() if k.startswith(prefixes)}
    return view

  def set_requires_grad(self, flag : bool):
    for t in self._tensors.values():
      t.requires_grad = flag

  def astype(self, dtype) -> 'ParamSet':
    """Return a deep copy with every tensor cast to dtype, preserving requires_grad."""
    out = ParamSet()
    for name in self:
      src = self[name]
      t = Tensor._wrap(src.data.astype(dtype or src.data.dtype, copy=True))
      t.requires_grad = src.requires_grad
      out[name] = t
    return out

  def copy(self) -> 'ParamSet':
    return self.astype(None)

  def digest(self, names : typing.Optional[typing.Iterable[str]] = None) -> str:
    """SHA-256 over names, shapes and raw bytes; equal digests mean bitwise-equal tensors."""
    h = hashlib.sha256()
    for name in (sorted(names) if names is not None else self):
      t = self[name]
      h.update(name.encode('utf-8'))
      h.update(repr(t.shape).encode('utf-8'))
      h.update(t.data.tobytes())
    return h.hexdigest()


from . import ops  # noqa: E402  (Tensor operator sugar needs the ops module)
