"""Finite-difference verification of back-propagated gradients."""

import logging
import typing

import attr
import numpy as np

from pretext_eval.util import NonFiniteError
from . import ParamSet, Tape, Tensor, backward, precision


_LOG = logging.getLogger(__name__)


@attr.s(auto_attribs=True, frozen=True)
class GradCheckReport:
  """Result of grad_check.

  Attributes
  ----------
  errors : Dict[str, float]
      Max relative error between back-propagated and central-difference gradients, per parameter.
  tol : float
      The tolerance the errors were compared against.
  coords_checked : Dict[str, int]
      Number of coordinates probed per parameter.
  """

  errors : typing.Dict[str, float]
  tol : float
  coords_checked : typing.Dict[str, int]

  @property
  def max_error(self) -> float:
    return max(self.errors.values()) if self.errors else 0.0

  @property
  def failures(self) -> typing.List[str]:
    return [name for name, err in sorted(self.errors.items()) if not err < self.tol]

  @property
  def passed(self) -> bool:
    return not self.failures


def _as_param_set(point) -> ParamSet:
  if isinstance(point, ParamSet):
    return point
  if isinstance(point, Tensor):
    return ParamSet({'x': point})
  if isinstance(point, typing.Mapping):
    return ParamSet({k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True)
                     for k, v in point.items()})
  return ParamSet({'x': Tensor(point, requires_grad=True)})


def relative_error(analytic : np.ndarray, numeric : np.ndarray, floor : float) -> np.ndarray:
  """|a - n| / max(|a|, |n|, floor); below `floor` the error is effectively absolute."""
  denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
  return np.abs(analytic - numeric) / denom


def _evaluate(function, params, name) -> float:
  value = function(params)
  value = value.item() if isinstance(value, Tensor) else float(value)
  if not np.isfinite(value):
    raise NonFiniteError(f'function value became non-finite while perturbing {name}', name=name)
  return value


def grad_check(function : typing.Callable[[ParamSet], Tensor], point, step : float = 1e-3,
               tol : float = 1e-4, max_coords : typing.Optional[int] = None, seed : int = 0,
               floor : float = 1e-2) -> GradCheckReport:
  """Compare back-propagated gradients with central differences in 64-bit mode.

  Params
  ------
  function : Callable[[ParamSet], Tensor]
      Scalar-valued and deterministic; builds its whole computation from the ParamSet it is given.
  point : ParamSet, Mapping[str, array], Tensor or array
      Where to evaluate. It is copied to float64; the caller's tensors are not modified.
  step : float
      Central-difference half step.
  tol : float
      A parameter passes when its max relative error is below tol.
  max_coords : Optional[int]
      Probe at most this many coordinates per parameter (chosen with `seed`). All when None.
  floor : float
      Denominator floor of the relative error (see relative_error).

  Returns
  -------
  GradCheckReport :
      Per-parameter max relative errors.

  Raises
  ------
  NonFiniteError :
      When the function or a gradient is non-finite; the offending parameter is named.
  """
  with precision(np.float64):
    params = _as_param_set(point).astype(np.float64)
    for t in params.values():
      t.requires_grad = True
      t.grad = None

    with Tape() as tape:
      loss = function(params)
    if not np.isfinite(loss.data).all():
      raise NonFiniteError('function value is non-finite at the check point')
    backward(tape, loss, params)

    rng = np.random.default_rng(seed)
    errors, coords_checked = {}, {}
    for name in params:
      t = params[name]
      if not np.isfinite(t.grad).all():
        raise NonFiniteError(f'back-propagated gradient of {name} is non-finite', name=name)
      flat = t.data.reshape(-1)
      coords = np.arange(flat.size)
      if max_coords is not None and flat.size > max_coords:
        coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))

      numeric = np.empty(coords.size)
      for i, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + step
        f_plus = _evaluate(function, params, name)
        flat[c] = orig - step
        f_minus = _evaluate(function, params, name)
        flat[c] = orig
        numeric[i] = (f_plus - f_minus) / (2 * step)

      analytic = t.grad.reshape(-1)[coords]
      err = relative_error(analytic, numeric, floor)
      errors[name] = float(err.max()) if err.size else 0.0
      coords_checked[name] = int(coords.size)
      _LOG.debug('grad_check %s: %d coords, max rel err %.3e', name, coords.size, errors[name])

  return GradCheckReport(errors=errors, tol=tol, coords_checked=coords_checked)
