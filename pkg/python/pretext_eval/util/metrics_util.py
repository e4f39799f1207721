"""Per-epoch metrics rows and their append-only CSV sink."""

import logging
import math
import os
import time
import typing

import attr
import pandas as pd
import psutil

from . import RuntimeFailure


_LOG = logging.getLogger(__name__)


COLUMNS = ('run_id', 'phase', 'epoch', 'step', 'lr', 'loss_total', 'loss_center', 'loss_outer',
           'acc_top1', 'wall_ms', 'seed')

_NUMERIC = ('lr', 'loss_total', 'loss_center', 'loss_outer', 'acc_top1', 'wall_ms')


@attr.s(auto_attribs=True, frozen=True)
class MetricsRecord:
  """One CSV row. Fields that do not apply to a phase are None and written as empty cells."""

  run_id : str
  phase : str
  epoch : int
  step : int
  lr : typing.Optional[float] = None
  loss_total : typing.Optional[float] = None
  loss_center : typing.Optional[float] = None
  loss_outer : typing.Optional[float] = None
  acc_top1 : typing.Optional[float] = None
  wall_ms : typing.Optional[float] = None
  seed : int = 0

  def check(self):
    for name in _NUMERIC:
      value = getattr(self, name)
      if value is not None and not math.isfinite(value):
        raise RuntimeFailure(f'metrics field {name} is not finite: {value!r}')
    return self


class MetricsSink:
  """Appends MetricsRecord rows to a CSV file with the fixed COLUMNS header."""

  def __init__(self, path : str):
    self.path = path

  def append(self, records : typing.Iterable[MetricsRecord]):
    rows = [attr.asdict(r.check()) for r in records]
    if not rows:
      return
    frame = pd.DataFrame(rows, columns=list(COLUMNS))
    exists = os.path.exists(self.path) and os.path.getsize(self.path) > 0
    os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
    frame.to_csv(self.path, mode='a', header=not exists, index=False, float_format='%.9g',
                 lineterminator='\n')

  def read(self) -> pd.DataFrame:
    return read_metrics(self.path)


def read_metrics(path : str) -> pd.DataFrame:
  frame = pd.read_csv(path)
  if tuple(frame.columns) != COLUMNS:
    raise RuntimeFailure(f'{path}: unexpected metrics columns {list(frame.columns)}')
  return frame


class Stopwatch:
  """Monotonic wall clock; reports None when wall time recording is off."""

  def __init__(self, enabled : bool = True):
    self.enabled = enabled
    self._start = time.monotonic()

  def restart(self):
    self._start = time.monotonic()

  def elapsed_ms(self) -> typing.Optional[float]:
    if not self.enabled:
      return None
    return (time.monotonic() - self._start) * 1000.0


def resident_mb() -> float:
  """Resident set size of this process in MiB."""
  return psutil.Process(os.getpid()).memory_info().rss / (1 << 20)
