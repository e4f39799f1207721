"""Shared plumbing: repo paths, the error hierarchy, exit codes and atomic file writes."""

import contextlib
import os
import subprocess
import tempfile
import typing


REPO_ROOT = None
def get_repo_root():
  global REPO_ROOT
  if REPO_ROOT is None:
    try:
      REPO_ROOT = str(subprocess.check_output(['git', 'rev-parse', '--show-toplevel'],
                                              cwd=os.path.dirname(__file__),
                                              stderr=subprocess.DEVNULL), 'utf-8').strip('\n')
    except (OSError, subprocess.CalledProcessError):
      # Not a git checkout (e.g. an unpacked sdist); python/pretext_eval/util -> repo root.
      REPO_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..', '..'))
  return REPO_ROOT


# Process exit codes used by every command in pretext_eval.bin.
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class PretextEvalError(Exception):
  """Base class for all errors raised by this package."""

  exit_code = EXIT_RUNTIME


class UsageError(PretextEvalError):
  """Raised when a command is invoked with missing or contradictory flags."""

  exit_code = EXIT_USAGE


class ValidationError(PretextEvalError):
  """Raised when inputs fail validation. May carry several problems at once."""

  exit_code = EXIT_VALIDATION

  def __init__(self, problems : typing.Union[str, typing.Sequence[str]]):
    if isinstance(problems, str):
      problems = [problems]
    self.problems = list(problems)
    if len(self.problems) == 1:
      message = self.problems[0]
    else:
      message = f'{len(self.problems)} problems:\n' + '\n'.join(f' - {p}' for p in self.problems)
    super(ValidationError, self).__init__(message)


class ConfigError(ValidationError):
  """Raised when a run config contains unknown keys or invalid values."""


class RuntimeFailure(PretextEvalError):
  """Raised when a well-formed run fails while executing."""


class ShapeError(ValidationError):
  """Raised by tensor primitives on incompatible operand shapes."""


class TapeError(RuntimeFailure):
  """Raised when backward() is asked to differentiate something the tape did not record."""


class NonFiniteError(RuntimeFailure):
  """Raised when a loss, gradient or checked value stops being finite."""

  def __init__(self, message, name=None):
    super(NonFiniteError, self).__init__(message)
    self.name = name


class GeometryError(ValidationError):
  """Raised when image, patch or token geometry is inconsistent."""


class DegradationParamError(ValidationError):
  """Raised when a degradation is requested with out-of-range parameters."""


@contextlib.contextmanager
def atomic_write(path : str, mode : str = 'wb'):
  """Open a temp file next to `path`; rename it over `path` only if the with block succeeds."""
  out_dir = os.path.dirname(os.path.abspath(path))
  os.makedirs(out_dir, exist_ok=True)
  fd, tmp_path = tempfile.mkstemp(prefix=f'.{os.path.basename(path)}.', dir=out_dir)
  try:
    with os.fdopen(fd, mode) as f:
      yield f
    os.replace(tmp_path, path)
  except BaseException:
    if os.path.exists(tmp_path):
      os.unlink(tmp_path)
    raise


class CheckpointFormatError(ValidationError):
  """Raised when a checkpoint file is malformed or was written by an incompatible version."""


class DatasetFormatError(ValidationError):
  """Raised when a dataset directory or packed file cannot be decoded."""
