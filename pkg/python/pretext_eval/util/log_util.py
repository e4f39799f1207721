"""Logging setup shared by the command-line entry points."""

import datetime
import logging
import os
import platform
import sys
import typing

import colorlog
from colorlog.escape_codes import parse_colors
import numpy as np

from pretext_eval import util


DATE_FORMAT = '%Y-%m-%d %H:%M:%S'

CONSOLE_FORMAT = ('%(asctime)s.%(msecs)03d %(log_color)s%(levelname)s%(reset)s '
                  '%(filename)s:%(lineno)d %(check_color)s%(message)s')

FILE_FORMAT = '%(asctime)s.%(msecs)03d %(levelname)s %(filename)s:%(lineno)d %(message)s'

LEVEL_COLORS = {
  'DEBUG': 'cyan',
  'INFO': 'green',
  'WARNING': 'yellow',
  'ERROR': 'red',
  'CRITICAL': 'red,bg_white',
}

# Message colors for the first word of check_result lines.
CHECK_COLORS = {
  'pass': 'bold_green',
  'fail': 'bold_red',
}


def gen_log_file_name(labels : typing.List[str], log_dir : typing.Optional[str] = None):
  """Generate a new log file name for this process.

  Params
  ------
  labels : List[str]
      Describe the command being logged, least specific first, e.g. ['pretrain', run_id, task].
  log_dir : Optional[str]
      Directory for the log file. Defaults to logs/ under the repo root.

  Returns
  -------
  str :
      The path to the new log file.
  """
  now = datetime.datetime.now().strftime('%Y-%m-%dT%H-%M-%S')
  safe_labels = '.'.join(labels).replace('/', '_').replace(':', '_')
  if log_dir is None:
    log_dir = os.path.join(util.get_repo_root(), 'logs')
  return os.path.join(log_dir, f'{safe_labels}.{now}.log')


class CheckColorFilter(logging.Filter):
  """Sets record.check_color from the pass/fail word that opens a check_result line."""

  def filter(self, record):
    word = str(record.msg).split(' ', 1)[0]
    record.check_color = parse_colors(CHECK_COLORS[word]) if word in CHECK_COLORS else ''
    return True


def console_formatter() -> logging.Formatter:
  return colorlog.ColoredFormatter(
    fmt=CONSOLE_FORMAT, datefmt=DATE_FORMAT, log_colors=LEVEL_COLORS, reset=True, style='%')


def console_handler(stream=None) -> logging.Handler:
  handler = logging.StreamHandler(sys.stderr if stream is None else stream)
  handler.addFilter(CheckColorFilter())
  handler.setFormatter(console_formatter())
  return handler


def file_handler(path : str) -> logging.Handler:
  os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
  handler = logging.FileHandler(path)
  handler.setFormatter(logging.Formatter(fmt=FILE_FORMAT, datefmt=DATE_FORMAT))
  return handler


def config(labels : typing.List[str], level : int = logging.INFO, console_only : bool = False,
           log_dir : typing.Optional[str] = None) -> typing.Optional[str]:
  """Configure logging subsystem and create a new logfile; our logging.basicConfig().

  Params
  ------
  labels : List[str]
      Describe the command being logged; see gen_log_file_name.
  level : int
      Root log level, one of logging.{ERROR,WARN,INFO,DEBUG}.
  console_only : bool
      If True, don't log to disk. labels and log_dir are ignored in this case.
  log_dir : Optional[str]
      Where to put the log file; training commands pass their output directory so the log sits
      next to the metrics and checkpoints it describes.

  Returns
  -------
  Optional[str] :
      The log file path, or None when console_only.
  """
  root_logger = logging.getLogger()
  was_configured = root_logger.hasHandlers()
  for h in list(root_logger.handlers):
    root_logger.removeHandler(h)
    h.close()

  root_logger.addHandler(console_handler())

  log_file_path = None
  if not console_only:
    log_file_path = gen_log_file_name(labels, log_dir)
    root_logger.addHandler(file_handler(log_file_path))

  root_logger.setLevel(level)

  if was_configured:
    root_logger.warning('Log handlers were configured before log_util.config() was invoked; '
                        'messages prior to this line may be missing from this log.')
  root_logger.info('Logging started for process: %r', sys.argv)
  root_logger.debug('python %s, numpy %s, on %s', platform.python_version(), np.__version__,
                    platform.platform())
  return log_file_path


def check_result(logger : logging.Logger, name : str, passed : bool, detail : str = ''):
  """Log one verification outcome; failures are logged at ERROR so they stand out."""
  if passed:
    logger.info('pass %s %s', name, detail)
  else:
    logger.error('fail %s %s', name, detail)
