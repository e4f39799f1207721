"""Counter-based random streams.

An Rng is a value: (seed, stream, counter) fully determines every draw, on every platform. Draws
come from numpy's Philox4x64 generator keyed by (seed, stream) and started at `counter`. Sub-streams
for a purpose and an index (a sample, a worker) are derived by hashing (seed, stream, purpose,
index) through numpy's SeedSequence.
"""

import zlib

import attr
import numpy as np


_U64 = (1 << 64) - 1


def derive_stream(seed : int, purpose : str, index : int = 0, parent_stream : int = 0) -> int:
  """Hash (seed, parent_stream, purpose, index) into a 64-bit stream id."""
  tag = zlib.crc32(purpose.encode('utf-8'))
  entropy = [seed & _U64, parent_stream & _U64, tag, index & _U64]
  return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


@attr.s(auto_attribs=True, frozen=True)
class Rng:
  """A reproducible random stream.

  Attributes
  ----------
  seed : int
      Run seed.
  stream : int
      Stream id; distinct purposes and samples use distinct streams.
  counter : int
      Philox block counter the generator starts from.
  """

  seed : int
  stream : int = 0
  counter : int = 0

  def generator(self) -> np.random.Generator:
    """A fresh numpy Generator positioned at this Rng's counter."""
    key = np.array([self.seed & _U64, self.stream & _U64], dtype=np.uint64)
    counter = np.array([self.counter & _U64, 0, 0, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))

  def derive(self, purpose : str, index : int = 0) -> 'Rng':
    return Rng(self.seed, derive_stream(self.seed, purpose, index, self.stream), 0)

  def advance(self, blocks : int = 1) -> 'Rng':
    return attr.evolve(self, counter=self.counter + blocks)
