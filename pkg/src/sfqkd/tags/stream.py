from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ..calibrate import CHANNELS
from ..model import DomainError

PS_PER_S = 1_000_000_000_000


class Site(enum.IntEnum):
    ALICE = 0
    BOB = 1


@dataclass(frozen=True, eq=False)
class TagStream:
    """Time-ordered detection events of one site.

    ``times`` are int64 picoseconds, ``channels`` uint8 codes indexing
    :data:`CHANNELS` (0=H, 1=V, 2=D, 3=A). ``span`` is the nominal
    acquisition time in seconds.
    """

    times: np.ndarray
    channels: np.ndarray
    site: Site
    span: float

    def __post_init__(self):
        times = np.ascontiguousarray(self.times, dtype=np.int64)
        channels = np.ascontiguousarray(self.channels, dtype=np.uint8)
        if times.shape != channels.shape or times.ndim != 1:
            raise DomainError("times and channels must be 1-D arrays of equal length")
        if times.size > 1 and np.any(np.diff(times) < 0):
            raise DomainError("timestamps must be nondecreasing")
        if channels.size and channels.max() >= len(CHANNELS):
            raise DomainError("channel code out of range")
        if not self.span > 0:
            raise DomainError("span must be positive")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "site", Site(self.site))

    def __len__(self) -> int:
        return int(self.times.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TagStream):
            return NotImplemented
        return (
            self.site == other.site
            and self.span == other.span
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.channels, other.channels)
        )

    def shifted(self, delta_ps: int) -> "TagStream":
        return TagStream(self.times + np.int64(delta_ps), self.channels, self.site, self.span)


def empty_stream(site: Site, span: float = 1.0) -> TagStream:
    return TagStream(np.empty(0, np.int64), np.empty(0, np.uint8), site, span)
