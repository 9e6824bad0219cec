"""Mask-count schedules for iterative decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass

from diffscene.core.errors import ScheduleError


def gamma(t: float) -> float:
    """Masking ratio at normalized time *t*: ``sin(pi * t / 2)``."""
    return math.sin(math.pi * t / 2.0)


@dataclass(frozen=True)
class Schedule:
    """``mask_counts[k]`` positions stay masked after the step that leaves time ``k``."""

    n_steps: int
    gen_len: int
    mask_counts: tuple[int, ...]

    def __post_init__(self) -> None:
        m = self.mask_counts
        if len(m) != self.n_steps + 1 or m[0] != 0 or m[-1] != self.gen_len:
            raise ScheduleError(f"Malformed schedule {list(m)} for N={self.n_steps}, L={self.gen_len}")
        if any(m[k] <= m[k - 1] for k in range(1, len(m))):
            raise ScheduleError(f"Schedule {list(m)} is not strictly increasing in k")

    def commits(self, k: int) -> int:
        """Tokens committed by the step at time *k*."""
        return self.mask_counts[k] - self.mask_counts[k - 1]


def build_schedule(n_steps: int, gen_len: int) -> Schedule:
    """Build ``m_k = ceil(gamma(k / N) * L)`` clamped to commit at least one token per step.

    Raises:
        ScheduleError: If ``N < 1``, ``L < 1`` or ``N > L``.
    """
    if n_steps < 1 or gen_len < 1:
        raise ScheduleError(f"Need N >= 1 and L >= 1, got N={n_steps}, L={gen_len}")
    if n_steps > gen_len:
        raise ScheduleError(
            f"N={n_steps} steps cannot each commit a token of a {gen_len}-token segment",
            hint="Use at most as many steps as generated tokens.",
        )
    m = [math.ceil(gamma(k / n_steps) * gen_len) for k in range(n_steps + 1)]
    m[n_steps] = gen_len
    for k in range(n_steps - 1, -1, -1):
        m[k] = min(m[k], m[k + 1] - 1)
    m[0] = 0
    return Schedule(n_steps, gen_len, tuple(m))
