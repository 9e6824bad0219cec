"""Forward corruption: replace each target token by ``[M]`` with probability ``t``."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from diffscene.core.errors import RangeError, VocabularyError
from diffscene.vocab.tokens import MASK, MASK_ID


@dataclass(frozen=True)
class MaskedSequence:
    ids: np.ndarray
    mask_flags: np.ndarray
    t: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.t <= 1.0:
            raise RangeError(f"t={self.t} outside [0, 1]")
        if self.ids.shape != self.mask_flags.shape:
            raise RangeError("ids and mask_flags differ in length")

    @property
    def n_masked(self) -> int:
        return int(self.mask_flags.sum())


def forward_mask(
    target_ids: Sequence[int] | np.ndarray,
    t: float,
    rng: np.random.Generator,
    mask_id: int = MASK_ID,
) -> MaskedSequence:
    """Corrupt *target_ids* independently per position with probability *t*.

    Raises:
        RangeError: If *t* is outside ``[0, 1]``.
        VocabularyError: If the target already contains the mask token.
    """
    if not 0.0 <= t <= 1.0:
        raise RangeError(f"t={t} outside [0, 1]")
    target = np.asarray(target_ids, dtype=np.int64)
    if np.any(target == mask_id):
        raise VocabularyError(f"Target already contains {MASK}")
    flags = rng.random(target.shape[0]) < t
    ids = np.where(flags, mask_id, target)
    return MaskedSequence(ids=ids, mask_flags=flags, t=float(t))
