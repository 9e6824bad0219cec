"""Mask-and-predict and next-token objectives."""

from __future__ import annotations

import math
import warnings
from collections.abc import Sequence
from enum import Enum

import numpy as np

from diffscene.core.errors import ShapeError, VocabularyError
from diffscene.net.model import AttentionMode, TrainExample, softmax


class LossReduction(str, Enum):
    """How masked-position cross-entropies are combined per example."""

    MEAN = "mean"
    SUM = "sum"
    INVERSE_T = "inverse_t"


class DegenerateLossWarning(UserWarning):
    """Raised as a warning when a loss has no positions to score."""


def _cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy (float64) and ``softmax - onehot``."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(len(targets))
    ce = log_norm - z[rows, targets]
    grad = softmax(z)
    grad[rows, targets] -= 1.0
    return ce, grad


def _check(logits: np.ndarray, target: np.ndarray) -> None:
    if logits.ndim != 2 or logits.shape[0] != target.shape[0]:
        raise ShapeError(f"Logits {logits.shape} do not match target length {target.shape[0]}")
    if target.size and (target.min() < 0 or target.max() >= logits.shape[1]):
        raise VocabularyError(f"Target id outside [0, {logits.shape[1]})")


def masked_loss_and_grad(
    logits: np.ndarray,
    target_ids: Sequence[int] | np.ndarray,
    mask_flags: Sequence[bool] | np.ndarray,
    reduction: LossReduction | str = LossReduction.MEAN,
    t: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Cross-entropy over masked rows only; unmasked rows get zero gradient."""
    reduction = LossReduction(reduction)
    target = np.asarray(target_ids, dtype=np.int64)
    flags = np.asarray(mask_flags, dtype=bool)
    _check(logits, target)
    if flags.shape != target.shape:
        raise ShapeError("mask_flags and target_ids differ in length")
    dlogits = np.zeros(logits.shape, dtype=np.float64)
    n_masked = int(flags.sum())
    if n_masked == 0:
        return 0.0, dlogits

    ce, grad = _cross_entropy(logits[flags], target[flags])
    if reduction is LossReduction.MEAN:
        scale = 1.0 / n_masked
    elif reduction is LossReduction.SUM:
        scale = 1.0
    else:
        scale = 1.0 / (t * len(target)) if t > 0 else 0.0
    dlogits[flags] = grad * scale
    return math.fsum(ce.tolist()) * scale, dlogits


def masked_loss(
    logits: np.ndarray,
    target_ids: Sequence[int] | np.ndarray,
    mask_flags: Sequence[bool] | np.ndarray,
    reduction: LossReduction | str = LossReduction.MEAN,
    t: float = 1.0,
) -> float:
    """Mask-and-predict loss; the default mean divides by ``max(1, #masked)``.

    ``sum`` is the unnormalized form and ``inverse_t`` weights the sum by
    ``1 / (t * L)``.
    """
    return masked_loss_and_grad(logits, target_ids, mask_flags, reduction, t)[0]


def causal_loss_and_grad(
    logits: np.ndarray, target_ids: Sequence[int] | np.ndarray, pad_id: int = 0
) -> tuple[float, np.ndarray]:
    target = np.asarray(target_ids, dtype=np.int64)
    _check(logits, target)
    keep = target != pad_id
    dlogits = np.zeros(logits.shape, dtype=np.float64)
    n = int(keep.sum())
    if n == 0:
        warnings.warn("All-[PAD] target; causal loss defined as 0", DegenerateLossWarning, stacklevel=3)
        return 0.0, dlogits
    ce, grad = _cross_entropy(logits[keep], target[keep])
    dlogits[keep] = grad / n
    return math.fsum(ce.tolist()) / n, dlogits


def causal_loss(logits: np.ndarray, target_ids: Sequence[int] | np.ndarray, pad_id: int = 0) -> float:
    """Mean next-token cross-entropy over positions whose target is not ``[PAD]``.

    An all-``[PAD]`` target yields 0 and emits :class:`DegenerateLossWarning`.
    """
    return causal_loss_and_grad(logits, target_ids, pad_id)[0]


class MaskedObjective:
    """Bidirectional mask-and-predict objective over the target segment."""

    mode = AttentionMode.BIDIRECTIONAL

    def __init__(self, mask_id: int, reduction: LossReduction | str = LossReduction.MEAN) -> None:
        self.mask_id = mask_id
        self.reduction = LossReduction(reduction)

    def build_input(self, example: TrainExample) -> tuple[np.ndarray, int]:
        prompt = np.asarray(example.prompt_ids, dtype=np.int64)
        target = np.asarray(example.target_ids, dtype=np.int64)
        corrupted = np.where(example.mask_flags, self.mask_id, target)
        return np.concatenate([prompt, corrupted]), len(prompt)

    def loss_and_dlogits(self, logits: np.ndarray, example: TrainExample) -> tuple[float, np.ndarray]:
        return masked_loss_and_grad(
            logits, example.target_ids, example.mask_flags, self.reduction, example.t
        )


class CausalObjective:
    """Next-token objective; row ``i`` of the target segment is predicted from everything before it."""

    mode = AttentionMode.CAUSAL

    def __init__(self, pad_id: int) -> None:
        self.pad_id = pad_id

    def build_input(self, example: TrainExample) -> tuple[np.ndarray, int]:
        prompt = np.asarray(example.prompt_ids, dtype=np.int64)
        if len(prompt) == 0:
            raise ShapeError("Causal training needs a non-empty prompt starting with [BOS]")
        target = np.asarray(example.target_ids, dtype=np.int64)
        return np.concatenate([prompt, target[:-1]]), len(prompt) - 1

    def loss_and_dlogits(self, logits: np.ndarray, example: TrainExample) -> tuple[float, np.ndarray]:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateLossWarning)
            return causal_loss_and_grad(logits, example.target_ids, self.pad_id)
