"""Iterative mask-predict decoding and greedy causal decoding.

Diffusion decoding starts from a fully masked generated segment and, for
``k = N..1``, predicts every masked position in one bidirectional pass, then
keeps the ``m_{k-1}`` least trusted of them masked. Committed tokens are never
reopened. ``[M]`` is excluded from every argmax so outputs never contain it.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from diffscene.core.errors import DecodeError, DiffSceneError, ScheduleError, ShapeError
from diffscene.decode.schedule import build_schedule
from diffscene.decode.trace import DecodeTrace, TraceStep
from diffscene.diffusion.masking import MaskedSequence
from diffscene.net.model import AttentionMode, Params, forward, softmax
from diffscene.vocab.tokens import MASK_ID


class RemaskKind(str, Enum):
    LOW_CONFIDENCE = "low_confidence"
    RANDOM = "random"


@dataclass(frozen=True)
class RemaskStrategy:
    """Which eligible positions go back to ``[M]``: the least confident, or a seeded random subset."""

    kind: RemaskKind = RemaskKind.LOW_CONFIDENCE
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", RemaskKind(self.kind))

    @classmethod
    def low_confidence(cls) -> RemaskStrategy:
        return cls(RemaskKind.LOW_CONFIDENCE)

    @classmethod
    def random(cls, seed: int = 0) -> RemaskStrategy:
        return cls(RemaskKind.RANDOM, seed)

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> RemaskStrategy:
        """Parse ``low_confidence``, ``random`` or ``random:<seed>``."""
        name, _, value = text.partition(":")
        kind = RemaskKind(name)
        return cls(kind, int(value) if value else seed)

    @property
    def tag(self) -> str:
        if self.kind is RemaskKind.RANDOM:
            return f"random({self.seed})"
        return self.kind.value

    def with_seed(self, seed: int) -> RemaskStrategy:
        return RemaskStrategy(self.kind, seed)


def _masked_argmax(logits: np.ndarray, mask_id: int) -> tuple[np.ndarray, np.ndarray]:
    probs = softmax(logits.astype(np.float64))
    ranked = probs.copy()
    ranked[:, mask_id] = -1.0
    best = ranked.argmax(axis=-1)
    return best, probs[np.arange(len(best)), best]


def predict_full(
    params: Params,
    C_v: Optional[np.ndarray],
    current: MaskedSequence,
    prompt_ids: Sequence[int],
    *,
    mask_id: int = MASK_ID,
) -> tuple[np.ndarray, np.ndarray]:
    """Predict every masked position of ``prompt + generated`` in one bidirectional pass.

    Returns the full-length prediction and per-position confidence; committed
    positions (including the prompt) echo their token with confidence 1.

    Raises:
        ShapeError: If *current* does not start with *prompt_ids* or masks the prompt.
    """
    prompt = np.asarray(prompt_ids, dtype=np.int64)
    ids = np.asarray(current.ids, dtype=np.int64)
    flags = np.asarray(current.mask_flags, dtype=bool)
    p = len(prompt)
    if len(ids) < p or not np.array_equal(ids[:p], prompt) or flags[:p].any():
        raise ShapeError("Current sequence must start with the unmasked prompt")
    logits = forward(params, C_v, ids, AttentionMode.BIDIRECTIONAL).logits
    prediction = ids.copy()
    conf = np.ones(len(ids), dtype=np.float64)
    if flags.any():
        best, best_conf = _masked_argmax(logits[flags], mask_id)
        prediction[flags] = best
        conf[flags] = best_conf
    return prediction, conf


def remask(
    prediction: np.ndarray,
    conf: np.ndarray,
    eligible: Sequence[int] | np.ndarray,
    m_next: int,
    strategy: RemaskStrategy,
    *,
    rng: np.random.Generator | None = None,
    mask_id: int = MASK_ID,
    t: float = 0.0,
) -> MaskedSequence:
    """Commit all but *m_next* of the *eligible* positions and mask the rest.

    Low confidence remasks the *m_next* lowest-confidence positions, ties going
    to the lower position index; random remasks a uniform subset drawn from
    *rng* (or a generator seeded from the strategy).

    Raises:
        ScheduleError: If *m_next* is negative or leaves no position to commit.
    """
    eligible = np.asarray(eligible, dtype=np.int64)
    if m_next < 0 or (len(eligible) and m_next >= len(eligible)) or (not len(eligible) and m_next):
        raise ScheduleError(
            f"Cannot keep {m_next} masks among {len(eligible)} eligible positions"
        )
    prediction = np.asarray(prediction, dtype=np.int64)
    flags = np.zeros(len(prediction), dtype=bool)
    if m_next:
        if strategy.kind is RemaskKind.LOW_CONFIDENCE:
            order = np.lexsort((eligible, conf[eligible]))
            chosen = eligible[order[:m_next]]
        else:
            gen = rng if rng is not None else np.random.default_rng(strategy.seed)
            chosen = gen.choice(eligible, size=m_next, replace=False)
        flags[chosen] = True
    ids = np.where(flags, mask_id, prediction)
    return MaskedSequence(ids=ids, mask_flags=flags, t=float(t))


def decode_diffusion(
    params: Params,
    C_v: Optional[np.ndarray],
    prompt_ids: Sequence[int],
    gen_len: int,
    n_steps: int,
    strategy: RemaskStrategy | None = None,
    *,
    mask_id: int = MASK_ID,
) -> tuple[np.ndarray, DecodeTrace]:
    """Generate *gen_len* tokens in *n_steps* mask-predict iterations.

    Returns:
        The generated ids and the complete :class:`DecodeTrace`.

    Raises:
        ScheduleError: If no valid schedule exists for ``(n_steps, gen_len)``.
        DecodeError: If a step fails; ``exc.trace`` holds the steps completed so far.
    """
    strategy = strategy or RemaskStrategy.low_confidence()
    schedule = build_schedule(n_steps, gen_len)
    prompt = np.asarray(prompt_ids, dtype=np.int64)
    p = len(prompt)
    ids = np.concatenate([prompt, np.full(gen_len, mask_id, dtype=np.int64)])
    flags = np.concatenate([np.zeros(p, dtype=bool), np.ones(gen_len, dtype=bool)])
    current = MaskedSequence(ids=ids, mask_flags=flags, t=1.0)
    trace = DecodeTrace(
        schedule=schedule,
        strategy=strategy.tag,
        prompt_ids=tuple(int(i) for i in prompt),
        finalization_step=[0] * gen_len,
    )
    rng = np.random.default_rng(strategy.seed) if strategy.kind is RemaskKind.RANDOM else None

    k = n_steps
    try:
        for k in range(n_steps, 0, -1):
            prediction, conf = predict_full(params, C_v, current, prompt, mask_id=mask_id)
            eligible = np.flatnonzero(current.mask_flags)
            nxt = remask(
                prediction,
                conf,
                eligible,
                schedule.mask_counts[k - 1],
                strategy,
                rng=rng,
                mask_id=mask_id,
                t=(k - 1) / n_steps,
            )
            committed = eligible[~nxt.mask_flags[eligible]] - p
            for pos in committed:
                trace.finalization_step[int(pos)] = k
            trace.steps.append(
                TraceStep(
                    k=k,
                    committed=tuple(int(c) for c in committed),
                    confidence=tuple(float(c) for c in conf[p:]),
                    prediction=tuple(int(i) for i in prediction[p:]),
                )
            )
            current = nxt
    except DiffSceneError as exc:
        raise DecodeError(f"Decoding failed at step k={k}: {exc}", trace=trace) from exc

    output = current.ids[p:].copy()
    if current.mask_flags.any() or np.any(output == mask_id):
        raise DecodeError("Decoding finished with masked positions left", trace=trace)
    trace.output_ids = tuple(int(i) for i in output)
    return output, trace


def decode_ar(
    params: Params,
    C_v: Optional[np.ndarray],
    prompt_ids: Sequence[int],
    max_len: int,
    *,
    mask_id: int = MASK_ID,
) -> np.ndarray:
    """Greedy left-to-right decoding with the causal trunk, exactly *max_len* tokens."""
    ids = [int(i) for i in prompt_ids]
    out: list[int] = []
    for _ in range(max_len):
        logits = forward(params, C_v, ids, AttentionMode.CAUSAL).logits[-1:]
        best, _ = _masked_argmax(logits, mask_id)
        out.append(int(best[0]))
        ids.append(out[-1])
    return np.asarray(out, dtype=np.int64)


class Paradigm(str, Enum):
    DIFFUSION = "diffusion"
    AR = "ar"


@dataclass(frozen=True)
class DecoderSettings:
    """How a split is decoded: iteration count, remasking strategy and paradigm.

    For the random strategy, ``seed`` is the root from which each instance's
    remasking seed is derived.
    """

    steps: int = 8
    strategy: RemaskStrategy = RemaskStrategy()
    paradigm: Paradigm = Paradigm.DIFFUSION
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "paradigm", Paradigm(self.paradigm))
        if self.steps < 1:
            raise ScheduleError(f"steps must be at least 1, got {self.steps}")

    def as_dict(self) -> dict:
        return {
            "steps": self.steps,
            "strategy": self.strategy.tag,
            "paradigm": self.paradigm.value,
            "seed": self.seed,
        }
