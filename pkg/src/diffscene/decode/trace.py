"""Decode traces: what was committed at each step and when each position finalized."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from diffscene.core.errors import ScheduleError, TraceFormatError
from diffscene.decode.schedule import Schedule
from diffscene.vocab.tokens import Vocabulary, decode_text

PathLike = Union[str, Path]

TRACE_FORMAT = "diffscene-trace/1"
PHASES = ("early", "middle", "late")


def finalization_phase(k: int, n_steps: int) -> int:
    """Tercile of decoding progress in which step *k* falls: 0 early, 1 middle, 2 late."""
    return min(2, (n_steps - k) * 3 // n_steps)


@dataclass(frozen=True)
class TraceStep:
    """One decoding iteration at time ``k``; positions are relative to the generated segment."""

    k: int
    committed: tuple[int, ...]
    confidence: tuple[float, ...]
    prediction: tuple[int, ...]


@dataclass
class DecodeTrace:
    schedule: Schedule
    strategy: str
    prompt_ids: tuple[int, ...]
    steps: list[TraceStep] = field(default_factory=list)
    finalization_step: list[int] = field(default_factory=list)
    output_ids: Optional[tuple[int, ...]] = None
    output_tokens: Optional[tuple[str, ...]] = None

    @property
    def complete(self) -> bool:
        return self.output_ids is not None

    def phases(self) -> list[int]:
        return [finalization_phase(k, self.schedule.n_steps) for k in self.finalization_step]

    def check(self) -> None:
        """Verify that the committed sets replay the schedule and partition the segment.

        Raises:
            ScheduleError: On any inconsistency.
        """
        n, length = self.schedule.n_steps, self.schedule.gen_len
        remaining = length
        seen: set[int] = set()
        for step in self.steps:
            if seen.intersection(step.committed):
                raise ScheduleError(f"Step k={step.k} re-commits a finalized position")
            seen.update(step.committed)
            remaining -= len(step.committed)
            if remaining != self.schedule.mask_counts[step.k - 1]:
                raise ScheduleError(
                    f"After step k={step.k}, {remaining} masks remain; schedule says "
                    f"{self.schedule.mask_counts[step.k - 1]}"
                )
        if self.complete and (len(self.steps) != n or seen != set(range(length))):
            raise ScheduleError("Committed sets do not cover the generated segment")

    def to_dict(self, vocab: Vocabulary | None = None) -> dict[str, Any]:
        out: dict[str, Any] = {
            "format": TRACE_FORMAT,
            "strategy": self.strategy,
            "schedule": {
                "n_steps": self.schedule.n_steps,
                "gen_len": self.schedule.gen_len,
                "mask_counts": list(self.schedule.mask_counts),
            },
            "prompt_ids": list(self.prompt_ids),
            "steps": [
                {
                    "k": s.k,
                    "committed": list(s.committed),
                    "confidence": list(s.confidence),
                    "prediction": list(s.prediction),
                }
                for s in self.steps
            ],
            "finalization_step": list(self.finalization_step),
            "output_ids": list(self.output_ids) if self.output_ids is not None else None,
        }
        tokens = self.output_tokens
        if tokens is None and vocab is not None and self.output_ids is not None:
            tokens = tuple(vocab.surface(i) for i in self.output_ids)
        if tokens is not None:
            out["output_tokens"] = list(tokens)
        if vocab is not None and self.output_ids is not None:
            out["prompt_text"] = decode_text(vocab, self.prompt_ids)
            out["output_text"] = decode_text(vocab, self.output_ids, strip_pad=True)
        return out


def _field(data: dict, key: str, kind: type | tuple[type, ...], path: str) -> Any:
    if not isinstance(data, dict) or key not in data:
        raise TraceFormatError(f"{path}{key}", "missing")
    value = data[key]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise TraceFormatError(f"{path}{key}", f"expected {getattr(kind, '__name__', kind)}")
    return value


def _int_list(values: Any, path: str) -> list[int]:
    if not isinstance(values, list) or not all(
        isinstance(v, int) and not isinstance(v, bool) for v in values
    ):
        raise TraceFormatError(path, "expected a list of integers")
    return values


def trace_from_dict(data: Any) -> DecodeTrace:
    """Rebuild a trace from its JSON form.

    Raises:
        TraceFormatError: Naming the first field that is missing or malformed.
    """
    if not isinstance(data, dict):
        raise TraceFormatError("$", "expected an object")
    if data.get("format", TRACE_FORMAT) != TRACE_FORMAT:
        raise TraceFormatError("format", f"unsupported format {data.get('format')!r}")
    strategy = _field(data, "strategy", str, "")
    sched = _field(data, "schedule", dict, "")
    n = _field(sched, "n_steps", int, "schedule.")
    length = _field(sched, "gen_len", int, "schedule.")
    counts = _int_list(_field(sched, "mask_counts", list, "schedule."), "schedule.mask_counts")
    try:
        schedule = Schedule(n, length, tuple(counts))
    except ScheduleError as exc:
        raise TraceFormatError("schedule.mask_counts", str(exc)) from exc

    steps = []
    for i, raw in enumerate(_field(data, "steps", list, "")):
        path = f"steps[{i}]."
        k = _field(raw, "k", int, path)
        if not 1 <= k <= n:
            raise TraceFormatError(f"{path}k", f"{k} outside [1, {n}]")
        committed = _int_list(_field(raw, "committed", list, path), f"{path}committed")
        conf = _field(raw, "confidence", list, path)
        if len(conf) != length or not all(
            isinstance(c, (int, float)) and not isinstance(c, bool) for c in conf
        ):
            raise TraceFormatError(f"{path}confidence", f"expected {length} numbers")
        prediction = _int_list(_field(raw, "prediction", list, path), f"{path}prediction")
        steps.append(TraceStep(k, tuple(committed), tuple(float(c) for c in conf), tuple(prediction)))

    final = _int_list(_field(data, "finalization_step", list, ""), "finalization_step")
    if len(final) != length:
        raise TraceFormatError("finalization_step", f"expected {length} entries, got {len(final)}")
    prompt = _int_list(_field(data, "prompt_ids", list, ""), "prompt_ids")
    output = data.get("output_ids")
    if output is not None:
        output = tuple(_int_list(output, "output_ids"))
        if len(output) != length:
            raise TraceFormatError("output_ids", f"expected {length} ids, got {len(output)}")
    tokens = data.get("output_tokens")
    if tokens is not None:
        if not isinstance(tokens, list) or len(tokens) != length or not all(
            isinstance(t, str) for t in tokens
        ):
            raise TraceFormatError("output_tokens", f"expected {length} strings")
        tokens = tuple(tokens)
    return DecodeTrace(
        schedule=schedule,
        strategy=strategy,
        prompt_ids=tuple(prompt),
        steps=steps,
        finalization_step=final,
        output_ids=output,
        output_tokens=tokens,
    )


def save_trace(trace: DecodeTrace, path: PathLike, vocab: Vocabulary | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(trace.to_dict(vocab), indent=2) + "\n", encoding="utf-8")
    return path


def load_trace(path: PathLike) -> DecodeTrace:
    """Read a trace JSON file.

    Raises:
        TraceFormatError: If the file is not JSON or a field is malformed.
    """
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TraceFormatError("$", f"not valid JSON ({exc.msg})") from exc
    return trace_from_dict(data)
