"""Colour decoded tokens by when they were finalized.

Tokens committed in the first third of the decoding steps are drawn in
yellow, the middle third in magenta and the final third in blue.
"""

from __future__ import annotations

import io
from pathlib import Path
from typing import Union

from rich.console import Console
from rich.text import Text

from diffscene.core.errors import TraceFormatError
from diffscene.core.logging import get_logger
from diffscene.decode.trace import PHASES, DecodeTrace, load_trace
from diffscene.vocab.tokens import Vocabulary

logger = get_logger(__name__)

PathLike = Union[str, Path]

PHASE_STYLES: dict[str, str] = {
    "early": "bold yellow",
    "middle": "bold magenta",
    "late": "bold blue",
}
RENDER_WIDTH = 120


def _fit_width(*lines: Text) -> int:
    """Console width that keeps every line on one row."""
    return max(RENDER_WIDTH, *(line.cell_len for line in lines))


def trace_tokens(trace: DecodeTrace, vocab: Vocabulary | None = None) -> list[str]:
    if trace.output_tokens is not None:
        return list(trace.output_tokens)
    if trace.output_ids is None:
        raise TraceFormatError("output_ids", "missing; the trace is incomplete")
    if vocab is not None:
        return [vocab.surface(i) for i in trace.output_ids]
    return [str(i) for i in trace.output_ids]


def token_phases(trace: DecodeTrace) -> list[str]:
    """Phase name (``early``/``middle``/``late``) of every generated position."""
    return [PHASES[p] for p in trace.phases()]


def render_text(trace: DecodeTrace, vocab: Vocabulary | None = None) -> Text:
    text = Text()
    for i, (token, phase) in enumerate(zip(trace_tokens(trace, vocab), token_phases(trace))):
        if i:
            text.append(" ")
        text.append(token, style=PHASE_STYLES[phase])
    return text


def legend() -> Text:
    text = Text("legend: ")
    for i, phase in enumerate(PHASES):
        if i:
            text.append("  ")
        text.append(phase, style=PHASE_STYLES[phase])
    return text


def render_ansi(trace: DecodeTrace, vocab: Vocabulary | None = None) -> str:
    lines = (render_text(trace, vocab), legend())
    console = Console(force_terminal=True, color_system="standard", width=_fit_width(*lines))
    with console.capture() as capture:
        for line in lines:
            console.print(line, soft_wrap=True)
    return capture.get()


def render_svg(trace: DecodeTrace, vocab: Vocabulary | None = None, title: str = "decode trace") -> str:
    lines = (render_text(trace, vocab), legend())
    console = Console(record=True, file=io.StringIO(), force_terminal=True, width=_fit_width(*lines))
    for line in lines:
        console.print(line, soft_wrap=True)
    return console.export_svg(title=title)


def trace_viz(
    trace_path: PathLike,
    mode: str = "ansi",
    out: PathLike | None = None,
    vocab: Vocabulary | None = None,
) -> str:
    """Render a trace file as ANSI text or a standalone SVG.

    Returns the rendered string; with *out*, it is also written there.

    Raises:
        TraceFormatError: If the trace file is malformed.
    """
    trace = load_trace(trace_path)
    if mode == "svg":
        rendered = render_svg(trace, vocab, title=Path(trace_path).stem)
    elif mode == "ansi":
        rendered = render_ansi(trace, vocab)
    else:
        raise ValueError(f"Unknown render mode {mode!r}; use 'ansi' or 'svg'")
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(rendered, encoding="utf-8")
        logger.info("Trace rendered -> %s", out)
    return rendered
