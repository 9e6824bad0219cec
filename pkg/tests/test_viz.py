"""Tests for trace rendering and training-curve plots."""

from __future__ import annotations

import json
import re
import xml.etree.ElementTree as ET

import pytest

from diffscene.core.errors import ConfigurationError, TraceFormatError
from diffscene.decode.sampler import decode_diffusion
from diffscene.decode.schedule import build_schedule
from diffscene.decode.trace import DecodeTrace, save_trace
from diffscene.net.model import project
from diffscene.viz.trace_viz import (
    PHASE_STYLES,
    RENDER_WIDTH,
    render_ansi,
    render_svg,
    render_text,
    token_phases,
    trace_viz,
)


@pytest.fixture(scope="module")
def trace_file(tmp_path_factory, tiny_params, dataset):
    cv = project(tiny_params, dataset.features(0))
    _, trace = decode_diffusion(tiny_params, cv, dataset.instances[0].prompt_ids, 9, 3)
    return save_trace(trace, tmp_path_factory.mktemp("viz") / "trace.json", dataset.vocab), trace


class TestTraceViz:
    def test_one_step_per_phase(self, trace_file):
        _, trace = trace_file
        phases = token_phases(trace)
        assert len(phases) == 9
        assert set(phases) == {"early", "middle", "late"}

    def test_ansi(self, trace_file):
        path, trace = trace_file
        rendered = trace_viz(path)
        assert "\x1b[" in rendered
        assert "legend" in rendered
        assert render_text(trace).plain.count(" ") == 8

    def test_svg_written(self, tmp_path, trace_file):
        path, _ = trace_file
        out = tmp_path / "t.svg"
        rendered = trace_viz(path, "svg", out)
        assert out.read_text(encoding="utf-8") == rendered
        root = ET.fromstring(rendered)
        assert root.tag.endswith("svg")

    def test_unknown_mode(self, trace_file):
        with pytest.raises(ValueError):
            trace_viz(trace_file[0], "html")

    def test_incomplete_trace(self, tmp_path, trace_file):
        data = json.loads(trace_file[0].read_text(encoding="utf-8"))
        data.pop("output_ids", None)
        data.pop("output_tokens", None)
        path = tmp_path / "partial.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        with pytest.raises(TraceFormatError):
            trace_viz(path)


def _hand_trace(n_steps: int, token_width: int = 2) -> DecodeTrace:
    """Position i is finalized at step k = N - i, so phases run early to late."""
    return DecodeTrace(
        schedule=build_schedule(n_steps, n_steps),
        strategy="low_confidence",
        prompt_ids=(1,),
        finalization_step=[n_steps - i for i in range(n_steps)],
        output_tokens=tuple(f"t{i:0{token_width}d}" for i in range(n_steps)),
    )


class TestPhaseColours:
    def test_nine_steps_in_thirds(self):
        trace = _hand_trace(9)
        assert trace.phases() == [0, 0, 0, 1, 1, 1, 2, 2, 2]
        styles = [span.style for span in render_text(trace).spans]
        assert styles == ["bold yellow"] * 3 + ["bold magenta"] * 3 + ["bold blue"] * 3
        assert styles == [PHASE_STYLES[p] for p in token_phases(trace)]

    def test_ansi_codes(self):
        rendered = render_ansi(_hand_trace(9))
        assert "\x1b[1;33mt00" in rendered
        assert "\x1b[1;35mt03" in rendered
        assert "\x1b[1;34mt08" in rendered


class TestLongTrace:
    def test_ansi_one_row(self):
        trace = _hand_trace(64, token_width=6)
        assert render_text(trace).cell_len > RENDER_WIDTH
        rendered = re.sub(r"\x1b\[[0-9;]*m", "", render_ansi(trace))
        assert rendered.splitlines()[0] == render_text(trace).plain
        assert rendered.count("\n") == 2

    def test_svg_one_row(self):
        svg = render_svg(_hand_trace(64, token_width=6))
        rows = set(re.findall(r'<text[^>]*clip-path="url\(#[^"]*-line-(\d+)\)"', svg))
        assert rows == {"0", "1"}


class TestPlots:
    def _log(self, tmp_path):
        path = tmp_path / "train_log.jsonl"
        rows = [{"stage": "align", "step": i, "loss": 3.0 - 0.1 * i, "lr": 1e-3} for i in range(5)]
        path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
        return path

    def test_plot_written(self, tmp_path):
        pytest.importorskip("matplotlib")
        from diffscene.viz.plots import plot_training_log

        out = plot_training_log(self._log(tmp_path), tmp_path / "curve.png")
        assert out.exists() and out.stat().st_size > 0

    def test_missing_log(self, tmp_path):
        from diffscene.viz.plots import plot_training_log

        with pytest.raises(ConfigurationError):
            plot_training_log(tmp_path / "nope.jsonl", tmp_path / "x.png")
