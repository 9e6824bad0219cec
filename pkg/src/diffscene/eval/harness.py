"""Decode a dataset split and aggregate per-task metrics into a report."""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import pandas as pd

from diffscene.core.errors import CompatibilityError
from diffscene.core.logging import get_logger
from diffscene.decode.sampler import DecoderSettings, Paradigm, decode_ar, decode_diffusion
from diffscene.decode.trace import DecodeTrace
from diffscene.eval.metrics import (
    caption_scores,
    detection_scores,
    grounding_acc,
    parse_detection,
)
from diffscene.net.model import Params, project
from diffscene.scenegen.dataset import Dataset
from diffscene.scenegen.scenes import derive_seed
from diffscene.scenegen.tasks import TASK_LENGTHS, Task, TaskInstance
from diffscene.vocab.tokens import Vocabulary, decode_box

logger = get_logger(__name__)

PathLike = Union[str, Path]

REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"


@dataclass
class MetricsReport:
    """Per-task metric maps plus the instance count and decoder settings."""

    n_instances: int
    tasks: dict[str, dict[str, float]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    settings: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_instances": self.n_instances,
            "counts": dict(sorted(self.counts.items())),
            "settings": self.settings,
            "tasks": {t: dict(sorted(m.items())) for t, m in sorted(self.tasks.items())},
        }

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"task": task, "metric": metric, "value": value, "n": self.counts.get(task, 0)}
            for task, metrics in sorted(self.tasks.items())
            for metric, value in sorted(metrics.items())
        ]
        return pd.DataFrame(rows, columns=["task", "metric", "value", "n"])

    def flat(self) -> dict[str, float]:
        """``{"task.metric": value}`` for table building."""
        return {
            f"{task}.{metric}": value
            for task, metrics in sorted(self.tasks.items())
            for metric, value in sorted(metrics.items())
        }

    def values_in_range(self) -> bool:
        return all(0.0 <= v <= 1.0 for m in self.tasks.values() for v in m.values())

    def write(self, out_dir: PathLike) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        json_path = out / REPORT_JSON
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        csv_path = out / REPORT_CSV
        self.to_frame().to_csv(csv_path, index=False, float_format="%.6f")
        return json_path, csv_path


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else 0.0


def truth_detections(inst: TaskInstance, v: Vocabulary):
    return list(parse_detection(inst.target_ids, v).predicted)


def truth_box(inst: TaskInstance, v: Vocabulary):
    return decode_box(v, inst.target_ids[:4])


def evaluate_predictions(
    dataset: Dataset,
    predictions: Sequence[Sequence[int]],
    settings: DecoderSettings | None = None,
    effective_steps: Optional[dict[str, int]] = None,
) -> MetricsReport:
    """Score *predictions* (one token sequence per instance) against the dataset targets.

    Aggregation uses sums over per-instance values with exact float summation,
    so the report does not depend on instance order.
    """
    v = dataset.vocab
    per_task: dict[Task, dict[str, list[float]]] = {}
    malformed: dict[str, int] = {"spans": 0, "bad": 0}
    for inst, pred in zip(dataset.instances, predictions):
        pred = [int(t) for t in pred]
        bucket = per_task.setdefault(inst.task, {})
        if inst.task is Task.CAPTION:
            s = caption_scores(pred, inst.target_ids, v.pad_id)
            bucket.setdefault("exact_match", []).append(s.exact_match)
            bucket.setdefault("token_accuracy", []).append(s.token_accuracy)
            bucket.setdefault("bleu4", []).append(s.bleu4)
        elif inst.task is Task.DETECT:
            parsed = parse_detection(pred, v)
            s = detection_scores(parsed, truth_detections(inst, v))
            for name in ("set_f1_at_05", "precision", "recall", "duplicate_rate"):
                bucket.setdefault(name, []).append(getattr(s, name))
            malformed["spans"] += parsed.n_spans
            malformed["bad"] += parsed.malformed_spans
        elif inst.task is Task.GROUND:
            bucket.setdefault("acc_at_05", []).append(float(grounding_acc(pred, truth_box(inst, v), v)))
        else:
            hit = bool(pred) and pred[0] == inst.target_ids[0]
            bucket.setdefault("accuracy", []).append(float(hit))

    tasks: dict[str, dict[str, float]] = {}
    counts: dict[str, int] = {}
    for task, metrics in per_task.items():
        tasks[task.value] = {name: _mean(values) for name, values in metrics.items()}
        counts[task.value] = len(next(iter(metrics.values())))
    if Task.DETECT in per_task:
        tasks[Task.DETECT.value]["malformed_rate"] = (
            malformed["bad"] / malformed["spans"] if malformed["spans"] else 0.0
        )
    info = settings.as_dict() if settings is not None else {}
    if effective_steps:
        info["effective_steps"] = dict(sorted(effective_steps.items()))
    return MetricsReport(n_instances=len(dataset), tasks=tasks, counts=counts, settings=info)


def check_compatible(params: Params, dataset: Dataset) -> None:
    """Raise :class:`CompatibilityError` unless *params* was built for the dataset's vocabulary."""
    expected = params.config.vocab_hash
    if (expected and expected != dataset.vocab_hash) or params.config.vocab_size != len(dataset.vocab):
        raise CompatibilityError(
            "Model and dataset were built against different vocabularies",
            hint="Evaluate on a dataset generated with the model's vocab.txt.",
        )


def effective_steps_for(task: Task, settings: DecoderSettings) -> int:
    return min(settings.steps, TASK_LENGTHS[task])


def decode_instance(
    params: Params, dataset: Dataset, index: int, settings: DecoderSettings
) -> tuple[np.ndarray, Optional[DecodeTrace]]:
    """Decode one instance; diffusion decoding clamps N to the task length."""
    inst = dataset.instances[index]
    C_v = project(params, dataset.features(index))
    if settings.paradigm is Paradigm.AR:
        return decode_ar(params, C_v, inst.prompt_ids, inst.gen_len), None
    strategy = settings.strategy.with_seed(
        derive_seed(settings.seed, inst.scene.seed, list(Task).index(inst.task))
    )
    n = effective_steps_for(inst.task, settings)
    return decode_diffusion(params, C_v, inst.prompt_ids, inst.gen_len, n, strategy)


def decode_split(
    params: Params, dataset: Dataset, settings: DecoderSettings
) -> tuple[list[np.ndarray], list[Optional[DecodeTrace]]]:
    check_compatible(params, dataset)
    outputs, traces = [], []
    for i in range(len(dataset)):
        ids, trace = decode_instance(params, dataset, i, settings)
        outputs.append(ids)
        traces.append(trace)
    return outputs, traces


def evaluate(params: Params, dataset: Dataset, settings: DecoderSettings | None = None) -> MetricsReport:
    """Decode every instance with *settings* and aggregate per-task metrics.

    Raises:
        CompatibilityError: If the model and dataset vocabularies differ.
    """
    settings = settings or DecoderSettings()
    outputs, _ = decode_split(params, dataset, settings)
    effective = None
    if settings.paradigm is Paradigm.DIFFUSION:
        effective = {
            inst.task.value: effective_steps_for(inst.task, settings) for inst in dataset.instances
        }
    report = evaluate_predictions(dataset, outputs, settings, effective)
    logger.info("Evaluated %d instances (%s)", len(dataset), settings.paradigm.value)
    return report
