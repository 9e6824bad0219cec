"""Comparison tables: remasking strategy, timestep sweep, decoding paradigm and finalization order."""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Union

import pandas as pd

from diffscene.core.errors import ConfigurationError
from diffscene.core.logging import get_logger
from diffscene.decode.sampler import DecoderSettings, Paradigm, RemaskStrategy
from diffscene.decode.trace import PHASES
from diffscene.eval.harness import decode_split, evaluate
from diffscene.net.model import Params
from diffscene.scenegen.dataset import Dataset
from diffscene.scenegen.tasks import Task
from diffscene.vocab.tokens import TokenKind

logger = get_logger(__name__)

PathLike = Union[str, Path]

TIMESTEP_GRID = (1, 2, 4, 8, 16)
RANDOM_SEEDS = 5
PARADIGM_STEPS = 8


class AblationKind(str, Enum):
    REMASK_STRATEGY = "remask_strategy"
    TIMESTEPS = "timesteps"
    PARADIGM = "paradigm"
    FINALIZATION = "finalization"


@dataclass
class AblationResult:
    kind: AblationKind
    table: pd.DataFrame

    def to_text(self) -> str:
        return self.table.to_string(index=False, float_format=lambda x: f"{x:.4f}")

    def write(self, out_dir: PathLike) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"ablation_{self.kind.value}.csv"
        self.table.to_csv(path, index=False, float_format="%.6f")
        return path


def _diffusion_params(params: Params | Mapping[str, Params]) -> Params:
    if isinstance(params, Params):
        return params
    if "diffusion" not in params:
        raise ConfigurationError("A diffusion-trained checkpoint is required")
    return params["diffusion"]


def _remask_table(params: Params, dataset: Dataset, steps: int, seeds: int, base_seed: int) -> pd.DataFrame:
    low = evaluate(params, dataset, DecoderSettings(steps=steps, seed=base_seed))
    rows = [{"strategy": "low_confidence", "steps": steps, "runs": 1, **low.flat()}]
    random_runs = [
        evaluate(
            params,
            dataset,
            DecoderSettings(steps=steps, strategy=RemaskStrategy.random(), seed=base_seed + r),
        ).flat()
        for r in range(seeds)
    ]
    keys = sorted(set().union(*random_runs)) if random_runs else []
    mean = {k: math.fsum(run.get(k, 0.0) for run in random_runs) / len(random_runs) for k in keys}
    rows.append({"strategy": "random", "steps": steps, "runs": seeds, **mean})
    return pd.DataFrame(rows)


def _timestep_table(params: Params, dataset: Dataset, grid: Sequence[int], base_seed: int) -> pd.DataFrame:
    rows = []
    for n in grid:
        report = evaluate(params, dataset, DecoderSettings(steps=n, seed=base_seed))
        rows.append({"steps": n, "strategy": "low_confidence", **report.flat()})
    return pd.DataFrame(rows)


_PARADIGM_COLUMNS = ("set_f1_at_05", "precision", "recall", "duplicate_rate", "malformed_rate")


def _paradigm_table(
    params: Mapping[str, Params], dataset: Dataset, min_objects: int, base_seed: int
) -> pd.DataFrame:
    missing = [name for name in ("diffusion", "ar") if name not in params]
    if missing:
        raise ConfigurationError(
            f"Paradigm comparison needs checkpoints for: {', '.join(missing)}",
            hint="Pass both --model (diffusion) and --ar-model.",
        )
    split = dataset.subset(
        [
            i
            for i, inst in enumerate(dataset.instances)
            if inst.task is Task.DETECT and len(inst.scene.objects) >= min_objects
        ]
    )
    rows = []
    for name, settings in (
        ("diffusion", DecoderSettings(steps=PARADIGM_STEPS, seed=base_seed)),
        ("ar", DecoderSettings(paradigm=Paradigm.AR, seed=base_seed)),
    ):
        report = evaluate(params[name], split, settings)
        detect = report.tasks.get(Task.DETECT.value, {})
        rows.append(
            {
                "paradigm": name,
                "n": len(split),
                **{col: detect.get(col, 0.0) for col in _PARADIGM_COLUMNS},
            }
        )
    return pd.DataFrame(rows)


def _kind_label(dataset: Dataset, token_id: int) -> str:
    if token_id == dataset.vocab.pad_id:
        return "pad"
    kind = dataset.vocab.kind(token_id)
    return "special" if kind is TokenKind.SPECIAL else kind.value


def _finalization_table(
    params: Params, dataset: Dataset, steps: int, base_seed: int, strategy: RemaskStrategy
) -> pd.DataFrame:
    settings = DecoderSettings(steps=steps, strategy=strategy, seed=base_seed)
    outputs, traces = decode_split(params, dataset, settings)
    records = []
    for inst, ids, trace in zip(dataset.instances, outputs, traces):
        for token_id, phase in zip(ids, trace.phases()):
            records.append(
                {"task": inst.task.value, "kind": _kind_label(dataset, int(token_id)), "phase": phase}
            )
    columns = ["task", "kind", "tokens", "mean_phase", *(f"share_{p}" for p in PHASES)]
    if not records:
        return pd.DataFrame(columns=columns)
    frame = pd.DataFrame(records)
    rows = []
    for (task, kind), group in frame.groupby(["task", "kind"], sort=True):
        phases = group["phase"].to_numpy()
        rows.append(
            {
                "task": task,
                "kind": kind,
                "tokens": len(phases),
                "mean_phase": float(phases.mean()),
                **{f"share_{p}": float((phases == i).mean()) for i, p in enumerate(PHASES)},
            }
        )
    return pd.DataFrame(rows, columns=columns)


def run_ablation(
    kind: AblationKind | str,
    params: Params | Mapping[str, Params],
    dataset: Dataset,
    *,
    steps: int = 8,
    seeds: int = RANDOM_SEEDS,
    grid: Sequence[int] = TIMESTEP_GRID,
    min_objects: int = 3,
    base_seed: int = 0,
    strategy: RemaskStrategy | None = None,
) -> AblationResult:
    """Run one comparison and return its table (rows = settings, columns = metrics).

    Args:
        kind: Which comparison to run.
        params: A diffusion checkpoint, or a mapping with ``"diffusion"`` and
            ``"ar"`` entries (required for the paradigm comparison).
        dataset: Evaluation split.
        steps: Fixed N for the strategy and finalization comparisons.
        seeds: Number of random-remasking seeds averaged into one row.
        grid: N values of the timestep sweep.
        min_objects: Minimum object count of detect scenes in the paradigm comparison.
        base_seed: Root seed for per-instance remasking seeds.
        strategy: Remasking used by the finalization comparison
            (low-confidence when omitted).

    Raises:
        ConfigurationError: If a required checkpoint is missing.
    """
    kind = AblationKind(kind)
    if kind is AblationKind.PARADIGM:
        if isinstance(params, Params):
            params = {"diffusion": params}
        table = _paradigm_table(params, dataset, min_objects, base_seed)
    elif kind is AblationKind.REMASK_STRATEGY:
        table = _remask_table(_diffusion_params(params), dataset, steps, seeds, base_seed)
    elif kind is AblationKind.TIMESTEPS:
        table = _timestep_table(_diffusion_params(params), dataset, grid, base_seed)
    else:
        table = _finalization_table(
            _diffusion_params(params), dataset, steps, base_seed, strategy or RemaskStrategy()
        )
    logger.info("Ablation %s: %d rows", kind.value, len(table))
    return AblationResult(kind=kind, table=table)
