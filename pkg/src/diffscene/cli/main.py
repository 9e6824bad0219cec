"""diffscene command-line interface.

Built with Typer. Library failures exit with code 2, usage errors with code 1.
"""

from __future__ import annotations

import json
import platform
import sys
from collections.abc import Sequence
from functools import partial
from pathlib import Path
from typing import Any, Optional

import click
import typer
from typer.core import TyperGroup
from rich.console import Console
from rich.markup import escape
from rich.table import Table

import diffscene
from diffscene.core.config import (
    RunConfig,
    load_config_file,
    output_lock,
    resolve,
    write_manifest,
)
from diffscene.core.errors import DiffSceneError
from diffscene.core.logging import console as err_console
from diffscene.core.logging import get_logger, setup_logging
from diffscene.core.presets import get_preset, list_presets

console = Console()
logger = get_logger(__name__)

# ---------------------------------------------------------------------------
# Root app
# ---------------------------------------------------------------------------


class _DiffSceneGroup(TyperGroup):
    """Turns library failures inside any command into exit code 2."""

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except (DiffSceneError, OSError) as exc:
            _handle_error(exc)


def _handle_error(exc: Exception) -> None:
    """Print a rich-formatted error and exit with code 2."""
    err_console.print(f"[bold red]Error:[/bold red] {escape(str(exc))}", soft_wrap=True)
    raise typer.Exit(code=2)


app = typer.Typer(
    cls=_DiffSceneGroup,
    name="diffscene",
    help="diffscene: masked-diffusion text generation conditioned on synthetic scenes.",
    add_completion=False,
    no_args_is_help=True,
    rich_markup_mode="rich",
)

TRAIN_LOG = "train_log.jsonl"
PREDICTIONS = "predictions.jsonl"


@app.callback()
def main(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log per-step detail."),
) -> None:
    setup_logging(verbose)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


class StageFailure(DiffSceneError):
    """A pipeline stage failed; the message names the stage."""


def _conflict(first: str, second: str) -> None:
    raise click.UsageError(f"{first} and {second} cannot be used together")


def _parse_strategy(text: str, seed: int):
    from diffscene.decode.sampler import RemaskStrategy

    try:
        return RemaskStrategy.parse(text.replace("-", "_"), seed)
    except ValueError:
        raise typer.BadParameter(
            f"unknown strategy {text!r}; use low-confidence or random", param_hint="--strategy"
        ) from None


def _parse_task_mix(text: str) -> dict[str, float]:
    mix: dict[str, float] = {}
    for part in text.split(","):
        name, sep, value = part.partition("=")
        if not sep:
            raise typer.BadParameter(f"expected task=weight, got {part!r}", param_hint="--task-mix")
        try:
            mix[name.strip()] = float(value)
        except ValueError:
            raise typer.BadParameter(f"weight {value!r} is not a number", param_hint="--task-mix") from None
    return mix


def _check_task(name: str, hint: str = "--task") -> str:
    from diffscene.scenegen.tasks import Task

    try:
        return Task(name).value
    except ValueError:
        known = ", ".join(t.value for t in Task)
        raise typer.BadParameter(f"unknown task {name!r}; known: {known}", param_hint=hint) from None


def _print_report(report) -> None:
    table = Table(title=f"Metrics ({report.n_instances} instances)", show_lines=True)
    table.add_column("Task", style="cyan")
    table.add_column("Metric", style="green")
    table.add_column("Value", justify="right")
    for _, row in report.to_frame().iterrows():
        table.add_row(str(row["task"]), str(row["metric"]), f"{row['value']:.4f}")
    console.print(table)


def _load_split(data: Path, task: Optional[str], limit: Optional[int]):
    from diffscene.scenegen.dataset import load_dataset

    dataset = load_dataset(data)
    if task is not None:
        dataset = dataset.by_task(task)
    if limit is not None:
        dataset = dataset.subset(range(min(limit, len(dataset))))
    return dataset


# ---------------------------------------------------------------------------
# Shared command bodies (also used by the smoke pipeline)
# ---------------------------------------------------------------------------


DATA_DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "size": 1000,
    "task": None,
    "task_mix": None,
    "grid_size": 8,
    "max_objects": 6,
    "feature_dim": 32,
    "coord_bins": 100,
    "workers": 1,
    "overwrite": False,
}


def run_gen_data(out: Path, settings: dict[str, Any]) -> dict:
    from diffscene.scenegen.dataset import build_dataset
    from diffscene.scenegen.scenes import SceneSpec
    from diffscene.scenegen.tasks import Task
    from diffscene.vocab.tokens import default_vocab

    if settings["task"] is not None:
        mix = {settings["task"]: 1.0}
    elif settings["task_mix"] is not None:
        mix = settings["task_mix"]
    else:
        mix = {t.value: 1.0 / len(Task) for t in Task}
    spec = SceneSpec(
        grid_size=settings["grid_size"],
        max_objects=settings["max_objects"],
        feature_dim=settings["feature_dim"],
    )
    manifest = build_dataset(
        spec,
        settings["seed"],
        settings["size"],
        mix,
        out,
        vocab=default_vocab(settings["coord_bins"]),
        overwrite=settings["overwrite"],
        workers=settings["workers"],
    )
    write_manifest(
        RunConfig("gen-data", settings["seed"], out, {**settings, "task_mix": mix}),
        ["instances.bin", "vocab.txt"],
    )
    return manifest


TRAIN_DEFAULTS: dict[str, Any] = {
    "preset": "small",
    "seed": 0,
    "steps": None,
    "epochs": None,
    "batch_size": None,
    "lr": None,
    "warmup_frac": 0.03,
    "checkpoint_every": 0,
    "reduction": "mean",
    "d": None,
    "n_layers": None,
    "n_heads": None,
}


def _fill_from_preset(settings: dict[str, Any]) -> dict[str, Any]:
    preset = get_preset(settings["preset"])
    filled = dict(settings)
    for key in ("d", "n_layers", "n_heads", "batch_size"):
        if filled[key] is None:
            filled[key] = getattr(preset, key)
    if filled["steps"] is None and filled["epochs"] is None:
        filled["steps"] = preset.steps
    return filled


def run_train(
    stage: str,
    data: Path,
    out: Path,
    model: Optional[Path],
    settings: dict[str, Any],
):
    from diffscene.diffusion.trainer import Stage, TrainConfig, train
    from diffscene.net.checkpoint import load_checkpoint
    from diffscene.net.model import AttentionMode, ModelConfig, init_params
    from diffscene.scenegen.dataset import load_dataset

    settings = _fill_from_preset(settings)
    dataset = load_dataset(data)
    if model is not None:
        params = load_checkpoint(model)
    else:
        config = ModelConfig(
            vocab_size=len(dataset.vocab),
            d=settings["d"],
            n_layers=settings["n_layers"],
            n_heads=settings["n_heads"],
            feature_dim=dataset.spec.feature_dim,
            n_patches=dataset.spec.n_patches,
            attention_mode=AttentionMode.CAUSAL if stage == "ar_baseline" else AttentionMode.BIDIRECTIONAL,
            vocab_hash=dataset.vocab_hash,
        )
        params = init_params(config, settings["seed"])
    config = TrainConfig(
        stage=Stage(stage),
        epochs=settings["epochs"],
        max_steps=settings["steps"],
        batch_size=settings["batch_size"],
        lr=settings["lr"],
        warmup_frac=settings["warmup_frac"],
        seed=settings["seed"],
        checkpoint_every=settings["checkpoint_every"],
        reduction=settings["reduction"],
    )
    log_path = out / TRAIN_LOG
    log_path.unlink(missing_ok=True)
    result = train(config, dataset, params, log_path=log_path, checkpoint_dir=out)
    inputs = [data / "instances.bin"] + ([model] if model is not None else [])
    write_manifest(
        RunConfig(stage, settings["seed"], out, settings, tuple(inputs)),
        [result.checkpoint, log_path],
    )
    return result


def run_eval(model: Path, data: Path, out: Path, settings: dict[str, Any], task: Optional[str] = None):
    from diffscene.decode.sampler import DecoderSettings
    from diffscene.eval.harness import evaluate
    from diffscene.net.checkpoint import load_checkpoint

    params = load_checkpoint(model)
    dataset = _load_split(data, task, None)
    decoder = DecoderSettings(
        steps=settings["timesteps"],
        strategy=_parse_strategy(settings["strategy"], settings["seed"]),
        paradigm=settings["paradigm"],
        seed=settings["seed"],
    )
    report = evaluate(params, dataset, decoder)
    json_path, csv_path = report.write(out)
    write_manifest(
        RunConfig("eval", settings["seed"], out, settings, (model, data / "instances.bin")),
        [json_path, csv_path],
    )
    return report


# ---------------------------------------------------------------------------
# diffscene gen-data
# ---------------------------------------------------------------------------


@app.command("gen-data")
def gen_data(
    out: Path = typer.Option(..., "--out", help="Dataset directory to create."),
    seed: Optional[int] = typer.Option(None, "--seed", help="Root seed [default: 0]."),
    size: Optional[int] = typer.Option(None, "--size", help="Number of instances [default: 1000]."),
    task: Optional[str] = typer.Option(None, "--task", help="Generate a single task."),
    task_mix: Optional[str] = typer.Option(
        None, "--task-mix", help="Task proportions, e.g. caption=0.5,detect=0.5."
    ),
    grid_size: Optional[int] = typer.Option(None, "--grid-size", help="Scene grid side G [default: 8]."),
    max_objects: Optional[int] = typer.Option(None, "--max-objects", help="Objects per scene [default: 6]."),
    feature_dim: Optional[int] = typer.Option(None, "--feature-dim", help="Feature width [default: 32]."),
    coord_bins: Optional[int] = typer.Option(None, "--coord-bins", help="Coordinate bins [default: 100]."),
    workers: Optional[int] = typer.Option(None, "--workers", help="Generator processes [default: 1]."),
    overwrite: Optional[bool] = typer.Option(None, "--overwrite", help="Replace an existing dataset."),
    config: Optional[Path] = typer.Option(None, "--config", help="JSON/YAML config file."),
) -> None:
    """Generate a synthetic scene/task dataset."""
    if task is not None and task_mix is not None:
        _conflict("--task", "--task-mix")
    flags = {
        "seed": seed,
        "size": size,
        "task": _check_task(task) if task is not None else None,
        "task_mix": _parse_task_mix(task_mix) if task_mix is not None else None,
        "grid_size": grid_size,
        "max_objects": max_objects,
        "feature_dim": feature_dim,
        "coord_bins": coord_bins,
        "workers": workers,
        "overwrite": overwrite,
    }
    settings = resolve(DATA_DEFAULTS, load_config_file(config), flags)
    with output_lock(out):
        manifest = run_gen_data(out, settings)
    counts = ", ".join(f"{k}={v}" for k, v in manifest["counts"].items() if v)
    console.print(f"[green]Wrote {manifest['size']} instances ({counts}) -> {out}[/green]")


# ---------------------------------------------------------------------------
# Training commands
# ---------------------------------------------------------------------------


def _train_command(
    stage: str,
    data: Path,
    out: Path,
    model: Optional[Path],
    config: Optional[Path],
    flags: dict[str, Any],
) -> None:
    settings = resolve(TRAIN_DEFAULTS, load_config_file(config), flags)
    with output_lock(out):
        result = run_train(stage, data, out, model, settings)
    final = result.log[-1]["loss"] if result.log else float("nan")
    console.print(
        f"[green]{stage}: {len(result.log)} steps, final loss {final:.4f} -> {result.checkpoint}[/green]"
    )


def _train_flags(
    preset, seed, steps, epochs, batch_size, lr, warmup_frac, checkpoint_every, reduction, d, layers, heads
) -> dict[str, Any]:
    return {
        "preset": preset,
        "seed": seed,
        "steps": steps,
        "epochs": epochs,
        "batch_size": batch_size,
        "lr": lr,
        "warmup_frac": warmup_frac,
        "checkpoint_every": checkpoint_every,
        "reduction": reduction,
        "d": d,
        "n_layers": layers,
        "n_heads": heads,
    }


_DATA_OPT = typer.Option(..., "--data", help="Dataset directory.")
_OUT_OPT = typer.Option(..., "--out", help="Output directory.")
_CONFIG_OPT = typer.Option(None, "--config", help="JSON/YAML config file.")
_PRESET_OPT = typer.Option(None, "--preset", help="Model/training preset [default: small].")
_SEED_OPT = typer.Option(None, "--seed", help="Seed [default: 0].")
_STEPS_OPT = typer.Option(None, "--steps", help="Optimizer steps (overrides --epochs).")
_EPOCHS_OPT = typer.Option(None, "--epochs", help="Passes over the dataset.")
_BATCH_OPT = typer.Option(None, "--batch-size", help="Instances per step.")
_LR_OPT = typer.Option(None, "--lr", help="Peak learning rate [default: per stage].")
_WARMUP_OPT = typer.Option(None, "--warmup-frac", help="Warmup fraction [default: 0.03].")
_CKPT_OPT = typer.Option(None, "--checkpoint-every", help="Checkpoint interval in steps.")
_REDUCTION_OPT = typer.Option(None, "--reduction", help="Loss reduction: mean, sum or inverse_t.")
_D_OPT = typer.Option(None, "--d", help="Hidden width of a new model.")
_LAYERS_OPT = typer.Option(None, "--layers", help="Block count of a new model.")
_HEADS_OPT = typer.Option(None, "--heads", help="Head count of a new model.")


@app.command()
def pretrain(
    data: Path = _DATA_OPT,
    out: Path = _OUT_OPT,
    model: Optional[Path] = typer.Option(None, "--model", help="Start from this checkpoint."),
    config: Optional[Path] = _CONFIG_OPT,
    preset: Optional[str] = _PRESET_OPT,
    seed: Optional[int] = _SEED_OPT,
    steps: Optional[int] = _STEPS_OPT,
    epochs: Optional[int] = _EPOCHS_OPT,
    batch_size: Optional[int] = _BATCH_OPT,
    lr: Optional[float] = _LR_OPT,
    warmup_frac: Optional[float] = _WARMUP_OPT,
    checkpoint_every: Optional[int] = _CKPT_OPT,
    reduction: Optional[str] = _REDUCTION_OPT,
    d: Optional[int] = _D_OPT,
    layers: Optional[int] = _LAYERS_OPT,
    heads: Optional[int] = _HEADS_OPT,
) -> None:
    """Text-only mask-and-predict pretraining of the trunk."""
    flags = _train_flags(
        preset, seed, steps, epochs, batch_size, lr, warmup_frac, checkpoint_every, reduction, d, layers, heads
    )
    _train_command("text_pretrain", data, out, model, config, flags)


@app.command()
def align(
    data: Path = _DATA_OPT,
    out: Path = _OUT_OPT,
    model: Path = typer.Option(..., "--model", help="Pretrained checkpoint."),
    config: Optional[Path] = _CONFIG_OPT,
    preset: Optional[str] = _PRESET_OPT,
    seed: Optional[int] = _SEED_OPT,
    steps: Optional[int] = _STEPS_OPT,
    epochs: Optional[int] = _EPOCHS_OPT,
    batch_size: Optional[int] = _BATCH_OPT,
    lr: Optional[float] = _LR_OPT,
    warmup_frac: Optional[float] = _WARMUP_OPT,
    checkpoint_every: Optional[int] = _CKPT_OPT,
    reduction: Optional[str] = _REDUCTION_OPT,
) -> None:
    """Projector alignment: train only the scene projector."""
    flags = _train_flags(
        preset, seed, steps, epochs, batch_size, lr, warmup_frac, checkpoint_every, reduction, None, None, None
    )
    _train_command("align", data, out, model, config, flags)


@app.command()
def finetune(
    data: Path = _DATA_OPT,
    out: Path = _OUT_OPT,
    model: Path = typer.Option(..., "--model", help="Aligned checkpoint."),
    config: Optional[Path] = _CONFIG_OPT,
    preset: Optional[str] = _PRESET_OPT,
    seed: Optional[int] = _SEED_OPT,
    steps: Optional[int] = _STEPS_OPT,
    epochs: Optional[int] = _EPOCHS_OPT,
    batch_size: Optional[int] = _BATCH_OPT,
    lr: Optional[float] = _LR_OPT,
    warmup_frac: Optional[float] = _WARMUP_OPT,
    checkpoint_every: Optional[int] = _CKPT_OPT,
    reduction: Optional[str] = _REDUCTION_OPT,
) -> None:
    """Full instruction tuning of every tensor."""
    flags = _train_flags(
        preset, seed, steps, epochs, batch_size, lr, warmup_frac, checkpoint_every, reduction, None, None, None
    )
    _train_command("full", data, out, model, config, flags)


@app.command("train-ar")
def train_ar(
    data: Path = _DATA_OPT,
    out: Path = _OUT_OPT,
    model: Optional[Path] = typer.Option(None, "--model", help="Start from this checkpoint."),
    config: Optional[Path] = _CONFIG_OPT,
    preset: Optional[str] = _PRESET_OPT,
    seed: Optional[int] = _SEED_OPT,
    steps: Optional[int] = _STEPS_OPT,
    epochs: Optional[int] = _EPOCHS_OPT,
    batch_size: Optional[int] = _BATCH_OPT,
    lr: Optional[float] = _LR_OPT,
    warmup_frac: Optional[float] = _WARMUP_OPT,
    checkpoint_every: Optional[int] = _CKPT_OPT,
    d: Optional[int] = _D_OPT,
    layers: Optional[int] = _LAYERS_OPT,
    heads: Optional[int] = _HEADS_OPT,
) -> None:
    """Train the causal next-token baseline on the same trunk."""
    flags = _train_flags(
        preset, seed, steps, epochs, batch_size, lr, warmup_frac, checkpoint_every, None, d, layers, heads
    )
    _train_command("ar_baseline", data, out, model, config, flags)


# ---------------------------------------------------------------------------
# diffscene decode
# ---------------------------------------------------------------------------


DECODE_DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "timesteps": 8,
    "strategy": "low_confidence",
    "paradigm": "diffusion",
    "gen_len": None,
    "task": None,
    "limit": None,
}


@app.command()
def decode(
    model: Path = typer.Option(..., "--model", help="Checkpoint to decode with."),
    data: Path = _DATA_OPT,
    out: Path = _OUT_OPT,
    timesteps: Optional[int] = typer.Option(None, "--timesteps", help="Decoding iterations N [default: 8]."),
    strategy: Optional[str] = typer.Option(
        None, "--strategy", help="Remasking: low-confidence or random [default: low-confidence]."
    ),
    paradigm: Optional[str] = typer.Option(None, "--paradigm", help="diffusion or ar [default: diffusion]."),
    gen_len: Optional[int] = typer.Option(None, "--gen-len", help="Generated length [default: task length]."),
    task: Optional[str] = typer.Option(None, "--task", help="Only decode instances of this task."),
    limit: Optional[int] = typer.Option(None, "--limit", help="Decode at most this many instances."),
    seed: Optional[int] = _SEED_OPT,
    config: Optional[Path] = _CONFIG_OPT,
) -> None:
    """Decode dataset prompts and write predictions plus per-instance traces."""
    from diffscene.decode.sampler import Paradigm, decode_ar, decode_diffusion
    from diffscene.decode.trace import save_trace
    from diffscene.eval.harness import check_compatible
    from diffscene.net.checkpoint import load_checkpoint
    from diffscene.net.model import project
    from diffscene.vocab.tokens import decode_text

    flags = {
        "seed": seed,
        "timesteps": timesteps,
        "strategy": strategy,
        "paradigm": paradigm,
        "gen_len": gen_len,
        "task": _check_task(task) if task is not None else None,
        "limit": limit,
    }
    settings = resolve(DECODE_DEFAULTS, load_config_file(config), flags)
    remask_strategy = _parse_strategy(settings["strategy"], settings["seed"])
    try:
        mode = Paradigm(settings["paradigm"])
    except ValueError:
        raise typer.BadParameter("use diffusion or ar", param_hint="--paradigm") from None
    if mode is Paradigm.AR and strategy is not None:
        _conflict("--strategy", "--paradigm ar")

    with output_lock(out):
        params = load_checkpoint(model)
        dataset = _load_split(data, settings["task"], settings["limit"])
        check_compatible(params, dataset)
        v = dataset.vocab
        lines = []
        for i, inst in enumerate(dataset.instances):
            length = settings["gen_len"] or inst.gen_len
            C_v = project(params, dataset.features(i))
            if mode is Paradigm.AR:
                ids = decode_ar(params, C_v, inst.prompt_ids, length)
            else:
                ids, trace = decode_diffusion(
                    params, C_v, inst.prompt_ids, length, settings["timesteps"], remask_strategy
                )
                save_trace(trace, out / "traces" / f"trace_{i:05d}.json", v)
            lines.append(
                json.dumps(
                    {
                        "index": i,
                        "task": inst.task.value,
                        "prompt": decode_text(v, inst.prompt_ids),
                        "output_ids": [int(t) for t in ids],
                        "output_text": decode_text(v, ids, strip_pad=True),
                    }
                )
            )
        (out / PREDICTIONS).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        write_manifest(
            RunConfig("decode", settings["seed"], out, settings, (model, data / "instances.bin")),
            [out / PREDICTIONS],
        )
    console.print(f"[green]Decoded {len(lines)} instances -> {out}[/green]")


# ---------------------------------------------------------------------------
# diffscene eval
# ---------------------------------------------------------------------------


EVAL_DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "timesteps": 8,
    "strategy": "low_confidence",
    "paradigm": "diffusion",
}


@app.command("eval")
def eval_cmd(
    model: Path = typer.Option(..., "--model", help="Checkpoint to evaluate."),
    data: Path = _DATA_OPT,
    out: Path = _OUT_OPT,
    timesteps: Optional[int] = typer.Option(None, "--timesteps", help="Decoding iterations N [default: 8]."),
    strategy: Optional[str] = typer.Option(None, "--strategy", help="low-confidence or random."),
    paradigm: Optional[str] = typer.Option(None, "--paradigm", help="diffusion or ar [default: diffusion]."),
    task: Optional[str] = typer.Option(None, "--task", help="Only evaluate this task."),
    seed: Optional[int] = _SEED_OPT,
    config: Optional[Path] = _CONFIG_OPT,
) -> None:
    """Decode a split and write report.json / report.csv."""
    flags = {"seed": seed, "timesteps": timesteps, "strategy": strategy, "paradigm": paradigm}
    settings = resolve(EVAL_DEFAULTS, load_config_file(config), flags)
    if settings["paradigm"] not in ("diffusion", "ar"):
        raise typer.BadParameter("use diffusion or ar", param_hint="--paradigm")
    with output_lock(out):
        report = run_eval(model, data, out, settings, _check_task(task) if task is not None else None)
    _print_report(report)


# ---------------------------------------------------------------------------
# diffscene ablate
# ---------------------------------------------------------------------------


ABLATE_DEFAULTS: dict[str, Any] = {
    "kind": None,
    "seed": 0,
    "timesteps": 8,
    "strategy": None,
    "seeds": 5,
    "min_objects": 3,
    "task": None,
}


@app.command()
def ablate(
    model: Path = typer.Option(..., "--model", help="Diffusion-trained checkpoint."),
    data: Path = _DATA_OPT,
    out: Path = _OUT_OPT,
    kind: Optional[str] = typer.Option(
        None, "--kind", help="remask_strategy, timesteps, paradigm or finalization."
    ),
    ar_model: Optional[Path] = typer.Option(None, "--ar-model", help="Causal baseline (paradigm)."),
    timesteps: Optional[int] = typer.Option(
        None, "--timesteps", help="Fixed N for strategy/finalization runs [default: 8]."
    ),
    strategy: Optional[str] = typer.Option(None, "--strategy", help="Strategy for finalization runs."),
    seeds: Optional[int] = typer.Option(
        None, "--seeds", help="Random-remasking seeds averaged into one row [default: 5]."
    ),
    min_objects: Optional[int] = typer.Option(
        None, "--min-objects", help="Scene size filter for paradigm runs [default: 3]."
    ),
    task: Optional[str] = typer.Option(None, "--task", help="Only use instances of this task."),
    seed: Optional[int] = _SEED_OPT,
    config: Optional[Path] = _CONFIG_OPT,
) -> None:
    """Run one ablation and write ablation_<kind>.csv."""
    from diffscene.eval.ablation import AblationKind, run_ablation
    from diffscene.net.checkpoint import load_checkpoint

    flags = {
        "kind": kind,
        "seed": seed,
        "timesteps": timesteps,
        "strategy": strategy,
        "seeds": seeds,
        "min_objects": min_objects,
        "task": task,
    }
    settings = resolve(ABLATE_DEFAULTS, load_config_file(config), flags)
    if settings["kind"] is None:
        raise typer.BadParameter("an ablation kind is required", param_hint="--kind")
    try:
        ablation = AblationKind(str(settings["kind"]).replace("-", "_"))
    except ValueError:
        raise typer.BadParameter(
            "use remask_strategy, timesteps, paradigm or finalization", param_hint="--kind"
        ) from None
    settings["kind"] = ablation.value
    if settings["strategy"] is not None and ablation is not AblationKind.FINALIZATION:
        _conflict("--strategy", f"--kind {ablation.value}")
    remask_strategy = (
        _parse_strategy(settings["strategy"], settings["seed"])
        if settings["strategy"] is not None
        else None
    )
    split_task = _check_task(settings["task"]) if settings["task"] is not None else None

    with output_lock(out):
        params: Any = load_checkpoint(model)
        inputs = [model, data / "instances.bin"]
        if ar_model is not None:
            params = {"diffusion": params, "ar": load_checkpoint(ar_model)}
            inputs.append(ar_model)
        dataset = _load_split(data, split_task, None)
        result = run_ablation(
            ablation,
            params,
            dataset,
            steps=settings["timesteps"],
            seeds=settings["seeds"],
            min_objects=settings["min_objects"],
            base_seed=settings["seed"],
            strategy=remask_strategy,
        )
        csv_path = result.write(out)
        write_manifest(RunConfig("ablate", settings["seed"], out, settings, tuple(inputs)), [csv_path])
    typer.echo(result.to_text())


# ---------------------------------------------------------------------------
# diffscene trace-viz / plot-log
# ---------------------------------------------------------------------------


@app.command("trace-viz")
def trace_viz_cmd(
    trace: Path = typer.Argument(..., help="Trace JSON written by 'diffscene decode'."),
    mode: str = typer.Option("ansi", "--mode", help="ansi (terminal) or svg."),
    out: Optional[Path] = typer.Option(None, "--out", help="Write the rendering to this file."),
) -> None:
    """Colour decoded tokens by finalization phase (early / middle / late)."""
    from diffscene.viz.trace_viz import trace_viz

    if mode not in ("ansi", "svg"):
        raise typer.BadParameter("use ansi or svg", param_hint="--mode")
    rendered = trace_viz(trace, mode, out)
    if out is None:
        sys.stdout.write(rendered)
    else:
        console.print(f"[green]Trace rendered -> {out}[/green]")


@app.command("plot-log")
def plot_log(
    log: Path = typer.Argument(..., help="JSON-lines training log."),
    out: Path = typer.Option(..., "--out", help="Output PNG."),
) -> None:
    """Plot loss and learning rate from a training log (requires diffscene[viz])."""
    from diffscene.viz.plots import plot_training_log

    path = plot_training_log(log, out)
    console.print(f"[green]Plot saved -> {path}[/green]")


# ---------------------------------------------------------------------------
# diffscene smoke
# ---------------------------------------------------------------------------


SMOKE_SIZE = 200
SMOKE_STEPS = 100
SMOKE_TIMESTEPS = 4


def pipeline_smoke(seed: int, out: Path) -> Any:
    """Run the whole chain at miniature scale under *out*; returns the report.

    Raises:
        StageFailure: Naming the stage that failed.
    """
    data = out / "data"
    base = {**TRAIN_DEFAULTS, "preset": "tiny", "seed": seed, "steps": SMOKE_STEPS}
    previous: Optional[Path] = None

    def stage(name: str, fn):
        try:
            return fn()
        except DiffSceneError as exc:
            raise StageFailure(f"Stage '{name}' failed: {exc}") from exc

    data_settings = {**DATA_DEFAULTS, "seed": seed, "size": SMOKE_SIZE, "overwrite": True}
    stage("gen-data", lambda: run_gen_data(data, data_settings))
    for name, stage_name, lr in (
        ("pretrain", "text_pretrain", None),
        ("align", "align", None),
        ("finetune", "full", 1e-3),
    ):
        stage_out = out / name
        result = stage(
            name,
            partial(run_train, stage_name, data, stage_out, previous, {**base, "lr": lr}),
        )
        previous = result.checkpoint
    settings = {**EVAL_DEFAULTS, "seed": seed, "timesteps": SMOKE_TIMESTEPS}
    report = stage("eval", lambda: run_eval(previous, data, out / "eval", settings))
    if not report.values_in_range() or report.n_instances != SMOKE_SIZE:
        raise StageFailure("Stage 'eval' produced an incomplete or out-of-range report")
    return report


@app.command()
def smoke(
    out: Path = typer.Option(..., "--out", help="Root directory for every stage's outputs."),
    seed: int = typer.Option(0, "--seed", help="Seed for every stage."),
) -> None:
    """Run gen-data, pretrain, align, finetune and eval at miniature scale."""
    with output_lock(out):
        report = pipeline_smoke(seed, out)
        write_manifest(
            RunConfig("smoke", seed, out, {"size": SMOKE_SIZE, "steps": SMOKE_STEPS, "timesteps": SMOKE_TIMESTEPS}),
            [out / "eval" / "report.json"],
        )
    _print_report(report)
    console.print("[bold green]Smoke pipeline passed.[/bold green]")


# ---------------------------------------------------------------------------
# diffscene info / presets
# ---------------------------------------------------------------------------


def _check_module(name: str) -> tuple[str, str]:
    """Return (version, status_style) for a module."""
    try:
        mod = __import__(name)
        ver = getattr(mod, "__version__", "installed")
        return ver, "green"
    except ImportError:
        return "not installed", "red"


@app.command()
def info() -> None:
    """Show diffscene version, environment and key dependency info."""
    table = Table(title="diffscene Environment", show_lines=True)
    table.add_column("Component", style="cyan")
    table.add_column("Value", style="green")

    table.add_row("diffscene version", diffscene.__version__)
    table.add_row("Python", sys.version.split()[0])
    table.add_row("Platform", platform.platform())

    for mod_name in ("numpy", "scipy", "pandas", "yaml", "rich", "typer", "matplotlib"):
        ver, style = _check_module(mod_name)
        table.add_row(mod_name, f"[{style}]{ver}[/{style}]")

    console.print(table)


@app.command()
def presets() -> None:
    """List the built-in model/training presets."""
    table = Table(title="Presets")
    table.add_column("Name", style="cyan")
    table.add_column("d", justify="right")
    table.add_column("Layers", justify="right")
    table.add_column("Heads", justify="right")
    table.add_column("Batch", justify="right")
    table.add_column("Steps", justify="right")
    table.add_column("Instances", justify="right")
    table.add_column("Description")
    for p in list_presets():
        table.add_row(
            p.name, str(p.d), str(p.n_layers), str(p.n_heads), str(p.batch_size),
            str(p.steps), str(p.dataset_size), p.description,
        )
    console.print(table)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and return the process exit code.

    0 on success, 1 on usage errors (usage printed to stderr), 2 when the
    library raises.
    """
    command = typer.main.get_command(app)
    args = list(argv) if argv is not None else sys.argv[1:]
    try:
        rv = command.main(args=args, prog_name="diffscene", standalone_mode=False)
    except click.UsageError as exc:
        exc.show(file=sys.stderr)
        return 1
    except click.ClickException as exc:
        exc.show(file=sys.stderr)
        return 1
    except click.Abort:
        return 1
    except (DiffSceneError, OSError) as exc:
        err_console.print(f"[bold red]Error:[/bold red] {escape(str(exc))}", soft_wrap=True)
        return 2
    return rv if isinstance(rv, int) else 0


def run() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    run()
