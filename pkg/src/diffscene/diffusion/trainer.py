"""Staged training: text pretraining, projector alignment, full tuning and the causal baseline.

Each stage samples shuffled mini-batches, corrupts every target with its own
``t ~ U(0, 1]`` (diffusion stages), takes one AdamW step on the
stage-trainable tensors and appends ``{step, stage, lr, loss}`` to a JSON-lines
log. The learning rate warms up linearly from 0 over the first
``warmup_frac`` of the steps and then follows a cosine decay.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import numpy as np

from diffscene.core.errors import (
    CompatibilityError,
    ConfigurationError,
    NumericError,
    TrainingError,
)
from diffscene.core.logging import get_logger
from diffscene.diffusion.losses import CausalObjective, LossReduction, MaskedObjective
from diffscene.diffusion.masking import forward_mask
from diffscene.net.checkpoint import save_checkpoint
from diffscene.net.model import PROJECTOR_PREFIX, AttentionMode, Params, TrainExample, loss_and_grads
from diffscene.net.optim import DEFAULT_BETAS, AdamWState, adamw_step
from diffscene.scenegen.dataset import Dataset

logger = get_logger(__name__)

PathLike = Union[str, Path]


class Stage(str, Enum):
    TEXT_PRETRAIN = "text_pretrain"
    ALIGN = "align"
    FULL = "full"
    AR_BASELINE = "ar_baseline"


STAGE_LR: dict[Stage, float] = {
    Stage.TEXT_PRETRAIN: 1e-3,
    Stage.ALIGN: 1e-3,
    Stage.FULL: 1e-5,
    Stage.AR_BASELINE: 1e-3,
}


@dataclass(frozen=True)
class TrainConfig:
    """Parameters of one training stage.

    ``max_steps`` wins over ``epochs`` when both are set; with neither, one
    epoch is run. ``lr`` defaults to the stage's peak rate.
    """

    stage: Stage
    epochs: Optional[int] = None
    max_steps: Optional[int] = None
    batch_size: int = 32
    lr: Optional[float] = None
    warmup_frac: float = 0.03
    seed: int = 0
    checkpoint_every: int = 0
    reduction: LossReduction = LossReduction.MEAN
    weight_decay: float = 0.0
    betas: tuple[float, float] = DEFAULT_BETAS

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage", Stage(self.stage))
        object.__setattr__(self, "reduction", LossReduction(self.reduction))
        if self.lr is not None and not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigurationError(f"warmup_frac must lie in [0, 1), got {self.warmup_frac}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigurationError("epochs must be at least 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigurationError("max_steps must be at least 1")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be non-negative")

    @property
    def peak_lr(self) -> float:
        return self.lr if self.lr is not None else STAGE_LR[self.stage]

    def total_steps(self, n_instances: int) -> int:
        if self.max_steps is not None:
            return self.max_steps
        per_epoch = math.ceil(n_instances / self.batch_size)
        return (self.epochs or 1) * per_epoch


def warmup_steps(total: int, warmup_frac: float) -> int:
    return math.ceil(warmup_frac * total) if warmup_frac > 0 else 0


def lr_at(step: int, total: int, peak: float, warmup_frac: float = 0.03) -> float:
    """Linear warmup from 0 to *peak*, then cosine decay towards 0 at *total*."""
    w = warmup_steps(total, warmup_frac)
    if step < w:
        return peak * step / w
    progress = (step - w) / max(1, total - w)
    return peak * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


def trainable_mask(params: Params, stage: Stage) -> dict[str, bool]:
    """Per-tensor trainable flags for *stage*."""
    if stage is Stage.ALIGN:
        return {name: name.startswith(PROJECTOR_PREFIX) for name in params}
    if stage is Stage.TEXT_PRETRAIN:
        return {name: not name.startswith(PROJECTOR_PREFIX) for name in params}
    return {name: True for name in params}


@dataclass
class TrainResult:
    params: Params
    log: list[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None

    @property
    def losses(self) -> list[float]:
        return [record["loss"] for record in self.log]


def _examples(
    config: TrainConfig, dataset: Dataset, indices: np.ndarray, rng: np.random.Generator
) -> list[TrainExample]:
    mask_id = dataset.vocab.mask_id
    out = []
    for i in indices:
        inst = dataset.instances[int(i)]
        target = np.asarray(inst.target_ids, dtype=np.int64)
        if config.stage is Stage.AR_BASELINE:
            flags, t = np.zeros(len(target), dtype=bool), 1.0
        else:
            t = float(1.0 - rng.random())
            flags = forward_mask(target, t, rng, mask_id=mask_id).mask_flags
        features = None if config.stage is Stage.TEXT_PRETRAIN else dataset.features(int(i))
        out.append(
            TrainExample(
                prompt_ids=np.asarray(inst.prompt_ids, dtype=np.int64),
                target_ids=target,
                mask_flags=flags,
                t=t,
                features=features,
            )
        )
    return out


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]


def train(
    config: TrainConfig,
    dataset: Dataset,
    params: Params,
    *,
    log_path: PathLike | None = None,
    checkpoint_dir: PathLike | None = None,
) -> TrainResult:
    """Run one training stage and return the updated parameters and log.

    Args:
        config: Stage configuration.
        dataset: Training instances; features are rendered on demand.
        params: Starting parameters (not modified).
        log_path: JSON-lines log, appended to one record per step.
        checkpoint_dir: Directory for periodic and final checkpoints.

    Raises:
        ConfigurationError: If *dataset* is empty.
        CompatibilityError: If *params* was built for another vocabulary.
        TrainingError: On a non-finite loss; carries the last good checkpoint.
    """
    if len(dataset) == 0:
        raise ConfigurationError("Cannot train on an empty dataset")
    expected_hash = params.config.vocab_hash
    if expected_hash and expected_hash != dataset.vocab_hash:
        raise CompatibilityError(
            "Model and dataset vocabularies differ",
            hint="Train with the vocab.txt the model was initialized for.",
        )

    stage = config.stage
    if stage is Stage.AR_BASELINE:
        objective = CausalObjective(dataset.vocab.pad_id)
        params = params.with_config(replace(params.config, attention_mode=AttentionMode.CAUSAL))
    else:
        objective = MaskedObjective(dataset.vocab.mask_id, config.reduction)
    mask = trainable_mask(params, stage)
    total = config.total_steps(len(dataset))
    peak = config.peak_lr
    rng = np.random.default_rng(config.seed)
    batches = _batches(len(dataset), config.batch_size, rng)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    last_good: Optional[Path] = None
    log: list[dict] = []
    state = AdamWState()

    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a", encoding="utf-8")
    try:
        for step in range(total):
            batch = _examples(config, dataset, next(batches), rng)
            lr = lr_at(step, total, peak, config.warmup_frac)
            try:
                loss, grads = loss_and_grads(params, batch, objective, mask)
            except NumericError as exc:
                if ckpt_dir is not None:
                    last_good = save_checkpoint(
                        params, None, ckpt_dir / f"{stage.value}-last-good.ckpt"
                    )
                raise TrainingError(
                    f"Non-finite loss at step {step} (batch item {exc.instance_index})",
                    last_good_checkpoint=last_good,
                ) from exc
            params, state = adamw_step(
                params, grads, state, lr, config.betas, config.weight_decay
            )
            record = {"step": step, "stage": stage.value, "lr": lr, "loss": loss}
            log.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            logger.debug("%s step %d lr=%.3g loss=%.4f", stage.value, step, lr, loss)
            if ckpt_dir is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                last_good = save_checkpoint(
                    params, None, ckpt_dir / f"{stage.value}-step{step + 1:06d}.ckpt"
                )
    finally:
        if log_file is not None:
            log_file.close()

    final = None
    if ckpt_dir is not None:
        final = save_checkpoint(params, None, ckpt_dir / f"{stage.value}.ckpt")
    logger.info(
        "Finished %s: %d steps, final loss %.4f", stage.value, total, log[-1]["loss"] if log else 0.0
    )
    return TrainResult(params=params, log=log, checkpoint=final)


def read_training_log(path: PathLike) -> list[dict]:
    """Load a JSON-lines training log."""
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records
