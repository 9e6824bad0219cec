"""On-disk task datasets: ``instances.bin`` + ``manifest.json`` + ``vocab.txt``.

``instances.bin`` is a sequence of little-endian records ``[u32 len][payload]``.
The payload holds the task tag, instance flags, the scene, the prompt ids and
the target ids (u16 each).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections.abc import Iterator, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from diffscene.core.errors import ConfigurationError, DatasetError, FormatError, GenerationError
from diffscene.core.logging import get_logger
from diffscene.scenegen.scenes import (
    Scene,
    SceneObject,
    SceneSpec,
    derive_seed,
    generate_scene,
    render_features,
)
from diffscene.scenegen.tasks import Task, TaskInstance, make_target, unique_referents
from diffscene.vocab.tokens import Box, Vocabulary, default_vocab, load_vocab, save_vocab

logger = get_logger(__name__)

PathLike = Union[str, Path]

INSTANCES_NAME = "instances.bin"
MANIFEST_NAME = "manifest.json"
VOCAB_NAME = "vocab.txt"
FORMAT_VERSION = 1

_TASK_CODES: dict[Task, int] = {task: code for code, task in enumerate(Task)}
_CODE_TASKS: dict[int, Task] = {code: task for task, code in _TASK_CODES.items()}
_MAX_INSTANCE_ATTEMPTS = 100

_HEADER = struct.Struct("<BBhh")
_SCENE = struct.Struct("<QHHH")
_OBJECT = struct.Struct("<HHdddd")
_LEN = struct.Struct("<I")
_U16 = struct.Struct("<H")


# ---------------------------------------------------------------------------
# Apportionment and instance construction
# ---------------------------------------------------------------------------


def apportion(task_mix: Mapping[Task, float], size: int) -> dict[Task, int]:
    """Split *size* across tasks by largest remainder.

    Ties in the fractional remainder go to the task listed first in
    :class:`Task` order.

    Raises:
        ConfigurationError: If proportions are negative or do not sum to 1.
    """
    if any(p < 0 for p in task_mix.values()):
        raise ConfigurationError("Task proportions must be non-negative")
    total = math.fsum(task_mix.values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigurationError(
            f"Task proportions sum to {total}, expected 1",
            hint="e.g. --task-mix caption=0.5,detect=0.5",
        )
    order = [t for t in Task if t in task_mix]
    quotas = {t: task_mix[t] * size for t in order}
    counts = {t: int(math.floor(quotas[t])) for t in order}
    remaining = size - sum(counts.values())
    by_remainder = sorted(order, key=lambda t: (-(quotas[t] - counts[t]), order.index(t)))
    for t in by_remainder[:remaining]:
        counts[t] += 1
    return counts


def make_instance(seed: int, index: int, task: Task, spec: SceneSpec, v: Vocabulary) -> TaskInstance:
    """Deterministically build instance *index* of a dataset seeded with *seed*."""
    for attempt in range(_MAX_INSTANCE_ATTEMPTS):
        scene_seed = derive_seed(seed, index, attempt)
        scene = generate_scene(scene_seed, spec)
        rng = np.random.default_rng(derive_seed(scene_seed, 1))
        ref_object = query_class = None
        if task is Task.GROUND:
            candidates = unique_referents(scene)
            if not candidates:
                continue
            ref_object = candidates[int(rng.integers(len(candidates)))]
        elif task is Task.COUNT:
            present = sorted({o.class_id for o in scene.objects})
            if present and rng.random() < 0.5:
                query_class = present[int(rng.integers(len(present)))]
            else:
                query_class = int(rng.integers(spec.n_classes))
        return make_target(
            scene, task, v, ref_object, query_class=query_class, n_object_classes=spec.n_classes
        )
    raise GenerationError(
        f"No usable scene for {task.value} instance {index} after {_MAX_INSTANCE_ATTEMPTS} attempts"
    )


def _make_instance_job(args: tuple) -> TaskInstance:
    return make_instance(*args)


# ---------------------------------------------------------------------------
# Record codec
# ---------------------------------------------------------------------------


def encode_record(inst: TaskInstance) -> bytes:
    scene = inst.scene
    parts = [
        _HEADER.pack(
            _TASK_CODES[inst.task],
            1 if inst.truncated else 0,
            -1 if inst.ref_object is None else inst.ref_object,
            -1 if inst.query_class is None else inst.query_class,
        ),
        _SCENE.pack(scene.seed, scene.grid_size, scene.scene_class_id, len(scene.objects)),
    ]
    for o in scene.objects:
        parts.append(_OBJECT.pack(o.class_id, o.attribute_id, *o.box.as_tuple()))
    for ids in (inst.prompt_ids, inst.target_ids):
        parts.append(_U16.pack(len(ids)))
        parts.append(struct.pack(f"<{len(ids)}H", *ids))
    payload = b"".join(parts)
    return _LEN.pack(len(payload)) + payload


def _unpack(fmt: struct.Struct, buf: bytes, pos: int, base: int) -> tuple[tuple, int]:
    if pos + fmt.size > len(buf):
        raise FormatError("Truncated record payload", base + pos)
    return fmt.unpack_from(buf, pos), pos + fmt.size


def decode_record(payload: bytes, base: int = 0) -> TaskInstance:
    (code, flags, ref, query), pos = _unpack(_HEADER, payload, 0, base)
    if code not in _CODE_TASKS:
        raise FormatError(f"Unknown task code {code}", base)
    (seed, grid, scene_class, n_obj), pos = _unpack(_SCENE, payload, pos, base)
    objects = []
    for _ in range(n_obj):
        (cls, attr, x1, y1, x2, y2), pos = _unpack(_OBJECT, payload, pos, base)
        objects.append(SceneObject(cls, attr, Box(x1, y1, x2, y2)))
    id_lists = []
    for _ in range(2):
        (n,), pos = _unpack(_U16, payload, pos, base)
        fmt = struct.Struct(f"<{n}H")
        ids, pos = _unpack(fmt, payload, pos, base)
        id_lists.append(tuple(ids))
    if pos != len(payload):
        raise FormatError("Trailing bytes in record payload", base + pos)
    return TaskInstance(
        task=_CODE_TASKS[code],
        scene=Scene(grid, scene_class, tuple(objects), seed),
        prompt_ids=id_lists[0],
        target_ids=id_lists[1],
        ref_object=None if ref < 0 else ref,
        query_class=None if query < 0 else query,
        truncated=bool(flags & 1),
    )


def iter_records(data: bytes) -> Iterator[TaskInstance]:
    pos = 0
    while pos < len(data):
        if pos + _LEN.size > len(data):
            raise FormatError("Truncated record length", pos)
        (length,) = _LEN.unpack_from(data, pos)
        start = pos + _LEN.size
        if start + length > len(data):
            raise FormatError(f"Record of {length} bytes runs past end of file", pos)
        yield decode_record(data[start : start + length], base=start)
        pos = start + length


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """A loaded dataset with lazily rendered scene features."""

    spec: SceneSpec
    vocab: Vocabulary
    instances: list[TaskInstance]
    manifest: dict = field(default_factory=dict)
    path: Path | None = None
    _features: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.instances)

    def features(self, index: int) -> np.ndarray:
        cached = self._features.get(index)
        if cached is None:
            cached = render_features(self.instances[index].scene, self.spec)
            self._features[index] = cached
        return cached

    def subset(self, indices: Sequence[int]) -> Dataset:
        picked = [self.instances[i] for i in indices]
        return Dataset(self.spec, self.vocab, picked, dict(self.manifest), self.path)

    def by_task(self, task: Task | str) -> Dataset:
        task = Task(task)
        return self.subset([i for i, inst in enumerate(self.instances) if inst.task is task])

    @property
    def vocab_hash(self) -> str:
        return self.vocab.hash


def build_instances(
    spec: SceneSpec,
    seed: int,
    size: int,
    task_mix: Mapping[Task | str, float],
    vocab: Vocabulary | None = None,
    *,
    workers: int = 1,
) -> tuple[list[TaskInstance], dict[Task, int]]:
    """Generate instances in memory. Instance ``i`` uses the derived seed ``hash(seed, i)``."""
    vocab = vocab or default_vocab()
    mix = {Task(k): float(p) for k, p in task_mix.items()}
    counts = apportion(mix, size)
    tasks = [t for t in Task if t in counts for _ in range(counts[t])]
    order = np.random.default_rng(derive_seed(seed, size, 0xA5)).permutation(len(tasks))
    assigned = [tasks[int(j)] for j in order]
    jobs = [(seed, i, task, spec, vocab) for i, task in enumerate(assigned)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            instances = list(pool.map(_make_instance_job, jobs, chunksize=64))
    else:
        instances = [_make_instance_job(job) for job in jobs]
    return instances, counts


def build_dataset(
    spec: SceneSpec,
    seed: int,
    size: int,
    task_mix: Mapping[Task | str, float],
    out: PathLike,
    *,
    vocab: Vocabulary | None = None,
    overwrite: bool = False,
    workers: int = 1,
) -> dict:
    """Generate a dataset and write it under *out*.

    Args:
        spec: Scene generation parameters.
        seed: Root seed.
        size: Number of instances.
        task_mix: Task proportions summing to 1.
        out: Output directory.
        vocab: Vocabulary; defaults to the built-in grammar.
        overwrite: Replace an existing dataset in *out*.
        workers: Process count for generation; output is identical for any value.

    Returns:
        The manifest mapping written to ``manifest.json``.

    Raises:
        DatasetError: If *out* already holds a dataset and *overwrite* is false.
    """
    out = Path(out)
    target = out / INSTANCES_NAME
    if target.exists() and not overwrite:
        raise DatasetError(
            f"Dataset already exists: {out}",
            hint="Pass --overwrite or choose another --out directory.",
        )
    vocab = vocab or default_vocab()
    if len(vocab.class_names) < spec.n_classes + spec.n_scene_classes:
        raise ConfigurationError(
            f"Vocabulary has {len(vocab.class_names)} classes; the scene settings need "
            f"{spec.n_classes + spec.n_scene_classes}"
        )
    instances, counts = build_instances(spec, seed, size, task_mix, vocab, workers=workers)

    out.mkdir(parents=True, exist_ok=True)
    blob = b"".join(encode_record(inst) for inst in instances)
    target.write_bytes(blob)
    save_vocab(vocab, out / VOCAB_NAME)
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": int(seed),
        "size": int(size),
        "spec": spec.as_dict(),
        "task_mix": {t.value: float(p) for t, p in ((Task(k), p) for k, p in task_mix.items())},
        "counts": {t.value: counts.get(t, 0) for t in Task},
        "truncated": sum(1 for inst in instances if inst.truncated),
        "vocab_hash": vocab.hash,
        "instances_sha256": hashlib.sha256(blob).hexdigest(),
    }
    (out / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    logger.info("Wrote %d instances to %s", size, target)
    return manifest


def load_dataset(path: PathLike) -> Dataset:
    """Read a dataset directory written by :func:`build_dataset`."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists() or not (path / INSTANCES_NAME).exists():
        raise DatasetError(
            f"Not a dataset directory: {path}",
            hint="Create one with 'diffscene gen-data --out DIR'.",
        )
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    vocab = load_vocab(path / VOCAB_NAME)
    if manifest.get("vocab_hash") not in (None, vocab.hash):
        raise DatasetError(f"vocab.txt does not match the manifest hash in {path}")
    spec = SceneSpec(**manifest["spec"])
    instances = list(iter_records((path / INSTANCES_NAME).read_bytes()))
    if len(instances) != manifest.get("size", len(instances)):
        raise DatasetError(
            f"Manifest promises {manifest['size']} instances, file holds {len(instances)}"
        )
    return Dataset(spec, vocab, instances, manifest, path)
