"""Conversion of scenes into prompt/target token sequences for each task."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Optional

from diffscene.core.errors import AmbiguityError, ConfigurationError, RangeError
from diffscene.scenegen.scenes import Scene, SceneObject
from diffscene.vocab.tokens import (
    ATTRIBUTE_WORDS,
    COUNT_WORDS,
    EMPTY_WORD,
    OBJECT_CLASSES,
    Box,
    Vocabulary,
    default_vocab,
    encode_box,
)


class Task(str, Enum):
    CAPTION = "caption"
    DETECT = "detect"
    GROUND = "ground"
    CLASSIFY = "classify"
    COUNT = "count"


TASK_LENGTHS: dict[Task, int] = {
    Task.CAPTION: 16,
    Task.DETECT: 32,
    Task.GROUND: 8,
    Task.CLASSIFY: 8,
    Task.COUNT: 8,
}

# Tokens per detection entry: class token + four coordinates.
DETECT_SPAN = 5
CAPTION_SPAN = 3


@dataclass(frozen=True)
class TaskInstance:
    """One training/evaluation example."""

    task: Task
    scene: Scene
    prompt_ids: tuple[int, ...]
    target_ids: tuple[int, ...]
    ref_object: Optional[int] = None
    query_class: Optional[int] = None
    truncated: bool = False

    @property
    def gen_len(self) -> int:
        return len(self.target_ids)


def _pad(ids: list[int], length: int, v: Vocabulary) -> tuple[int, ...]:
    return tuple(ids + [v.pad_id] * (length - len(ids)))


def phrase_key(scene: Scene, index: int) -> tuple[int, int]:
    obj = scene.objects[index]
    return (obj.attribute_id, obj.class_id)


def unique_referents(scene: Scene) -> list[int]:
    """Indices of objects whose ``attribute + class`` phrase is unique in the scene."""
    keys = Counter(phrase_key(scene, i) for i in range(len(scene.objects)))
    return [i for i in range(len(scene.objects)) if keys[phrase_key(scene, i)] == 1]


def build_prompt(
    task: Task,
    v: Vocabulary,
    scene: Scene | None = None,
    ref_object: int | None = None,
    query_class: int | None = None,
) -> tuple[int, ...]:
    """``[BOS] <task word>`` plus the referring phrase or the queried class, if any."""
    ids = [v.bos_id, v.lookup(task.value)]
    if task is Task.GROUND:
        if scene is None or ref_object is None:
            raise ConfigurationError("Grounding prompts need a scene and a ref_object")
        obj = scene.objects[ref_object]
        ids += [v.lookup(ATTRIBUTE_WORDS[obj.attribute_id]), v.class_id(obj.class_id)]
    elif task is Task.COUNT:
        if query_class is None:
            raise ConfigurationError("Count prompts need a query_class")
        ids.append(v.class_id(query_class))
    return tuple(ids)


@lru_cache(maxsize=1)
def longest_sequence() -> int:
    """Longest ``prompt + target`` text any task produces under the built-in grammar."""
    v = default_vocab()
    scene = Scene(1, 0, (SceneObject(0, 0, Box(0.0, 0.0, 1.0, 1.0)),))
    return max(
        len(build_prompt(task, v, scene, ref_object=0, query_class=0)) + TASK_LENGTHS[task]
        for task in Task
    )


def make_target(
    scene: Scene,
    task: Task | str,
    v: Vocabulary,
    ref_object: int | None = None,
    *,
    query_class: int | None = None,
    n_object_classes: int = len(OBJECT_CLASSES),
) -> TaskInstance:
    """Build the fixed-length target (and prompt) of *task* for *scene*.

    Object class ``i`` is vocabulary class ``i``; scene category ``j`` is
    vocabulary class ``n_object_classes + j``.

    Raises:
        AmbiguityError: If the grounding referent's phrase is not unique.
        RangeError: If ``ref_object`` or ``query_class`` is out of range.
    """
    task = Task(task)
    length = TASK_LENGTHS[task]
    truncated = False

    if task is Task.CAPTION:
        groups = Counter((o.class_id, o.attribute_id) for o in scene.objects)
        ids: list[int] = []
        if not groups:
            ids = [v.lookup(EMPTY_WORD)]
        for (class_id, attribute_id), count in sorted(groups.items()):
            if len(ids) + CAPTION_SPAN > length:
                truncated = True
                break
            ids += [
                v.lookup(COUNT_WORDS[count]),
                v.lookup(ATTRIBUTE_WORDS[attribute_id]),
                v.class_id(class_id),
            ]

    elif task is Task.DETECT:
        ordered = sorted(scene.objects, key=lambda o: (o.class_id, o.box.x1, o.box.y1))
        ids = []
        for obj in ordered:
            if len(ids) + DETECT_SPAN > length:
                truncated = True
                break
            ids += [v.class_id(obj.class_id), *encode_box(v, obj.box)]

    elif task is Task.GROUND:
        if ref_object is None or not 0 <= ref_object < len(scene.objects):
            raise RangeError(f"ref_object {ref_object} is not a valid object index")
        if ref_object not in unique_referents(scene):
            obj = scene.objects[ref_object]
            raise AmbiguityError(
                f"Referring phrase '{ATTRIBUTE_WORDS[obj.attribute_id]} "
                f"{v.class_names[obj.class_id]}' matches more than one object"
            )
        ids = encode_box(v, scene.objects[ref_object].box)

    elif task is Task.CLASSIFY:
        ids = [v.class_id(n_object_classes + scene.scene_class_id)]

    else:
        if query_class is None or not 0 <= query_class < n_object_classes:
            raise RangeError(f"query_class {query_class} is not a valid object class")
        count = sum(1 for o in scene.objects if o.class_id == query_class)
        ids = [v.lookup(COUNT_WORDS[count])]

    prompt = build_prompt(task, v, scene, ref_object, query_class)
    return TaskInstance(
        task=task,
        scene=scene,
        prompt_ids=prompt,
        target_ids=_pad(ids, length, v),
        ref_object=ref_object if task is Task.GROUND else None,
        query_class=query_class if task is Task.COUNT else None,
        truncated=truncated,
    )
