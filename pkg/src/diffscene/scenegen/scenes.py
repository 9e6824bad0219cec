"""Deterministic synthetic scenes and their patch-grid features.

A scene is a ``G x G`` grid holding up to ``M_max`` axis-aligned objects, each
with a class and a colour attribute, plus an overall scene category drawn
from the object mix. Every function here is a pure function of its seed and
:class:`SceneSpec`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from diffscene.core.errors import ConfigurationError, GenerationError
from diffscene.vocab.tokens import ATTRIBUTE_WORDS, COUNT_WORDS, Box, box_iou

MAX_PLACEMENT_ATTEMPTS = 1000
SAME_CLASS_IOU_CAP = 0.3
# Affinity of a scene category to the count of its affiliated object class.
_SCENE_AFFINITY = 2.0


@dataclass(frozen=True)
class SceneSpec:
    """Generation parameters shared by every scene of a dataset."""

    grid_size: int = 8
    max_objects: int = 6
    n_classes: int = 5
    n_attributes: int = 6
    n_scene_classes: int = 5
    min_box: float = 0.125
    max_box: float = 0.375
    feature_dim: int = 32

    def __post_init__(self) -> None:
        if self.grid_size < 1 or self.n_classes < 1 or self.n_attributes < 1:
            raise ConfigurationError("grid_size, n_classes and n_attributes must be positive")
        if self.n_scene_classes < 1:
            raise ConfigurationError("n_scene_classes must be positive")
        if not 0 <= self.max_objects < len(COUNT_WORDS):
            raise ConfigurationError(
                f"max_objects must lie in [0, {len(COUNT_WORDS) - 1}], got {self.max_objects}",
                hint="Counts are spelled with the words zero..six.",
            )
        if self.n_attributes > len(ATTRIBUTE_WORDS):
            raise ConfigurationError(
                f"n_attributes={self.n_attributes} exceeds the {len(ATTRIBUTE_WORDS)} attribute words"
            )
        if self.min_box < 1.0 / self.grid_size:
            raise ConfigurationError(
                f"min_box={self.min_box} is smaller than one cell (1/{self.grid_size})"
            )
        if not self.min_box <= self.max_box <= 1.0:
            raise ConfigurationError("Box sizes must satisfy min_box <= max_box <= 1")
        if self.feature_dim < self.feature_width:
            raise ConfigurationError(
                f"feature_dim={self.feature_dim} is smaller than the feature width {self.feature_width}",
                hint="feature_dim must cover class and attribute one-hots, coverage and 2-d position.",
            )

    @property
    def n_patches(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def feature_width(self) -> int:
        return self.n_classes + self.n_attributes + 3

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    attribute_id: int
    box: Box


@dataclass(frozen=True)
class Scene:
    grid_size: int
    scene_class_id: int
    objects: tuple[SceneObject, ...] = field(default_factory=tuple)
    seed: int = 0


def derive_seed(seed: int, *keys: int) -> int:
    """Derive an unsigned 64-bit seed from *seed* and integer *keys*."""
    state = np.random.SeedSequence([int(seed), *(int(k) for k in keys)]).generate_state(
        1, dtype=np.uint64
    )
    return int(state[0])


def generate_scene(seed: int, spec: SceneSpec) -> Scene:
    """Generate one scene by rejection sampling.

    Objects of the same class never overlap with IoU above 0.3; the scene
    category is sampled with weights ``exp(2 * n_affiliated)`` where object
    class ``i`` is affiliated with scene class ``i mod n_scene_classes``.

    Raises:
        GenerationError: After 1000 rejected placements.
    """
    rng = np.random.default_rng(seed)
    n_objects = int(rng.integers(0, spec.max_objects + 1))
    objects: list[SceneObject] = []
    rejections = 0
    while len(objects) < n_objects:
        class_id = int(rng.integers(spec.n_classes))
        attribute_id = int(rng.integers(spec.n_attributes))
        w = float(rng.uniform(spec.min_box, spec.max_box))
        h = float(rng.uniform(spec.min_box, spec.max_box))
        x1 = float(rng.uniform(0.0, 1.0 - w))
        y1 = float(rng.uniform(0.0, 1.0 - h))
        x2, y2 = x1 + w, y1 + h
        if x2 > 1.0:
            x1, x2 = 1.0 - w, 1.0
        if y2 > 1.0:
            y1, y2 = 1.0 - h, 1.0
        box = Box(x1, y1, x2, y2)
        if any(
            o.class_id == class_id and box_iou(o.box, box) > SAME_CLASS_IOU_CAP for o in objects
        ):
            rejections += 1
            if rejections >= MAX_PLACEMENT_ATTEMPTS:
                raise GenerationError(
                    f"Could not place {n_objects} objects after {MAX_PLACEMENT_ATTEMPTS} attempts",
                    hint="The scene settings are over-constrained; lower max_objects or max_box.",
                )
            continue
        objects.append(SceneObject(class_id, attribute_id, box))

    counts = np.zeros(spec.n_scene_classes)
    for o in objects:
        counts[o.class_id % spec.n_scene_classes] += 1
    weights = np.exp(_SCENE_AFFINITY * counts)
    scene_class_id = int(rng.choice(spec.n_scene_classes, p=weights / weights.sum()))
    return Scene(spec.grid_size, scene_class_id, tuple(objects), int(seed))


def cell_coverage(box: Box, grid_size: int) -> np.ndarray:
    """Fraction of each grid cell covered by *box*, shape ``(G, G)`` indexed ``[row, col]``."""
    edges = np.arange(grid_size + 1, dtype=np.float64) / grid_size
    ox = np.clip(np.minimum(box.x2, edges[1:]) - np.maximum(box.x1, edges[:-1]), 0.0, None)
    oy = np.clip(np.minimum(box.y2, edges[1:]) - np.maximum(box.y1, edges[:-1]), 0.0, None)
    return np.outer(oy, ox) * grid_size * grid_size


def render_features(scene: Scene, spec: SceneSpec) -> np.ndarray:
    """Render the ``G x G x D_v`` feature grid of *scene*.

    Cell ``(r, c)`` holds ``[class one-hot, attribute one-hot, coverage,
    row position, column position]`` of the object covering most of it,
    zero-padded to ``spec.feature_dim``. Ties go to the earlier object.
    """
    g = scene.grid_size
    if g != spec.grid_size:
        raise ConfigurationError(f"Scene grid {g} does not match the dataset grid {spec.grid_size}")
    feats = np.zeros((g, g, spec.feature_dim), dtype=np.float32)
    centers = (np.arange(g, dtype=np.float64) + 0.5) / g
    pos = spec.n_classes + spec.n_attributes + 1
    feats[:, :, pos] = centers[:, None]
    feats[:, :, pos + 1] = centers[None, :]
    if not scene.objects:
        return feats

    coverage = np.stack([cell_coverage(o.box, g) for o in scene.objects])
    winner = coverage.argmax(axis=0)
    best = coverage.max(axis=0)
    for r in range(g):
        for c in range(g):
            if best[r, c] <= 0.0:
                continue
            obj = scene.objects[int(winner[r, c])]
            feats[r, c, obj.class_id] = 1.0
            feats[r, c, spec.n_classes + obj.attribute_id] = 1.0
            feats[r, c, spec.n_classes + spec.n_attributes] = best[r, c]
    return feats
