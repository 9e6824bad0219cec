"""Tests for scene generation, feature rendering, task targets and dataset files."""

from __future__ import annotations

import json
from collections import Counter

import numpy as np
import pytest

from diffscene.core.errors import AmbiguityError, ConfigurationError, DatasetError, FormatError
from diffscene.eval.metrics import parse_detection
from diffscene.scenegen.dataset import (
    INSTANCES_NAME,
    MANIFEST_NAME,
    apportion,
    build_dataset,
    build_instances,
    iter_records,
    load_dataset,
)
from diffscene.scenegen.scenes import (
    Scene,
    SceneObject,
    SceneSpec,
    cell_coverage,
    generate_scene,
    render_features,
)
from diffscene.scenegen.tasks import TASK_LENGTHS, Task, make_target, unique_referents
from diffscene.vocab.tokens import (
    ATTRIBUTE_WORDS,
    COUNT_WORDS,
    EMPTY_WORD,
    OBJECT_CLASSES,
    Box,
    box_iou,
    decode_box,
    decode_text,
    encode_box,
)

EQUAL_MIX = {t.value: 0.2 for t in Task}


def _scene(*objects: SceneObject, scene_class_id: int = 0) -> Scene:
    return Scene(grid_size=8, scene_class_id=scene_class_id, objects=tuple(objects), seed=0)


class TestGenerateScene:
    def test_deterministic(self, scene_spec):
        assert generate_scene(123, scene_spec) == generate_scene(123, scene_spec)

    def test_no_objects(self):
        scene = generate_scene(5, SceneSpec(max_objects=0))
        assert scene.objects == ()

    def test_same_class_overlap_cap(self, scene_spec):
        for seed in range(300):
            objs = generate_scene(seed, scene_spec).objects
            for i, a in enumerate(objs):
                for b in objs[i + 1 :]:
                    if a.class_id == b.class_id:
                        assert box_iou(a.box, b.box) <= 0.3

    def test_object_count_bounded(self, scene_spec):
        counts = {len(generate_scene(s, scene_spec).objects) for s in range(200)}
        assert counts <= set(range(scene_spec.max_objects + 1))

    def test_feature_dim_too_small(self):
        with pytest.raises(ConfigurationError):
            SceneSpec(feature_dim=8)


class TestRenderFeatures:
    def test_empty_scene_positions(self, scene_spec):
        feats = render_features(_scene(), scene_spec)
        assert feats.shape == (8, 8, scene_spec.feature_dim)
        pos = scene_spec.n_classes + scene_spec.n_attributes + 1
        assert np.all(feats[:, :, :pos] == 0)
        assert feats[0, 0, pos] == pytest.approx(1 / 16)
        assert feats[7, 3, pos] == pytest.approx(15 / 16)
        assert feats[7, 3, pos + 1] == pytest.approx(7 / 16)

    def test_single_cell_coverage(self, scene_spec):
        obj = SceneObject(class_id=2, attribute_id=1, box=Box(0.0, 0.0, 0.125, 0.125))
        feats = render_features(_scene(obj), scene_spec)
        cov = feats[:, :, scene_spec.n_classes + scene_spec.n_attributes]
        assert cov[0, 0] == pytest.approx(1.0)
        assert cov.sum() == pytest.approx(1.0)
        assert feats[0, 0, 2] == 1.0
        assert feats[0, 0, scene_spec.n_classes + 1] == 1.0

    def test_coverage_sums_to_area(self, scene_spec):
        rng = np.random.default_rng(3)
        g = scene_spec.grid_size
        channel = scene_spec.n_classes + scene_spec.n_attributes
        for _ in range(500):
            xs, ys = np.sort(rng.random(2)), np.sort(rng.random(2))
            box = Box(xs[0], ys[0], xs[1], ys[1])
            feats = render_features(_scene(SceneObject(0, 0, box)), scene_spec)
            expected = box.area * g * g
            assert cell_coverage(box, g).sum() == pytest.approx(expected, rel=1e-9, abs=1e-12)
            assert float(feats[:, :, channel].sum()) == pytest.approx(expected, rel=1e-5, abs=1e-5)


class TestMakeTarget:
    def test_empty_caption(self, vocab):
        inst = make_target(_scene(), Task.CAPTION, vocab)
        assert inst.target_ids[0] == vocab.lookup(EMPTY_WORD)
        assert set(inst.target_ids[1:]) == {vocab.pad_id}
        assert len(inst.target_ids) == TASK_LENGTHS[Task.CAPTION]

    def test_single_object_ground(self, vocab):
        box = Box(0.1, 0.2, 0.4, 0.5)
        inst = make_target(_scene(SceneObject(2, 3, box)), Task.GROUND, vocab, ref_object=0)
        assert list(inst.target_ids) == encode_box(vocab, box) + [vocab.pad_id] * 4
        assert inst.prompt_ids == (vocab.bos_id, vocab.lookup("ground"), vocab.lookup("yellow"), vocab.class_id(2))

    def test_detect_sorted(self, vocab):
        objs = (
            SceneObject(3, 0, Box(0.5, 0.5, 0.7, 0.7)),
            SceneObject(1, 0, Box(0.6, 0.1, 0.8, 0.3)),
            SceneObject(1, 2, Box(0.1, 0.1, 0.3, 0.3)),
        )
        inst = make_target(_scene(*objs), Task.DETECT, vocab)
        content = list(inst.target_ids[:15])
        assert list(inst.target_ids[15:]) == [vocab.pad_id] * 17
        expected = []
        for obj in (objs[2], objs[1], objs[0]):
            expected += [vocab.class_id(obj.class_id), *encode_box(vocab, obj.box)]
        assert content == expected
        assert not inst.truncated

    def test_detect_truncation_flagged(self, vocab):
        objs = tuple(
            SceneObject(i % 5, 0, Box(0.1 * i, 0.0, 0.1 * i + 0.1, 0.1)) for i in range(7)
        )
        inst = make_target(_scene(*objs), Task.DETECT, vocab)
        assert inst.truncated
        assert len(inst.target_ids) == 32

    def test_ambiguous_referent(self, vocab):
        a = SceneObject(1, 2, Box(0.0, 0.0, 0.2, 0.2))
        b = SceneObject(1, 2, Box(0.5, 0.5, 0.7, 0.7))
        with pytest.raises(AmbiguityError):
            make_target(_scene(a, b), Task.GROUND, vocab, ref_object=0)

    def test_count_and_classify(self, vocab):
        objs = (SceneObject(0, 0, Box(0, 0, 0.2, 0.2)), SceneObject(0, 1, Box(0.5, 0.5, 0.7, 0.7)))
        count = make_target(_scene(*objs), Task.COUNT, vocab, query_class=0)
        assert count.target_ids[0] == vocab.lookup("two")
        classify = make_target(_scene(*objs, scene_class_id=3), Task.CLASSIFY, vocab)
        assert classify.target_ids[0] == vocab.class_id(5 + 3)


class TestApportion:
    def test_even_split(self):
        counts = apportion({Task.CAPTION: 0.5, Task.DETECT: 0.5}, 1000)
        assert counts == {Task.CAPTION: 500, Task.DETECT: 500}

    def test_largest_remainder(self):
        counts = apportion({t: 0.2 for t in Task}, 7)
        assert sum(counts.values()) == 7
        assert counts[Task.CAPTION] == 2 and counts[Task.DETECT] == 2
        assert counts[Task.COUNT] == 1

    def test_bad_sum(self):
        with pytest.raises(ConfigurationError):
            apportion({Task.CAPTION: 0.5}, 10)


class TestDataset:
    def test_byte_identical(self, tmp_path, scene_spec):
        build_dataset(scene_spec, 3, 25, EQUAL_MIX, tmp_path / "a")
        build_dataset(scene_spec, 3, 25, EQUAL_MIX, tmp_path / "b")
        a = (tmp_path / "a" / INSTANCES_NAME).read_bytes()
        b = (tmp_path / "b" / INSTANCES_NAME).read_bytes()
        assert a == b

    def test_workers_do_not_change_output(self, scene_spec, vocab):
        serial, _ = build_instances(scene_spec, 11, 12, EQUAL_MIX, vocab)
        parallel, _ = build_instances(scene_spec, 11, 12, EQUAL_MIX, vocab, workers=2)
        assert serial == parallel

    def test_empty_dataset(self, tmp_path, scene_spec):
        manifest = build_dataset(scene_spec, 0, 0, EQUAL_MIX, tmp_path)
        assert manifest["size"] == 0
        assert len(load_dataset(tmp_path)) == 0

    def test_refuses_existing(self, dataset_dir, scene_spec):
        with pytest.raises(DatasetError):
            build_dataset(scene_spec, 7, 40, EQUAL_MIX, dataset_dir)

    def test_load(self, dataset):
        assert len(dataset) == 40
        assert {inst.task for inst in dataset.instances} == set(Task)
        for inst in dataset.instances:
            assert len(inst.target_ids) == TASK_LENGTHS[inst.task]
            assert inst.prompt_ids[0] == dataset.vocab.bos_id

    def test_manifest_counts(self, dataset_dir):
        manifest = json.loads((dataset_dir / MANIFEST_NAME).read_text(encoding="utf-8"))
        assert sum(manifest["counts"].values()) == 40
        assert manifest["vocab_hash"]

    def test_features_cached(self, dataset):
        assert dataset.features(0) is dataset.features(0)

    def test_truncated_file(self, dataset_dir):
        data = (dataset_dir / INSTANCES_NAME).read_bytes()
        with pytest.raises(FormatError):
            list(iter_records(data[:-3]))


class TestTargetsDecodeToScene:
    SCENES = 200

    def _scenes(self, scene_spec):
        return [generate_scene(seed, scene_spec) for seed in range(self.SCENES)]

    def test_detect(self, vocab, scene_spec):
        tol = 1.0 / vocab.coord_bins
        for scene in self._scenes(scene_spec):
            inst = make_target(scene, Task.DETECT, vocab)
            parsed = parse_detection(inst.target_ids, vocab)
            assert parsed.malformed_spans == 0
            ordered = sorted(scene.objects, key=lambda o: (o.class_id, o.box.x1, o.box.y1))
            if inst.truncated:
                ordered = ordered[: len(parsed.predicted)]
            assert len(parsed.predicted) == len(ordered)
            for (class_id, box), obj in zip(parsed.predicted, ordered):
                assert class_id == obj.class_id
                assert np.allclose(box.as_tuple(), obj.box.as_tuple(), atol=tol)

    def test_caption(self, vocab, scene_spec):
        for scene in self._scenes(scene_spec):
            inst = make_target(scene, Task.CAPTION, vocab)
            words = decode_text(vocab, inst.target_ids, strip_pad=True).split(" ")
            if not scene.objects:
                assert words == [EMPTY_WORD]
                continue
            groups = Counter((o.class_id, o.attribute_id) for o in scene.objects)
            expected = [
                [COUNT_WORDS[n], ATTRIBUTE_WORDS[a], vocab.class_names[c]]
                for (c, a), n in sorted(groups.items())
            ]
            triples = [words[i : i + 3] for i in range(0, len(words), 3)]
            assert triples == expected[: len(triples)]
            assert inst.truncated == (len(triples) < len(expected))

    def test_ground_count_classify(self, vocab, scene_spec):
        tol = 1.0 / vocab.coord_bins
        for scene in self._scenes(scene_spec):
            for ref in unique_referents(scene):
                box = decode_box(vocab, make_target(scene, Task.GROUND, vocab, ref).target_ids[:4])
                assert np.allclose(box.as_tuple(), scene.objects[ref].box.as_tuple(), atol=tol)
            for q in range(len(OBJECT_CLASSES)):
                inst = make_target(scene, Task.COUNT, vocab, query_class=q)
                n = sum(1 for o in scene.objects if o.class_id == q)
                assert vocab.surface(inst.target_ids[0]) == COUNT_WORDS[n]
            inst = make_target(scene, Task.CLASSIFY, vocab)
            assert vocab.class_index(inst.target_ids[0]) == len(OBJECT_CLASSES) + scene.scene_class_id
