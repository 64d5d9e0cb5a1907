import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gandisco.scenegen import (CategoryBank, GenerationError, SceneSpec, SupervisionError, bank_sample,
                               generate_dataset, generate_scene, privileged_access)


def test_single_object_and_reproducible():
    spec = SceneSpec(max_objects=1, clutter=0.0)
    a, b = generate_scene(0, spec), generate_scene(0, spec)
    assert len(a.instances) == 1
    assert a.image.tobytes() == b.image.tobytes()


def test_requested_categories_all_present():
    s = generate_scene(7, SceneSpec(categories=(1, 3), min_objects=2, max_objects=2))
    assert {c for c, _ in s.instances} == {1, 3}


def test_thousand_scenes_in_bounds():
    scenes = generate_dataset(0, 1000, SceneSpec(max_objects=3))
    counts = []
    for s in scenes:
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        for _, b in s.instances:
            assert b.x >= 0 and b.y >= 0 and b.x2 <= 32 and b.y2 <= 32
        counts.append(len(s.instances))
    assert 1 <= np.mean(counts) <= 3 and min(counts) >= 1 and max(counts) <= 3


def test_boxes_are_tight_around_masks():
    s = generate_scene(3)
    for (_, b), m in zip(s.instances, s.masks):
        ys, xs = np.nonzero(m)
        assert (b.x, b.y, b.x2, b.y2) == (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)


def test_overcrowded_canvas_fails():
    spec = SceneSpec(image_size=16, min_objects=3, max_objects=3, min_side=14, max_side=16,
                     max_overlap_iou=0.0)
    with pytest.raises(GenerationError):
        generate_scene(0, spec, max_retries=20)


def test_weak_scene_hides_boxes_and_counts_privileged_reads():
    s = generate_scene(5, SceneSpec(mode="weak"))
    assert s.labels
    with pytest.raises(SupervisionError):
        s.instances
    with pytest.raises(SupervisionError):
        s.boxes
    before = privileged_access.count
    s.privileged_instances()
    assert privileged_access.count == before + 1


def test_three_channel_option():
    s = generate_scene(1, SceneSpec(channels=3))
    assert s.image.shape == (3, 32, 32)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_determinism_byte_for_byte(seed):
    spec = SceneSpec(clutter=0.7)
    a, b = generate_scene(seed, spec), generate_scene(seed, spec)
    assert a.image.tobytes() == b.image.tobytes() and a.instances == b.instances


def test_bank_determinism_and_category_separation():
    bank = CategoryBank()
    assert np.array_equal(bank_sample(bank, 2, 9), bank_sample(bank, 2, 9))
    assert not np.array_equal(bank_sample(bank, 2, 9), bank_sample(bank, 3, 9))
    assert bank.sample(0, 1).shape == (1, 16, 16)


def test_bank_unknown_category():
    with pytest.raises(KeyError):
        CategoryBank().sample(5, 0)


def test_bank_needs_five_categories():
    with pytest.raises(ValueError):
        CategoryBank(n_categories=4)


def test_bank_categories_are_separable_by_a_linear_probe():
    bank = CategoryBank()
    rng = np.random.default_rng(0)

    def draw(n, offset):
        cats = rng.integers(5, size=n)
        x = bank.batch(cats, np.arange(n) + offset).reshape(n, -1)
        return np.hstack([x, np.ones((n, 1))]), cats

    xtr, ytr = draw(1000, 0)
    xte, yte = draw(300, 10**6)
    w = np.zeros((xtr.shape[1], 5))
    onehot = np.eye(5)[ytr]
    for _ in range(400):  # full-batch softmax regression
        z = xtr @ w
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        w -= 0.5 * xtr.T @ (p - onehot) / len(xtr)
    acc = np.mean(np.argmax(xte @ w, axis=1) == yte)
    assert acc > 0.9
