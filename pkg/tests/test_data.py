import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glamseg.data import (KEY_COLORS, SyntheticTask, augment, generate, generate_one, load_dataset,
                          save_dataset, target_accuracy)
from glamseg.errors import GenerationError
from glamseg.rng import make_rng


def windows_with(mask, wp):
    ys, xs = np.nonzero(mask)
    g = mask.shape[0] // wp
    return set((ys // wp) * g + xs // wp)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 10**6))
def test_key_never_shares_a_window_with_targets(seed, index):
    task = SyntheticTask(seed=seed, image_size=32)
    img, lab, key = generate_one(task, index)
    wp = task.window_px
    key_px = np.all(np.abs(img - KEY_COLORS[key]) < 0.3, axis=-1) & (lab == 0)
    assert key_px.sum() >= task.key_size ** 2 * task.patch_size ** 2 // 2
    assert not windows_with(key_px, wp) & windows_with(lab > 0, wp)


def test_target_classes_follow_the_key():
    task = SyntheticTask(seed=3)
    for i in range(20):
        _, lab, key = generate_one(task, i)
        classes = set(np.unique(lab)) - {0}
        assert classes and all((c - 1) % 2 == key for c in classes)


def test_targets_are_patch_aligned():
    task = SyntheticTask(seed=4)
    p = task.patch_size
    for i in range(10):
        _, lab, _ = generate_one(task, i)
        blocks = lab.reshape(16, p, 16, p).transpose(0, 2, 1, 3).reshape(256, -1)
        assert np.all(blocks == blocks[:, :1])


def test_generation_is_a_pure_function_of_seed_and_index():
    a = generate(SyntheticTask(seed=9, image_size=32), 4, start=7)
    b = generate(SyntheticTask(seed=9, image_size=32), 2, start=9)
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(a[2:], b))
    c = generate(SyntheticTask(seed=10, image_size=32), 1, start=7)
    assert not np.array_equal(a[0][0], c[0][0])


def test_image_range_and_dtype():
    img, lab, _ = generate_one(SyntheticTask(seed=1), 0)
    assert img.dtype == np.float32 and img.shape == (64, 64, 3)
    assert lab.dtype == np.int64 and lab.shape == (64, 64)
    assert img.min() >= 0.0 and img.max() <= 1.0


@pytest.mark.parametrize("kw", [
    dict(image_size=16),  # one window
    dict(image_size=40),
    dict(num_classes=4),
    dict(num_classes=11),
    dict(targets_min=0),
    dict(key_size=5),
])
def test_invalid_tasks(kw):
    with pytest.raises(GenerationError):
        SyntheticTask(**kw).validate()


def test_augment_keeps_pixels_and_labels_aligned():
    img, lab, _ = generate_one(SyntheticTask(seed=2, image_size=32), 0)
    rng = make_rng(0)
    for _ in range(8):
        a_img, a_lab = augment(img, lab, rng)
        assert sorted(a_lab.ravel()) == sorted(lab.ravel())
        # pixel colour under each label is carried along with it
        for c in np.unique(lab):
            np.testing.assert_allclose(a_img[a_lab == c].mean(0), img[lab == c].mean(0), rtol=1e-5)


def test_target_accuracy_ignores_background():
    lab = np.array([0, 0, 1, 2, 3])
    assert target_accuracy(np.array([4, 4, 1, 1, 3]), lab) == pytest.approx(2 / 3)
    assert np.isnan(target_accuracy(np.zeros(3), np.zeros(3)))


def test_dataset_roundtrip(tmp_path):
    task = SyntheticTask(seed=5, image_size=32, noise=0.1)
    samples = generate(task, 3)
    save_dataset(tmp_path, task, samples)
    task2, back = load_dataset(tmp_path)
    assert task2 == task
    for (i1, l1), (i2, l2) in zip(samples, back):
        assert i1.tobytes() == i2.tobytes() and np.array_equal(l1, l2)


def test_dataset_manifest_count_checked(tmp_path):
    save_dataset(tmp_path, SyntheticTask(image_size=32), generate(SyntheticTask(image_size=32), 2))
    man = tmp_path / "manifest.txt"
    man.write_text(man.read_text().replace("num_samples = 2", "num_samples = 3"))
    with pytest.raises(GenerationError):
        load_dataset(tmp_path)
