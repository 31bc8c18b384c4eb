import os

import numpy as np
import pytest
from PIL import Image

from dataset import load_dataset
from synth import SynthSpec, gen_synth, render_face, split_indices


def _crop_features(image, box, side=16):
    """Standardized grayscale patch over the eyes, brows and mouth."""
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    patch = image.convert("L").crop((int(x0 + 0.2 * w), int(y0 + 0.25 * h), int(x1 - 0.2 * w), int(y0 + 0.9 * h)))
    v = np.asarray(patch.resize((side, side), Image.BILINEAR), dtype=float).ravel()
    return (v - v.mean()) / (v.std() + 1e-9)


def test_same_seed_writes_identical_bytes(tmp_path):
    spec = SynthSpec(image_size=48, count=9, seed=0)
    gen_synth(spec, str(tmp_path / "a"))
    gen_synth(spec, str(tmp_path / "b"))
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == sorted(os.listdir(tmp_path / "b"))
    assert {"manifest.csv", "train.csv", "val.csv", "img_00008.png"} <= set(names)
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_different_seeds_differ():
    spec_a, spec_b = SynthSpec(image_size=48, seed=0), SynthSpec(image_size=48, seed=1)
    a, _ = render_face(spec_a, 3)
    b, _ = render_face(spec_b, 3)
    assert not np.array_equal(np.asarray(a), np.asarray(b))


def test_classes_are_balanced_and_split_per_class(tmp_path):
    samples = gen_synth(SynthSpec(image_size=32, count=700), str(tmp_path))
    classes = [s.truth.class_id for s in samples]
    assert np.bincount(classes).tolist() == [100] * 7
    train, val = split_indices(classes, seed=0)
    assert not set(train) & set(val)
    assert sorted(train + val) == list(range(700))
    assert np.bincount([classes[i] for i in val]).tolist() == [20] * 7


def test_manifest_loads_back(tmp_path):
    samples = gen_synth(SynthSpec(image_size=64, count=14, seed=5), str(tmp_path))
    records = load_dataset(str(tmp_path / "manifest.csv"), input_size=64)
    assert len(records) == 14
    for sample, record in zip(samples, records):
        assert record.ground_truths[0].class_id == sample.truth.class_id
        np.testing.assert_array_equal(record.ground_truths[0].box, sample.truth.box)


def test_boxes_fit_inside_the_image():
    spec = SynthSpec(image_size=64)
    for i in range(50):
        _, truth = render_face(spec, i)
        x0, y0, x1, y1 = truth.box
        assert 0 <= x0 < x1 <= 64 and 0 <= y0 < y1 <= 64
        assert (y1 - y0) >= 0.35 * 64 - 1


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(class_count=8)
    with pytest.raises(ValueError):
        SynthSpec(face_scale=(0.5, 0.2))
    with pytest.raises(ValueError):
        SynthSpec(image_size=16)


def test_nearest_centroid_separates_classes():
    spec = SynthSpec(image_size=96, seed=3)
    feats, labels = [], []
    for i in range(7 * 40):
        image, truth = render_face(spec, i)
        feats.append(_crop_features(image, truth.box))
        labels.append(truth.class_id)
    feats, labels = np.asarray(feats), np.asarray(labels)
    fit, held = np.arange(len(labels)) < 7 * 25, np.arange(len(labels)) >= 7 * 25
    centroids = np.stack([feats[fit & (labels == k)].mean(axis=0) for k in range(7)])
    dist = ((feats[held][:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    accuracy = np.mean(dist.argmin(axis=1) == labels[held])
    assert accuracy >= 3 / 7
