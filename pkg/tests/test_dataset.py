import os

import numpy as np
import pytest
from PIL import Image

from dataset import MANIFEST_HEADER, PAD_VALUE, Letterbox, ManifestError, load_dataset, to_batch
from metrics import GroundTruth


def _image(path, width, height, color=(200, 10, 10)):
    Image.new("RGB", (width, height), color).save(path)


def _manifest(tmp_path, lines):
    path = tmp_path / "manifest.csv"
    path.write_text("\n".join([MANIFEST_HEADER, *lines]) + "\n", encoding="utf-8")
    return str(path)


def test_letterbox_tall_image():
    lb = Letterbox.fit(100, 200, 320)
    assert lb.scale == pytest.approx(1.6)
    assert (lb.pad_x, lb.pad_y) == (80, 0)
    np.testing.assert_allclose(lb.apply((10, 20, 50, 100)), (96, 32, 160, 160))
    np.testing.assert_allclose(lb.invert(lb.apply((10, 20, 50, 100))), (10, 20, 50, 100))


def test_letterbox_raster_is_padded_gray():
    raster = Letterbox.fit(100, 200, 320).resize(Image.new("RGB", (100, 200), (0, 0, 0)))
    assert raster.shape == (320, 320, 3) and raster.dtype == np.uint8
    assert np.all(raster[:, :80] == PAD_VALUE)
    assert np.all(raster[:, 240:] == PAD_VALUE)
    assert np.all(raster[:, 80:240] == 0)


def test_letterbox_keeps_a_sliver_of_extreme_aspect_ratios():
    lb = Letterbox.fit(1000, 1, 64)
    assert (lb.pad_x, lb.pad_y) == (0, 31)
    raster = lb.resize(Image.new("RGB", (1000, 1), (0, 0, 0)))
    assert raster.shape == (64, 64, 3)
    assert np.all(raster[31] == 0)
    assert np.all(raster[:31] == PAD_VALUE) and np.all(raster[32:] == PAD_VALUE)
    tall = Letterbox.fit(1, 1000, 64).resize(Image.new("RGB", (1, 1000), (0, 0, 0)))
    assert np.all(tall[:, 31] == 0)


def test_load_dataset_groups_boxes_by_image(tmp_path):
    _image(tmp_path / "a.png", 100, 200)
    _image(tmp_path / "b.png", 64, 64)
    manifest = _manifest(tmp_path, [
        "b.png,3,0,0,32,32",
        "a.png,0,10,20,50,100",
        "b.png,6,30,30,64,64",
    ])
    records = load_dataset(manifest, input_size=320)
    assert [os.path.basename(r.path) for r in records] == ["b.png", "a.png"]
    assert [gt.class_id for gt in records[0].ground_truths] == [3, 6]
    (truth,) = records[1].input_truths
    assert truth.class_id == 0
    np.testing.assert_allclose(truth.box, (96, 32, 160, 160))
    assert records[1].raster.shape == (320, 320, 3)


def test_empty_manifest_gives_empty_dataset(tmp_path):
    assert load_dataset(_manifest(tmp_path, [])) == []


@pytest.mark.parametrize("line,message", [
    ("a.png,9,0,0,5,5", "class id 9"),
    ("a.png,1,0,0,5", "6 comma-separated"),
    ("a.png,one,0,0,5,5", "malformed"),
    ("a.png,1,5,0,5,5", "degenerate"),
    ("a.png,1,0,0,50,5", "outside"),
    ("missing.png,1,0,0,5,5", "not found"),
])
def test_bad_records_name_the_line(tmp_path, line, message):
    _image(tmp_path / "a.png", 20, 20)
    manifest = _manifest(tmp_path, ["a.png,0,0,0,10,10", line])
    with pytest.raises(ManifestError, match=message) as info:
        load_dataset(manifest, load_images=False)
    assert "manifest.csv:3" in str(info.value)


def test_unreadable_image_is_rejected(tmp_path):
    (tmp_path / "a.png").write_bytes(b"not a png")
    with pytest.raises(ManifestError, match="unreadable"):
        load_dataset(_manifest(tmp_path, ["a.png,0,0,0,1,1"]))


def test_to_batch_scales_to_unit_range(tmp_path):
    _image(tmp_path / "a.png", 64, 64, color=(255, 0, 51))
    records = load_dataset(_manifest(tmp_path, ["a.png,2,8,8,40,40"]), input_size=64)
    images, truths = to_batch(records)
    assert images.shape == (1, 3, 64, 64) and images.dtype == np.float32
    np.testing.assert_allclose(images[0, :, 0, 0], [1.0, 0.0, 0.2], atol=1e-6)
    assert truths == [[GroundTruth(2, (8.0, 8.0, 40.0, 40.0))]]
    records[0].raster = None
    with pytest.raises(ValueError):
        to_batch(records)
