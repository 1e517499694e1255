import json

import numpy as np
import pytest

from sdgod_lab import corruptions as CB
from sdgod_lab.corruptions import CorruptionType as C
from sdgod_lab.data import SynthConfig, generate_dataset
from sdgod_lab.structures import image_checksum


@pytest.fixture(scope="module")
def ref_image():
    return generate_dataset(SynthConfig(n_images=1, seed=3))[0].image


def test_fifteen_types_in_four_groups():
    assert len(C) == 15
    assert {g: len(v) for g, v in CB.GROUPS.items()} == {"noise": 3, "blur": 4, "weather": 4, "digital": 4}
    assert C.GAUSSIAN_NOISE.group == "noise" and C.JPEG_COMPRESSION.group == "digital"
    assert [c.index for c in C] == list(range(15))


def test_severity_bounds():
    img = np.full((8, 8, 3), 0.5)
    for bad in (0, 6):
        with pytest.raises(ValueError):
            CB.apply_corruption(img, C.FOG, bad, 0)


@pytest.mark.parametrize("c", list(C))
def test_deterministic_geometry_and_range(c, ref_image):
    for s in CB.SEVERITIES:
        a = CB.apply_corruption(ref_image, c, s, seed=11)
        b = CB.apply_corruption(ref_image, c, s, seed=11)
        assert image_checksum(a) == image_checksum(b)
        assert a.shape == ref_image.shape
        assert a.min() >= 0.0 and a.max() <= 1.0


def test_zero_sigma_gaussian_is_identity(ref_image):
    sched = dict(CB.DEFAULT_SCHEDULE)
    sched[C.GAUSSIAN_NOISE] = [0.0] * 5
    out = CB.apply_corruption(ref_image, C.GAUSSIAN_NOISE, 1, 0, schedule=sched)
    np.testing.assert_array_equal(out, ref_image)


def test_shot_noise_keeps_black_black():
    out = CB.apply_corruption(np.zeros((16, 16, 3)), C.SHOT_NOISE, 5, 4)
    assert not out.any()


def test_gaussian_distortion_increases_with_severity(ref_image):
    mse = [np.mean([np.mean((CB.apply_corruption(ref_image, C.GAUSSIAN_NOISE, s, seed) - ref_image) ** 2)
                    for seed in range(20)]) for s in CB.SEVERITIES]
    assert all(b > a for a, b in zip(mse, mse[1:]))


def test_corrupt_dataset_copies_annotations_and_varies_per_sample():
    ds = generate_dataset(SynthConfig(n_images=4, seed=1))
    out = CB.corrupt_dataset(ds, C.GAUSSIAN_NOISE, 3, seed=5)
    assert len(out) == len(ds)
    for a, b in zip(ds, out):
        np.testing.assert_array_equal(a.boxes, b.boxes)
        np.testing.assert_array_equal(a.labels, b.labels)
    noise = [o.image - s.image for o, s in zip(out, ds)]
    assert len({image_checksum(n) for n in noise}) == 4
    again = CB.corrupt_dataset(ds, C.GAUSSIAN_NOISE, 3, seed=5)
    assert [image_checksum(s.image) for s in out] == [image_checksum(s.image) for s in again]


def test_corrupt_empty_dataset_raises():
    with pytest.raises(ValueError):
        CB.corrupt_dataset([], C.FOG, 1, 0)


def test_elastic_moves_a_delta_by_under_two_pixels():
    img = np.zeros((64, 64, 3))
    img[31:33, 31:33] = 1.0
    yy, xx = np.mgrid[:64, :64]
    for seed in range(10):
        out = CB.apply_corruption(img, C.ELASTIC_TRANSFORM, 5, seed)[..., 0]
        cy, cx = (out * yy).sum() / out.sum(), (out * xx).sum() / out.sum()
        assert np.hypot(cy - 31.5, cx - 31.5) < 2.0


def test_augment_identity_and_frequency_round_trip(ref_image):
    np.testing.assert_allclose(CB.augment_train(ref_image, 3, CB.AugmentConfig.identity()), ref_image, atol=1e-12)
    out = CB.frequency_transform(ref_image, np.ones(4))
    assert np.abs(out - ref_image).max() < 1e-6


def test_gain_two_clamps_to_one():
    img = np.full((8, 8, 3), 0.6)
    out = np.clip(CB.color_transform(img, np.full(3, 2.0), np.zeros(3), 0.0), 0, 1)
    assert out.max() == 1.0


def test_augment_is_deterministic_and_geometry_preserving(ref_image):
    a = CB.augment_train(ref_image, 9)
    assert image_checksum(a) == image_checksum(CB.augment_train(ref_image, 9))
    assert image_checksum(a) != image_checksum(CB.augment_train(ref_image, 10))
    assert a.shape == ref_image.shape and 0 <= a.min() and a.max() <= 1


def test_hue_rotation_keeps_gray():
    gray = np.full((4, 4, 3), 0.4)
    np.testing.assert_allclose(CB.color_transform(gray, np.ones(3), np.zeros(3), 0.9), gray, atol=1e-12)


def test_suite_on_disk_round_trip(tmp_path):
    ds = generate_dataset(SynthConfig(n_images=3, seed=2))
    manifest = CB.write_suite(ds, tmp_path, seed=7, corruptions=["fog", "pixelate"], severities=(1, 5))
    assert len(manifest["cells"]) == 4
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 7
    cell = CB.read_suite_cell(tmp_path, "fog", 5, ds)
    direct = CB.corrupt_dataset(ds, C.FOG, 5, 7)
    for a, b in zip(cell, direct):
        np.testing.assert_array_equal(a.image, CB.to_uint8(b.image) / 255.0)
        np.testing.assert_array_equal(a.boxes, b.boxes)
