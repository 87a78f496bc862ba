"""Synthetic dataset generation and the PNG round trip."""

import os

import numpy as np
import pytest

from snnforge.datasets import (
    gen_noisy_images,
    gen_shapes_seg,
    load_denoise_dataset,
    load_image,
    load_label,
    load_seg_dataset,
    save_image_png,
    save_label_png,
)
from snnforge.errors import MissingArtifactError, ShapeError


def test_image_png_roundtrip_quantizes_to_8bit(rng, tmp_path):
    img = rng.random((9, 11))
    path = tmp_path / "img.png"
    save_image_png(path, img)
    back = load_image(path)
    assert back.shape == (9, 11)
    np.testing.assert_allclose(back, np.round(img * 255) / 255, atol=1e-12)


def test_label_png_roundtrip_is_exact(rng, tmp_path):
    labels = rng.integers(0, 3, size=(7, 7))
    path = tmp_path / "lab.png"
    save_label_png(path, labels)
    np.testing.assert_array_equal(load_label(path), labels)
    with pytest.raises(ShapeError, match="8-bit"):
        save_label_png(path, np.array([[0, 300]]))


def test_missing_files_raise(tmp_path):
    with pytest.raises(MissingArtifactError, match="no image"):
        load_image(tmp_path / "absent.png")
    with pytest.raises(MissingArtifactError, match="no label"):
        load_label(tmp_path / "absent.png")
    with pytest.raises(MissingArtifactError, match="manifest"):
        load_seg_dataset(tmp_path)


def test_shapes_seg_generation(tmp_path):
    manifest = gen_shapes_seg(tmp_path, count=4, seed=11, size=32)
    assert manifest["count"] == 4
    assert manifest["num_classes"] == 3
    data = load_seg_dataset(tmp_path)
    assert len(data) == 4
    seen = set()
    for img, lab in data:
        assert img.shape == (1, 32, 32)
        assert lab.shape == (32, 32)
        assert img.min() >= 0.0 and img.max() <= 1.0
        seen.update(np.unique(lab).tolist())
    # every class occurs somewhere in a handful of scenes
    assert seen == {0, 1, 2}


def test_shapes_seg_labels_track_brightness(tmp_path):
    gen_shapes_seg(tmp_path, count=6, seed=3, size=32)
    for img, lab in load_seg_dataset(tmp_path):
        if (lab == 1).any() and (lab == 0).any():
            # circles are drawn brighter than the 0.05 background
            assert img[0][lab == 1].mean() > img[0][lab == 0].mean()


def test_generation_is_deterministic(tmp_path):
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    ma = gen_shapes_seg(a_dir, count=3, seed=5, size=32)
    mb = gen_shapes_seg(b_dir, count=3, seed=5, size=32)
    assert ma == mb
    for entry in ma["files"]:
        for key in ("image", "label"):
            with open(a_dir / entry[key], "rb") as fa, open(b_dir / entry[key], "rb") as fb:
                assert fa.read() == fb.read()


def test_different_seed_changes_content(tmp_path):
    gen_shapes_seg(tmp_path / "a", count=2, seed=1, size=32)
    gen_shapes_seg(tmp_path / "b", count=2, seed=2, size=32)
    a = load_seg_dataset(tmp_path / "a")
    b = load_seg_dataset(tmp_path / "b")
    assert any(not np.array_equal(x[0], y[0]) for x, y in zip(a, b))


def test_zero_count_dataset(tmp_path):
    gen_shapes_seg(tmp_path, count=0, seed=0, size=32)
    assert load_seg_dataset(tmp_path) == []


def test_noisy_images_generation(tmp_path):
    manifest = gen_noisy_images(tmp_path, count=5, seed=9, size=48)
    assert manifest["sigmas"] == [15, 25, 50]
    data = load_denoise_dataset(tmp_path, sigma=25)
    assert len(data) == 5
    for triple in data:
        assert triple["clean"].shape == (1, 48, 48)
        np.testing.assert_allclose(
            triple["noise"], triple["noisy"] - triple["clean"], atol=1e-15
        )
        # clean images stay inside the soft range
        assert 0.25 <= triple["clean"].min() and triple["clean"].max() <= 0.75


def test_noise_level_matches_sigma(tmp_path):
    gen_noisy_images(tmp_path, count=12, seed=4, size=48)
    for sigma in (15, 25):
        data = load_denoise_dataset(tmp_path, sigma=sigma)
        stds = [float(t["noise"].std()) for t in data]
        # 8-bit quantization and clipping shave a little off the nominal level
        assert np.mean(stds) == pytest.approx(sigma / 255.0, rel=0.08)
    weak = np.mean([t["noise"].std() for t in load_denoise_dataset(tmp_path, 15)])
    strong = np.mean([t["noise"].std() for t in load_denoise_dataset(tmp_path, 50)])
    assert weak < strong


def test_denoise_loader_validation(tmp_path):
    gen_noisy_images(tmp_path / "n", count=1, seed=0, size=48)
    with pytest.raises(MissingArtifactError, match="sigma 40"):
        load_denoise_dataset(tmp_path / "n", sigma=40)
    gen_shapes_seg(tmp_path / "s", count=1, seed=0, size=32)
    with pytest.raises(MissingArtifactError, match="not a noisy-images"):
        load_denoise_dataset(tmp_path / "s", sigma=25)
    with pytest.raises(MissingArtifactError, match="not a shapes-seg"):
        load_seg_dataset(tmp_path / "n")
