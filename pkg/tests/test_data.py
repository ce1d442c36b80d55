import csv
import filecmp
from collections import Counter

import numpy as np
import pytest

from pldpirl.data import (
    DataConfigError,
    DatasetManifest,
    PPMParseError,
    SynthConfig,
    decode_ppm,
    encode_ppm,
    generate_synthetic,
    histogram_probe_accuracy,
    load_image,
    load_split,
    resize,
    save_image,
    synth_image,
)
from pldpirl.jigsaw import ImageSample


def test_ppm_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    px = rng.integers(0, 256, size=(3, 7, 5)) / 255.0
    save_image(ImageSample(px), tmp_path / "a.ppm")
    back = load_image(tmp_path / "a.ppm")
    assert back.pixels.tobytes() == px.tobytes()


def test_ppm_max_value_and_comments():
    blob = b"P6\n# comment\n1 1\n255\n" + bytes([255, 0, 128])
    px = decode_ppm(blob)
    assert px[:, 0, 0].tolist() == [1.0, 0.0, 128 / 255]


@pytest.mark.parametrize("blob,fragment", [
    (b"P5\n1 1\n255\n\x00", "magic"),
    (b"P6\n2 2\n255\n" + bytes(5), "truncated"),
    (b"P6\n2 \n", "height"),
    (b"P6\n1 1\n65535\n" + bytes(6), "maxval"),
])
def test_ppm_parse_errors_carry_offsets(blob, fragment):
    with pytest.raises(PPMParseError, match=fragment) as info:
        decode_ppm(blob)
    assert "byte offset" in str(info.value)


def test_encode_rejects_bad_shape():
    with pytest.raises(ValueError):
        encode_ppm(np.zeros((4, 2, 2)))


def test_resize_examples():
    rng = np.random.default_rng(1)
    img = rng.random((3, 6, 6))
    np.testing.assert_array_equal(resize(img, 6, 6), img)
    const = np.full((3, 5, 7), 0.3)
    np.testing.assert_allclose(resize(const, 11, 2), 0.3, atol=1e-15)
    checker = np.array([[[0.0, 1.0], [1.0, 0.0]]] * 3)
    np.testing.assert_allclose(resize(checker, 1, 1), 0.5)
    up = resize(img, 13, 9)
    assert up.shape == (3, 13, 9) and up.min() >= 0 and up.max() <= 1
    s = resize(ImageSample(img, 4, 2), 3, 3)
    assert isinstance(s, ImageSample) and (s.index, s.label) == (4, 2)
    with pytest.raises(DataConfigError):
        resize(img, 0, 3)


def test_synth_config_validation():
    with pytest.raises(DataConfigError):
        SynthConfig(counts=(5, 20, 20))
    with pytest.raises(DataConfigError):
        SynthConfig(line_density=(5.0, 5.0, 9.0))
    with pytest.raises(DataConfigError):
        SynthConfig(blob_intensity=(0.1, 0.2))


def test_generation_is_deterministic(tmp_path):
    cfg = SynthConfig(counts=(10, 10, 10), image_size=24, seed=4)
    generate_synthetic(cfg, tmp_path / "a")
    generate_synthetic(cfg, tmp_path / "b")
    names = ["manifest.csv", "synth_meta.csv"] + [f"images/img_{i:05d}.ppm" for i in range(30)]
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert not mismatch and not errors


def test_stroke_counts_are_ordered_by_class():
    cfg = SynthConfig(image_size=24)
    means = []
    for label in range(3):
        counts = [synth_image(cfg, label, np.random.default_rng((9, label, i)))[1]["n_strokes"] for i in range(300)]
        means.append(np.mean(counts))
    # Poisson standard error of a 300-sample mean is about 0.2
    assert means[0] < means[1] < means[2]
    for got, want in zip(means, cfg.line_density):
        assert abs(got - want) < 5 * np.sqrt(want / 300)


@pytest.fixture(scope="module")
def default_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    return generate_synthetic(SynthConfig(), root)


def test_default_split_sizes_and_stratification(default_dataset):
    m = default_dataset
    counts = Counter((e.label, e.split) for e in m.entries)
    for label in range(3):
        n = sum(counts[(label, s)] for s in ("train", "val", "test"))
        for split, ratio in zip(("train", "val", "test"), (0.8, 0.1, 0.1)):
            assert abs(counts[(label, split)] - ratio * n) <= 1
    assert [len(m.split(s)) for s in ("train", "val", "test")] == [600, 75, 75]


def test_task_is_learnable_but_not_trivial(default_dataset):
    xtr, ytr, _ = load_split(default_dataset, "train")
    xte, yte, _ = load_split(default_dataset, "test")
    acc = histogram_probe_accuracy(xtr, ytr, xte, yte)
    assert 40.0 < acc < 100.0


def test_manifest_round_trip_and_validation(default_dataset, tmp_path):
    again = DatasetManifest.read(default_dataset.root / "manifest.csv")
    assert again.entries == default_dataset.entries and again.image_size == 96
    bad = tmp_path / "manifest.csv"
    with open(bad, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["path", "label", "split"])
        wr.writerow(["images/missing.ppm", 0, "train"])
    with pytest.raises(DataConfigError, match="missing"):
        DatasetManifest.read(bad)
    with open(bad, "w") as fh:
        fh.write("path,label,split\na.ppm,0,train\na.ppm,1,test\n")
    with pytest.raises(DataConfigError, match="duplicate"):
        DatasetManifest.read(bad, check_files=False)


def test_load_split_resizes(default_dataset):
    x, y, idx = load_split(default_dataset, "val", image_size=48)
    assert x.shape == (75, 3, 48, 48) and len(y) == len(idx) == 75
    with pytest.raises(DataConfigError):
        load_split(default_dataset, "holdout")


def test_unwritable_root(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_synthetic(SynthConfig(counts=(10, 10, 10), image_size=24), blocker / "sub")
