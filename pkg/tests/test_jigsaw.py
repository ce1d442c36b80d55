import itertools
from collections import Counter

import numpy as np
import pytest

from pldpirl.jigsaw import (
    EmptyDomainError,
    GridError,
    ImageSample,
    apply_jigsaw,
    extract_patches,
    jigsaw_batch,
    reassemble,
    sample_permutation,
)


def random_image(rng, size=6):
    return ImageSample(rng.random((3, size, size)))


def test_extract_patches_slicing_and_grid_one():
    img = random_image(np.random.default_rng(0))
    patches = extract_patches(img, 3)
    assert len(patches) == 9 and all(p.shape == (3, 2, 2) for p in patches)
    np.testing.assert_array_equal(patches[0], img.pixels[:, 0:2, 0:2])
    np.testing.assert_array_equal(patches[5], img.pixels[:, 2:4, 4:6])
    (only,) = extract_patches(img, 1)
    np.testing.assert_array_equal(only, img.pixels)


def test_extract_patches_conserves_pixels():
    img = random_image(np.random.default_rng(1), 96)
    patches = extract_patches(img, 3)
    assert all(p.shape == (3, 32, 32) for p in patches)
    flat = np.sort(np.concatenate([p.ravel() for p in patches]))
    np.testing.assert_array_equal(flat, np.sort(img.pixels.ravel()))


def test_indivisible_grid_names_dimensions():
    with pytest.raises(GridError, match="H=7, W=6, g=3"):
        extract_patches(np.zeros((3, 7, 6)), 3)


def test_sample_permutation_basics():
    assert sample_permutation(1, np.random.default_rng(0)).tolist() == [0]
    a = sample_permutation(9, np.random.default_rng(42))
    b = sample_permutation(9, np.random.default_rng(42))
    assert a.tolist() == b.tolist() and sorted(a.tolist()) == list(range(9))
    with pytest.raises(EmptyDomainError):
        sample_permutation(0, np.random.default_rng(0))


def test_sample_permutation_is_uniform():
    rng = np.random.default_rng(3)
    counts = Counter(tuple(sample_permutation(3, rng)) for _ in range(60000))
    assert set(counts) == set(itertools.permutations(range(3)))
    for c in counts.values():
        assert abs(c / 60000 - 1 / 6) < 0.01


def test_apply_jigsaw_identity_and_definition():
    img = random_image(np.random.default_rng(4))
    ident = apply_jigsaw(img, permutation=range(9))
    for got, want in zip(ident.patches, extract_patches(img, 3)):
        np.testing.assert_array_equal(got, want)
    s = apply_jigsaw(img, np.random.default_rng(5))
    tiles = extract_patches(img, 3)
    for i, p in enumerate(s.permutation):
        np.testing.assert_array_equal(s.patches[i], tiles[p])


def test_apply_jigsaw_leaves_source_untouched():
    img = random_image(np.random.default_rng(6))
    before = img.pixels.copy()
    s = apply_jigsaw(img, np.random.default_rng(7))
    s.patches[0][:] = -1
    np.testing.assert_array_equal(img.pixels, before)


def test_different_seeds_give_different_permutations():
    img = random_image(np.random.default_rng(8))
    perms = {tuple(apply_jigsaw(img, np.random.default_rng(s)).permutation) for s in range(100)}
    assert len(perms) >= 99


def test_round_trip_is_bitwise_over_many_pairs():
    rng = np.random.default_rng(9)
    for i in range(1000):
        grid = int(rng.choice([1, 2, 3]))
        img = ImageSample(rng.random((3, 6 * grid, 6 * grid)), index=i)
        back = reassemble(apply_jigsaw(img, rng, grid))
        assert back.pixels.tobytes() == img.pixels.tobytes()
        assert back.index == i


def test_reassemble_constant_and_shape_errors():
    img = ImageSample(np.full((3, 9, 9), 0.25))
    s = apply_jigsaw(img, np.random.default_rng(0))
    np.testing.assert_array_equal(reassemble(s).pixels, img.pixels)
    s.patches[3] = np.zeros((3, 2, 3))
    with pytest.raises(ValueError):
        reassemble(s)


def test_invalid_explicit_permutation():
    with pytest.raises(ValueError):
        apply_jigsaw(np.zeros((3, 3, 3)), permutation=[0, 0, 1, 2, 3, 4, 5, 6, 7])


def test_batch_transform_matches_single_transform():
    rng = np.random.default_rng(10)
    images = rng.random((4, 3, 12, 12))
    patches, perms = jigsaw_batch(images, np.random.default_rng(11), 3)
    assert patches.shape == (4, 9, 3, 4, 4)
    for b in range(4):
        single = apply_jigsaw(images[b], permutation=perms[b])
        for i in range(9):
            np.testing.assert_array_equal(patches[b, i], single.patches[i])
