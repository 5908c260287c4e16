import numpy as np
import pytest

from flipequiv import data as D
from flipequiv import tensor as T

SMALL = D.DataSpec(per_class=30, height=17, width=17)


def test_generation_is_deterministic():
    a = D.gen_flip_invariant(SMALL, 7)
    b = D.gen_flip_invariant(SMALL, 7)
    assert D.dataset_bytes(a) == D.dataset_bytes(b)
    assert D.dataset_bytes(a) != D.dataset_bytes(D.gen_flip_invariant(SMALL, 8))


def test_labels_balanced_and_values_on_float32_grid():
    ds = D.gen_flip_invariant(SMALL, 1)
    assert np.bincount(ds.labels).tolist() == [30] * 4
    np.testing.assert_array_equal(ds.images, ds.images.astype(np.float32).astype(np.float64))


def test_noise_free_samples_hold_one_shape_in_either_orientation():
    spec = D.DataSpec(per_class=40, height=15, width=15, noise_sigma=0.0)
    ds = D.gen_flip_invariant(spec, 2)
    flips = 0
    for img, y in zip(ds.images, ds.labels):
        stencil = D.SHAPES[D.DEFAULT_ORDER[y]]
        direct = D.find_instances(img, stencil)
        mirrored = D.find_instances(img, stencil[:, ::-1])
        assert len(direct) + len(mirrored) >= 1
        flips += bool(mirrored) and not direct
    # both orientations occur (fair coin over 160 draws)
    assert 40 < flips < 120


def test_asymmetric_shapes():
    # most templates must differ from their mirror image or invariance is trivial
    asym = [n for n, s in D.SHAPES.items() if not np.array_equal(s, s[:, ::-1])]
    assert len(asym) >= 4


def test_spec_validation():
    with pytest.raises(ValueError, match="odd"):
        D.gen_flip_invariant(D.DataSpec(width=32), 0)
    with pytest.raises(ValueError):
        D.gen_flip_invariant(D.DataSpec(classes=9), 0)
    with pytest.raises(ValueError):
        D.gen_flip_invariant(D.DataSpec(noise_sigma=-1), 0)


def test_cooccurrence_images_are_flip_closed():
    spec = D.DataSpec(classes=2, per_class=10, height=17, width=17, noise_sigma=0.0)
    data, probes = D.gen_cooccurrence(spec, 3)
    for img, probe, y in zip(data.images, probes.images, data.labels):
        st = D.SHAPES[D.COOCCUR_ORDER[y]]
        assert len(D.find_instances(img, st)) == 1
        assert len(D.find_instances(img, st[:, ::-1])) == 1
        assert len(D.find_instances(probe, st)) + len(D.find_instances(probe, st[:, ::-1])) == 1
    with pytest.raises(ValueError):
        D.gen_cooccurrence(D.DataSpec(classes=2, width=13, height=13), 0)


def test_augment_hflip_extremes(rng):
    x = rng.standard_normal((6, 1, 3, 5))
    np.testing.assert_array_equal(D.augment_hflip(x, 0.0, T.make_rng(0)), x)
    np.testing.assert_array_equal(D.augment_hflip(x, 1.0, T.make_rng(0)), T.hflip(x))
    # the rng advances identically whatever the probability
    r1, r2 = T.make_rng(0), T.make_rng(0)
    D.augment_hflip(x, 0.0, r1)
    D.augment_hflip(x, 0.7, r2)
    assert r1.random() == r2.random()
    with pytest.raises(ValueError):
        D.augment_hflip(x, 2.0, r1)


def test_dataset_roundtrip_bit_exact(tmp_path):
    ds = D.gen_flip_invariant(SMALL, 5)
    path = tmp_path / "d.eqds"
    D.save_dataset(ds, path)
    back = D.load_dataset(path)
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert D.dataset_bytes(back) == path.read_bytes()


def test_dataset_format_errors():
    raw = D.dataset_bytes(D.gen_flip_invariant(SMALL, 5))
    with pytest.raises(D.DatasetFormatError, match="magic"):
        D.dataset_from_bytes(b"NOPE" + raw[4:])
    with pytest.raises(D.DatasetFormatError, match="size"):
        D.dataset_from_bytes(raw[:-1])
    bad_version = raw[:4] + (99).to_bytes(4, "little") + raw[8:]
    with pytest.raises(D.DatasetFormatError, match="version"):
        D.dataset_from_bytes(bad_version)


def test_dataset_helpers():
    ds = D.gen_flip_invariant(SMALL, 5)
    assert len(ds.subset(7)) == 7
    np.testing.assert_array_equal(ds.flipped().images, T.hflip(ds.images))
    with pytest.raises(ValueError):
        D.Dataset(np.zeros((2, 1, 3, 3)), np.array([0, 5]), 2)
