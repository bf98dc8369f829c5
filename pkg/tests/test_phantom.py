import json
import warnings

import numpy as np
import pytest

from icseg.metrics import dice
from icseg.phantom import (
    BACKGROUND,
    NOISE_SIGMA,
    PhantomSpec,
    corrupt_prior,
    generate_base,
    generate_population,
    make_population,
    random_smooth_field,
)
from icseg.transform import compose, invert, load_field
from icseg.volume import argmax_labels, load_metaimage, one_hot

SMALL = dict(dims=(32, 32, 32), num_subjects=2)


def test_base_deterministic():
    a_img, a_lab = generate_base(PhantomSpec(seed=5, **SMALL))
    b_img, b_lab = generate_base(PhantomSpec(seed=5, **SMALL))
    assert a_img.data.tobytes() == b_img.data.tobytes()
    assert a_lab.data.tobytes() == b_lab.data.tobytes()
    c_img, _ = generate_base(PhantomSpec(seed=6, **SMALL))
    assert c_img.data.tobytes() != a_img.data.tobytes()


def test_single_structure():
    _, lab = generate_base(PhantomSpec(num_structures=1, **SMALL))
    assert sorted(np.unique(lab.data)) == [0, 1]


@pytest.mark.parametrize("n", [2, 3, 4])
def test_structures_present_and_nested(n):
    img, lab = generate_base(PhantomSpec(num_structures=n, seed=n))
    counts = np.bincount(lab.data.ravel(), minlength=n + 1)
    assert np.all(counts > 0) and len(counts) == n + 1
    # each structure is enclosed by the previous one: its neighbours carry adjacent labels
    for c in range(2, n + 1):
        m = lab.data == c
        grown = np.zeros_like(m)
        for a in range(3):
            grown |= np.roll(m, 1, a) | np.roll(m, -1, a)
        ring = np.unique(lab.data[grown & ~m])
        assert set(ring) <= {c - 1, c + 1}
    # image agrees with labels: every structure stands out from background by > 5 noise sigma
    for c in range(1, n + 1):
        assert abs(img.data[lab.data == c].mean() - BACKGROUND) > 5 * NOISE_SIGMA


def test_base_intensity_levels():
    img, lab = generate_base(PhantomSpec(seed=1))
    means = [img.data[lab.data == c].mean() for c in range(4)]
    np.testing.assert_allclose(means, [0.1, 0.35, 0.6, 0.85], atol=0.01)
    assert img.data.min() >= 0 and img.data.max() <= 1


def test_random_field_properties():
    spec = PhantomSpec(seed=2, deform_max_mm=4.0)
    f = random_smooth_field(spec, 0)
    assert np.abs(f.displacement).max() <= 4.0
    res = np.sqrt((compose(f, invert(f)).voxel_displacement() ** 2).sum(-1))
    assert res.mean() < 0.05
    assert random_smooth_field(PhantomSpec(deform_max_mm=0.0), 0).is_identity()


def test_large_deformation_warns():
    with pytest.warns(UserWarning):
        PhantomSpec(deform_max_mm=6.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        PhantomSpec(deform_max_mm=4.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(num_structures=0)
    with pytest.raises(ValueError):
        PhantomSpec(label_flip_rate=0.5)
    with pytest.raises(ValueError):
        PhantomSpec.from_preset("medium")


def test_corrupt_noop_is_one_hot():
    spec = PhantomSpec(**SMALL)
    _, gt = generate_base(spec)
    assert corrupt_prior(gt, spec).data.tobytes() == one_hot(gt, 4).data.tobytes()


def test_corrupt_quality_band():
    spec = PhantomSpec(seed=3, boundary_shift_voxels=1, label_flip_rate=0.1, smoothing_sigma_voxels=1.0)
    _, gt = generate_base(spec)
    prior = corrupt_prior(gt, spec)
    np.testing.assert_allclose(prior.data.sum(-1), 1.0, atol=1e-6)
    lab = argmax_labels(prior)
    for c in (1, 2, 3):
        assert 0.5 < dice(lab, gt, c) < 1.0


def test_presets_order_quality():
    _, gt = generate_base(PhantomSpec(seed=4))
    scores = {}
    for name in ("weak", "strong"):
        spec = PhantomSpec.from_preset(name, seed=4)
        lab = argmax_labels(corrupt_prior(gt, spec))
        scores[name] = np.mean([dice(lab, gt, c) for c in (1, 2, 3)])
    assert scores["weak"] < scores["strong"] < 1.0


def test_subjects_depend_only_on_seed_and_index():
    two = make_population(PhantomSpec(seed=9, dims=(24, 24, 24), num_subjects=2, deform_max_mm=2.0))
    three = make_population(PhantomSpec(seed=9, dims=(24, 24, 24), num_subjects=3, deform_max_mm=2.0))
    for a, b in zip(two, three):
        assert a.image.data.tobytes() == b.image.data.tobytes()
        assert a.prior.data.tobytes() == b.prior.data.tobytes()
        assert a.field.displacement.tobytes() == b.field.displacement.tobytes()


def test_generate_population(tmp_path):
    spec = PhantomSpec.from_preset("strong", seed=1, **SMALL)
    manifest = generate_population(spec, tmp_path)
    with open(tmp_path / "manifest.json") as fh:
        on_disk = json.load(fh)
    assert on_disk["preset"] == "strong"
    assert len(on_disk["subjects"]) == 2
    subj = make_population(spec)
    for entry, s in zip(on_disk["subjects"], subj):
        img = load_metaimage(tmp_path / entry["image"])
        assert img.data.tobytes() == s.image.data.tobytes()
        gt = load_metaimage(tmp_path / entry["gt"])
        assert gt.data.tobytes() == s.gt.data.tobytes()
        f = load_field(tmp_path / entry["field"])
        np.testing.assert_allclose(f.displacement, s.field.displacement, atol=1e-5)
    assert manifest["path"].endswith("manifest.json")
    again = tmp_path / "again"
    generate_population(spec, again)
    for entry in on_disk["subjects"]:
        for key in ("image", "gt", "prior", "field"):
            assert (again / entry[key]).read_bytes() == (tmp_path / entry[key]).read_bytes()
