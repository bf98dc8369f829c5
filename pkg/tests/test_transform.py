import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icseg.transform import (
    DISPLACEMENT_CAP,
    ConfigurationError,
    ControlGrid,
    DenseDeformationField,
    InversionError,
    compose,
    densify,
    identity_field,
    identity_grid,
    invert,
    load_field,
    save_field,
    translation_field,
    warp_labels,
    warp_probability,
    warp_scalar,
)
from icseg.volume import LabelMap, ProbabilityMap, ScalarVolume, VolumeDomain, one_hot


def _cubic_b(t):
    """Centred cubic B-spline, written piecewise."""
    t = abs(t)
    if t < 1:
        return 2 / 3 - t * t + t ** 3 / 2
    if t < 2:
        return (2 - t) ** 3 / 6
    return 0.0


def _brute_force_densify(grid: ControlGrid) -> np.ndarray:
    dom = grid.domain
    pos = grid.positions_mm()
    out = np.zeros(dom.dims + (3,))
    for x in np.ndindex(*dom.dims):
        xmm = [x[a] * dom.spacing[a] for a in range(3)]
        wx = [np.array([_cubic_b((xmm[a] - p) / grid.grid_spacing[a]) for p in pos[a]]) for a in range(3)]
        w = wx[0][:, None, None] * wx[1][None, :, None] * wx[2][None, None, :]
        out[x] = np.tensordot(w, grid.displacements, axes=3)
    return out


def _random_grid(dom, gs, amp, seed):
    g = identity_grid(dom, gs)
    rng = np.random.default_rng(seed)
    return g.with_displacements(rng.uniform(-amp, amp, g.displacements.shape))


def _smooth_volume(dom):
    x, y, z = np.indices(dom.dims, dtype=float)
    return ScalarVolume(dom, 0.5 + 0.2 * np.sin(x / 3.0) * np.cos(y / 4.0) + 0.1 * np.sin(z / 5.0))


def test_grid_shape_and_spacing_check():
    dom = VolumeDomain((48, 40, 33))
    g = identity_grid(dom, 8)
    assert g.grid_dims == (9, 8, 8)
    assert g.num_nodes == 9 * 8 * 8
    for n, gd in zip(dom.dims, g.grid_dims):
        assert gd >= (n - 1) / 8 + 3
    with pytest.raises(ConfigurationError):
        identity_grid(dom, 1.5)


def test_identity_grid_gives_identity_warp():
    dom = VolumeDomain((10, 9, 8), (1.0, 1.5, 2.0))
    f = densify(identity_grid(dom, 6))
    assert f.is_identity()
    v = _smooth_volume(dom)
    assert warp_scalar(v, f).data.tobytes() == v.data.tobytes()


def test_densify_matches_basis_summation():
    dom = VolumeDomain((13, 11, 9), (1.0, 1.2, 0.8))
    grid = _random_grid(dom, (4.0, 5.0, 3.0), 1.5, 0)
    np.testing.assert_allclose(densify(grid).displacement, _brute_force_densify(grid), rtol=0, atol=1e-6)


def test_densify_compact_support():
    dom = VolumeDomain((40, 40, 40))
    g = identity_grid(dom, 8)
    d = np.zeros(g.displacements.shape)
    d[3, 3, 3] = (1.0, -2.0, 0.5)  # control point at 16 mm
    u = densify(g.with_displacements(d)).displacement
    np.testing.assert_allclose(u[16, 16, 16], np.array([1.0, -2.0, 0.5]) * (2 / 3) ** 3)
    x = np.arange(40)
    far = np.abs(x - 16) >= 16
    assert not np.any(u[far]) and not np.any(u[:, far]) and not np.any(u[:, :, far])


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.sampled_from(["cubic", "linear"]))
def test_partition_of_unity(a, b, c, basis):
    dom = VolumeDomain((17, 12, 9), (1.0, 2.0, 1.0))
    g = identity_grid(dom, 4)
    u = densify(g.with_displacements(np.broadcast_to([a, b, c], g.displacements.shape)), basis)
    np.testing.assert_allclose(u.displacement, np.broadcast_to([a, b, c], u.displacement.shape), atol=1e-9)


def test_densify_bounded_by_control_values():
    dom = VolumeDomain((30, 30, 30))
    grid = _random_grid(dom, 6, 2.0, 4)
    assert np.abs(densify(grid).displacement).max() <= 2.0 + 1e-12


def test_warp_scalar_translation():
    dom = VolumeDomain((8, 6, 5))
    v = ScalarVolume(dom, np.random.default_rng(1).random(dom.dims))
    out = warp_scalar(v, translation_field(dom, (1.0, 0, 0)))
    np.testing.assert_array_equal(out.data[:-1], v.data[1:])


def test_warp_domain_mismatch():
    v = ScalarVolume(VolumeDomain((4, 4, 4)), np.zeros((4, 4, 4)))
    with pytest.raises(ValueError):
        warp_scalar(v, identity_field(VolumeDomain((4, 4, 5))))


def test_warp_probability_integer_shift_and_sums():
    dom = VolumeDomain((10, 8, 6))
    rng = np.random.default_rng(2)
    lab = LabelMap(dom, rng.integers(0, 3, dom.dims))
    oh = one_hot(lab, 3)
    assert warp_probability(oh, identity_field(dom)).data.tobytes() == oh.data.tobytes()
    shifted = warp_probability(oh, translation_field(dom, (0, -1.0, 0)))
    np.testing.assert_array_equal(shifted.data[:, 1:], oh.data[:, :-1])
    np.testing.assert_array_equal(shifted.data[:, 0, :, 0], 1.0)  # outside the domain is background
    prob = ProbabilityMap(dom, rng.random(dom.dims + (3,)))
    f = densify(_random_grid(dom, 4, 1.5, 3))
    np.testing.assert_allclose(warp_probability(prob, f).data.sum(-1), 1.0, atol=1e-6)


def test_warp_labels_nearest():
    dom = VolumeDomain((5, 1, 1))
    lab = LabelMap(dom, np.arange(5).reshape(5, 1, 1))
    out = warp_labels(lab, translation_field(dom, (0.5, 0, 0)))  # ties round down
    np.testing.assert_array_equal(out.data.ravel(), [0, 1, 2, 3, 4])
    out = warp_labels(lab, translation_field(dom, (0.6, 0, 0)))
    np.testing.assert_array_equal(out.data.ravel(), [1, 2, 3, 4, 4])


def test_compose_identity_and_translations():
    dom = VolumeDomain((9, 8, 7))
    f = densify(_random_grid(dom, 4, 1.0, 5))
    ident = identity_field(dom)
    assert compose(ident, f) is f and compose(f, ident) is f
    t = compose(translation_field(dom, (1.0, 2.0, -0.5)), translation_field(dom, (0.25, -1.0, 0.0)))
    np.testing.assert_allclose(t.displacement, np.broadcast_to([1.25, 1.0, -0.5], t.displacement.shape))


def test_compose_matches_sequential_warps():
    dom = VolumeDomain((32, 32, 32))
    v = _smooth_volume(dom)
    A = densify(_random_grid(dom, 8, 2.0, 6))
    B = densify(_random_grid(dom, 8, 2.0, 7))
    once = warp_scalar(v, compose(A, B)).data
    twice = warp_scalar(warp_scalar(v, A), B).data
    # interpolation error of one trilinear warp, measured against the analytic volume
    x, y, z = np.indices(dom.dims, dtype=float) + np.moveaxis(A.voxel_displacement(), -1, 0)
    exact = 0.5 + 0.2 * np.sin(x / 3.0) * np.cos(y / 4.0) + 0.1 * np.sin(z / 5.0)
    core = (slice(6, -6),) * 3  # away from border clamping
    interp = np.abs(warp_scalar(v, A).data - exact)[core].max()
    assert np.abs(once - twice)[core].max() < 2 * interp


def test_invert_translation_and_identity():
    dom = VolumeDomain((6, 6, 6))
    ident = identity_field(dom)
    assert invert(ident) is ident
    inv = invert(translation_field(dom, (1.5, -2.0, 0.25)))
    np.testing.assert_allclose(inv.displacement, np.broadcast_to([-1.5, 2.0, -0.25], inv.displacement.shape))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_invert_residual_on_capped_fields(seed):
    dom = VolumeDomain((32, 32, 32))
    gs = 8.0
    f = densify(_random_grid(dom, gs, DISPLACEMENT_CAP * gs, seed))
    inv = invert(f)
    res = np.sqrt((compose(f, inv).voxel_displacement() ** 2).sum(-1))
    assert res.mean() < 0.05
    assert res.max() < 0.5


def test_invert_fold_raises():
    dom = VolumeDomain((24, 24, 24))
    g = identity_grid(dom, 4)
    d = np.zeros(g.displacements.shape)
    d[4, :, :, 0] = 12.0
    d[5, :, :, 0] = -12.0
    with pytest.raises(InversionError, match="voxel"):
        invert(densify(g.with_displacements(d)))


def test_field_round_trip(tmp_path):
    dom = VolumeDomain((7, 6, 5), (1.0, 0.5, 2.0), (3.0, -1.0, 0.0))
    f = densify(_random_grid(dom, 4, 1.0, 8))
    f = DenseDeformationField(dom, f.displacement.astype(np.float32))
    save_field(f, tmp_path / "f.mha")
    back = load_field(tmp_path / "f.mha")
    assert back.domain == dom
    assert back.displacement.tobytes() == f.displacement.tobytes()
