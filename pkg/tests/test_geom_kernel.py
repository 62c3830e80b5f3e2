import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geom_kernel import (
    CORNER_SLOTS,
    BezierCurve,
    CoonsPatch,
    DegenerateNormalError,
    area_element,
    bernstein,
    coons_basis,
    coons_normal,
    coons_normals,
    coons_partials,
    eval_bezier,
    eval_coons,
    patch_curves,
    tessellate,
)
from intersection import flat_patch_points

unit = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)


def random_patch(seed, noise=0.3):
    rng = np.random.default_rng(seed)
    return CoonsPatch(flat_patch_points() + rng.normal(0.0, noise, size=(12, 3)))


def bulged_patch():
    pts = flat_patch_points()
    pts[[1, 2], 2] = 0.3
    pts[[4, 5, 10, 11], 2] = 0.15
    return CoonsPatch(pts)


@given(unit)
def test_bernstein_partition_of_unity(g):
    assert bernstein(g).sum() == pytest.approx(1.0, abs=1e-12)


def test_bezier_endpoints_and_reverse():
    curve = BezierCurve(np.random.default_rng(0).normal(size=(4, 3)))
    assert np.allclose(eval_bezier(curve, 0.0), curve.p1)
    assert np.allclose(eval_bezier(curve, 1.0), curve.p4)
    g = np.linspace(0.0, 1.0, 7)
    assert np.allclose(eval_bezier(curve.reversed(), g), eval_bezier(curve, 1.0 - g))


def test_bezier_rejects_bad_shape():
    with pytest.raises(ValueError):
        BezierCurve(np.zeros((3, 3)))


@settings(max_examples=50)
@given(unit, st.integers(min_value=0, max_value=10_000))
def test_patch_interpolates_its_boundary(g, seed):
    patch = random_patch(seed)
    c1, c2, c3, c4 = patch_curves(patch)
    assert np.allclose(eval_coons(patch, g, 0.0), eval_bezier(c1, g))
    assert np.allclose(eval_coons(patch, 1.0, g), eval_bezier(c2, g))
    assert np.allclose(eval_coons(patch, g, 1.0), eval_bezier(c3, 1.0 - g))
    assert np.allclose(eval_coons(patch, 0.0, g), eval_bezier(c4, 1.0 - g))


def test_corners():
    patch = random_patch(3)
    for (s, t), slot in zip(((0, 0), (1, 0), (1, 1), (0, 1)), CORNER_SLOTS):
        assert np.allclose(eval_coons(patch, s, t), patch.points[slot])


def test_flat_square_is_identity_map():
    patch = CoonsPatch(flat_patch_points())
    s = np.array([0.1, 0.5, 0.93])
    t = np.array([0.7, 0.25, 0.01])
    assert np.allclose(eval_coons(patch, s, t), np.stack([s, t, np.zeros(3)], axis=1))
    assert np.allclose(area_element(patch, s, t), 1.0)
    assert np.allclose(coons_normal(patch, 0.4, 0.6), [0.0, 0.0, 1.0])


def test_blending_weights_are_affine():
    s = np.random.default_rng(1).random(20)
    t = np.random.default_rng(2).random(20)
    W, Ws, Wt = coons_basis(s, t)
    assert np.allclose(W.sum(axis=1), 1.0)
    assert np.allclose(Ws.sum(axis=1), 0.0)
    assert np.allclose(Wt.sum(axis=1), 0.0)


def test_partials_match_finite_differences():
    patch = random_patch(7)
    h = 1e-6
    for s, t in ((0.3, 0.4), (0.5, 0.5), (0.8, 0.15)):
        ps, pt = coons_partials(patch, s, t)
        fd_s = (eval_coons(patch, s + h, t) - eval_coons(patch, s - h, t)) / (2 * h)
        fd_t = (eval_coons(patch, s, t + h) - eval_coons(patch, s, t - h)) / (2 * h)
        assert np.allclose(ps, fd_s, atol=1e-6)
        assert np.allclose(pt, fd_t, atol=1e-6)


def test_out_of_range_parameters_raise():
    patch = random_patch(0)
    with pytest.raises(ValueError):
        eval_coons(patch, 1.2, 0.5)
    with pytest.raises(ValueError):
        eval_coons(patch, 0.5, -0.1)


def test_degenerate_normal():
    patch = CoonsPatch(np.zeros((12, 3)))
    with pytest.raises(DegenerateNormalError):
        coons_normal(patch, 0.5, 0.5)
    normals, valid = coons_normals(patch, np.array([0.2, 0.7]), np.array([0.3, 0.9]))
    assert not valid.any()
    assert np.allclose(normals, 0.0)


def test_from_curves_roundtrip_and_open_loop():
    patch = random_patch(11)
    rebuilt = CoonsPatch.from_curves(*patch_curves(patch))
    assert np.array_equal(rebuilt.points, patch.points)
    c1, c2, c3, c4 = patch_curves(patch)
    broken = BezierCurve(c2.points + 0.01)
    with pytest.raises(ValueError):
        CoonsPatch.from_curves(c1, broken, c3, c4)


@pytest.mark.parametrize("n", [1, 3, 8])
def test_tessellation_counts_and_winding(n):
    mesh = tessellate(CoonsPatch(flat_patch_points()), n)
    assert len(mesh.vertices) == (n + 1) ** 2
    assert len(mesh.faces) == 2 * n * n
    assert np.allclose(mesh.face_normals, [0.0, 0.0, 1.0])
    assert mesh.area == pytest.approx(1.0)


def test_area_element_integral_matches_tessellated_area():
    patch = bulged_patch()
    rng = np.random.default_rng(5)
    s, t = rng.random(200_000), rng.random(200_000)
    mc_area = area_element(patch, s, t).mean()
    tess_area = tessellate(patch, 64).area
    assert abs(mc_area - tess_area) / tess_area < 0.005
