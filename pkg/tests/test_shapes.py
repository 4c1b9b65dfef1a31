import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from denseuv.errors import DegeneracyError, SchemaError
from denseuv.shapes import (LandmarkSet, SimilarityTransform, Template, UvMap, DisplacementField,
                            bbox_of, compute_mean_shape, generate_gt_uvmap, gt_uv_at, identity_uv_map,
                            pixel_centers, sample_uv, sparse_to_dense, umeyama_align, warp_uv_map)
from denseuv.synthetic import ShapeSpec, generate_instance, landmark_angles, superellipse_radius

from helpers import point_in_polygon


def lset(*structs, size=(64, 64)):
    return LandmarkSet(tuple(structs), size)


# ---- LandmarkSet / template ----------------------------------------------

def test_landmarkset_bounds_and_names():
    with pytest.raises(ValueError):
        lset(("a", [[64.0, 1.0], [2, 2]]))
    with pytest.raises(SchemaError):
        lset(("a", [[1.0, 1.0]]), ("a", [[2.0, 2.0]]))
    s = lset(("a", [[1.0, 1.0], [3, 4]]))
    assert s.schema() == (("a", 2),)
    assert LandmarkSet.from_dict(s.to_dict()) == s


def test_mean_of_identical_sets():
    s = lset(("a", [[1.0, 2.0], [5, 9], [7, 3]]))
    t = compute_mean_shape([s, s])
    np.testing.assert_array_equal(t.landmarks["a"], s["a"])


def test_mean_of_two_points():
    t = compute_mean_shape([lset(("a", [[0.0, 0.0], [4, 4]])), lset(("a", [[2.0, 4.0], [6, 8]]))])
    np.testing.assert_array_equal(t.landmarks["a"][0], [1.0, 2.0])


def test_mean_shape_errors():
    with pytest.raises(ValueError):
        compute_mean_shape([])
    with pytest.raises(SchemaError):
        compute_mean_shape([lset(("a", [[1.0, 1], [2, 3]])), lset(("b", [[1.0, 1], [2, 3]]))])
    with pytest.raises(SchemaError):
        compute_mean_shape([lset(("a", [[1.0, 1], [2, 3]])), lset(("a", [[1.0, 1], [2, 3], [4, 4]]))])


def test_template_uv_matches_bbox_position():
    s = lset(("a", [[2.0, 3.0], [10.5, 7.0], [6.0, 12.2]]))
    t = Template.from_landmarks(s)
    assert t.bboxes["a"] == (2, 3, 11, 13)
    uv = t.uv["a"]
    assert np.all(np.abs(uv) <= 1)
    np.testing.assert_allclose(uv[0], [-1.0, -1.0])
    np.testing.assert_allclose(uv[1], [-1 + 2 * 8.5 / 9, -1 + 2 * 4 / 10])


def test_template_matches_generator_base(small_dataset):
    spec = ShapeSpec()
    ds = [generate_instance(spec, s).landmarks for s in range(1000, 1160)]
    t = compute_mean_shape(ds)
    s = spec.structures[0]
    phi = landmark_angles(s.n_landmarks)
    r = superellipse_radius(phi, s.radii, s.exponent)
    base = np.stack([s.center[0] + r * np.cos(phi), s.center[1] + r * np.sin(phi)], axis=1)
    assert np.abs(t.landmarks["shape"] - base).max() <= 0.5


# ---- Umeyama ---------------------------------------------------------------

def test_umeyama_identity():
    src = np.random.default_rng(0).uniform(0, 50, (10, 2))
    tf, aligned, res = umeyama_align(src, src)
    np.testing.assert_allclose(tf.rotation, np.eye(2), atol=1e-12)
    assert abs(tf.scale - 1) < 1e-12 and np.abs(tf.translation).max() < 1e-9
    assert res < 1e-9
    assert np.array_equal(tf.apply(src), aligned)


def test_umeyama_known_transform():
    src = np.random.default_rng(1).uniform(-20, 20, (12, 2))
    true = SimilarityTransform.from_params(math.radians(30), 1.7, (5.0, -3.0))
    tf, _, res = umeyama_align(src, true.apply(src))
    assert abs(tf.angle - math.radians(30)) < 1e-9
    assert abs(tf.scale - 1.7) < 1e-9
    np.testing.assert_allclose(tf.translation, [5, -3], atol=1e-9)
    assert res < 1e-9


def _svd_oracle(src, dst):
    # direct least squares over (a, b, tx, ty) with [[a, -b], [b, a]] = s R
    A = np.zeros((2 * len(src), 4))
    A[0::2] = np.c_[src[:, 0], -src[:, 1], np.ones(len(src)), np.zeros(len(src))]
    A[1::2] = np.c_[src[:, 1], src[:, 0], np.zeros(len(src)), np.ones(len(src))]
    sol, *_ = np.linalg.lstsq(A, dst.reshape(-1), rcond=None)
    a, b, tx, ty = sol
    fit = np.c_[a * src[:, 0] - b * src[:, 1] + tx, b * src[:, 0] + a * src[:, 1] + ty]
    return np.sqrt(((fit - dst) ** 2).sum(axis=1).mean())


def test_umeyama_noisy_matches_lstsq_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        src = rng.uniform(0, 60, (50, 2))
        true = SimilarityTransform.from_params(rng.uniform(-3, 3), rng.uniform(0.5, 2), rng.uniform(-10, 10, 2))
        dst = true.apply(src) + rng.normal(0, 0.1, src.shape)
        _, _, res = umeyama_align(src, dst)
        assert res <= 0.5
        assert abs(res - _svd_oracle(src, dst)) < 1e-9


def test_umeyama_degenerate():
    with pytest.raises(DegeneracyError):
        umeyama_align(np.ones((5, 2)), np.random.default_rng(0).normal(size=(5, 2)))


def test_umeyama_no_reflection():
    src = np.array([[0.0, 0], [1, 0], [0, 2], [3, 1]])
    dst = src * np.array([-1.0, 1.0])
    tf, _, _ = umeyama_align(src, dst)
    assert np.linalg.det(tf.rotation) > 0


@given(st.floats(-math.pi, math.pi), st.floats(0.1, 10), st.floats(-100, 100), st.floats(-100, 100),
       st.integers(2, 30), st.integers(0, 2 ** 31))
def test_umeyama_exact_property(angle, scale, tx, ty, n, seed):
    src = np.random.default_rng(seed).uniform(-50, 50, (n, 2))
    true = SimilarityTransform.from_params(angle, scale, (tx, ty))
    tf, aligned, res = umeyama_align(src, true.apply(src))
    assert res < 1e-9
    assert np.array_equal(tf.apply(src), aligned)


# ---- identity map / interpolation / warping ---------------------------------

def test_identity_uv_small():
    m = identity_uv_map((0, 0, 2, 2))
    np.testing.assert_array_equal(m.uv[:, 1, 1], [0, 0])
    for j, i in ((0, 0), (0, 2), (2, 0), (2, 2)):
        assert set(np.abs(m.uv[:, j, i])) == {1.0}
    m = identity_uv_map((0, 0, 8, 4))
    np.testing.assert_allclose(np.diff(m.uv[0, 0]), 0.25)
    with pytest.raises(ValueError):
        identity_uv_map((3, 3, 3, 8))


@given(st.integers(-20, 20), st.integers(-20, 20), st.integers(1, 40), st.integers(1, 40))
def test_identity_uv_monotone(x0, y0, dw, dh):
    m = identity_uv_map((x0, y0, x0 + dw, y0 + dh))
    assert np.all(np.diff(m.uv[0], axis=1) > 0) and np.all(np.diff(m.uv[1], axis=0) > 0)
    assert m.uv[0, :, 0].max() == -1 and m.uv[0, :, -1].min() == 1
    assert m.uv[1, 0].max() == -1 and m.uv[1, -1].min() == 1


def test_sparse_to_dense_examples():
    pts = np.array([[2.0, 2.0], [12.0, 3.0], [6.0, 11.0], [11.0, 10.0]])
    bb = bbox_of(pts)
    f = sparse_to_dense(pts, np.zeros_like(pts), bb)
    assert np.all(f.values[:, f.valid] == 0)
    f = sparse_to_dense(pts, np.full_like(pts, 1.5), bb)
    np.testing.assert_allclose(f.values[:, f.valid], 1.5, atol=1e-12)
    tri = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]])
    f = sparse_to_dense(tri, np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]), bbox_of(tri))
    np.testing.assert_allclose(f.values[:, 2, 2], [1 / 3, 1 / 3], atol=1e-12)
    with pytest.raises(DegeneracyError):
        sparse_to_dense(np.array([[0.0, 0], [1, 1], [2, 2]]), np.zeros((3, 2)), (0, 0, 2, 2))


def test_sparse_to_dense_valid_is_closed_hull():
    pts = np.array([[1.0, 1.0], [9.0, 2.0], [7.0, 9.0], [2.0, 7.0], [5.0, 5.0]])
    bb = bbox_of(pts)
    f = sparse_to_dense(pts, np.zeros_like(pts), bb)
    from denseuv.shapes import convex_hull_polygon
    hull = convex_hull_polygon(pts)
    centers = pixel_centers(bb)
    expect = np.array([point_in_polygon(x, y, hull) for x, y in centers]).reshape(f.valid.shape)
    np.testing.assert_array_equal(f.valid, expect)


@given(st.integers(0, 2 ** 31), st.integers(3, 25))
def test_sparse_to_dense_properties(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 30, (n, 2))
    if np.linalg.svd(pts - pts.mean(0), compute_uv=False)[-1] < 1e-3:
        return
    vals = rng.normal(size=(n, 2))
    from denseuv.shapes import PiecewiseLinearInterpolator
    interp = PiecewiseLinearInterpolator(pts, vals)
    at, inside = interp(pts)
    assert inside.all()
    np.testing.assert_array_equal(at, vals)
    f = sparse_to_dense(pts, vals, bbox_of(pts))
    v = f.values[:, f.valid]
    if v.size == 0:  # thin hull containing no pixel centre
        return
    assert np.all(v.min(axis=1) >= vals.min(axis=0) - 1e-12)
    assert np.all(v.max(axis=1) <= vals.max(axis=0) + 1e-12)


def test_warp_zero_and_shift():
    ident = identity_uv_map((0, 0, 9, 7))
    zero = DisplacementField(np.zeros((2, 8, 10)), np.ones((8, 10), bool), (0, 0, 9, 7))
    out = warp_uv_map(ident, zero)
    np.testing.assert_array_equal(out.uv, ident.uv)
    vals = np.zeros((2, 8, 10))
    vals[0] = 1.0
    out = warp_uv_map(ident, DisplacementField(vals, np.ones((8, 10), bool), (0, 0, 9, 7)))
    step = 2 / 9
    np.testing.assert_allclose(out.uv[0, :, :-1], ident.uv[0, :, :-1] + step, atol=1e-12)
    assert not out.valid[:, -1].any()


def test_warp_shape_mismatch():
    with pytest.raises(ValueError):
        DisplacementField(np.zeros((2, 3, 3)), np.ones((4, 3), bool), (0, 0, 2, 2))


# ---- ground-truth uv-maps ---------------------------------------------------

def test_gt_uvmap_of_template_is_identity(small_template):
    maps = generate_gt_uvmap(small_template.landmarks, small_template)
    m = maps["shape"]
    ident = identity_uv_map(small_template.bboxes["shape"])
    assert m.bbox == small_template.bboxes["shape"]
    np.testing.assert_allclose(m.uv[:, m.valid], ident.uv[:, m.valid], atol=1e-9)


def test_gt_uvmap_absorbs_similarity(small_template):
    tf = SimilarityTransform.from_params(0.2, 1.1, (3.0, -2.0))
    pts = tf.apply(small_template.landmarks["shape"])
    inst = LandmarkSet((("shape", pts),), (64, 64))
    m = generate_gt_uvmap(inst, small_template)["shape"]
    # expected: identity uv of the template box evaluated at tf^-1(p)
    pos = pixel_centers(m.bbox)[m.valid.ravel()]
    from denseuv.shapes import points_to_uv
    expect = points_to_uv(tf.inverse().apply(pos), small_template.bboxes["shape"])
    np.testing.assert_allclose(m.uv[:, m.valid].T, expect, atol=1e-9)


def test_gt_uvmap_valid_is_instance_hull(small_dataset, small_template):
    from denseuv.shapes import convex_hull_polygon
    inst = small_dataset["test"][0].landmarks
    m = generate_gt_uvmap(inst, small_template)["shape"]
    hull = convex_hull_polygon(inst["shape"])
    expect = np.array([point_in_polygon(x, y, hull) for x, y in pixel_centers(m.bbox)]).reshape(m.shape)
    np.testing.assert_array_equal(m.valid, expect)
    assert np.all(np.abs(m.uv[:, m.valid]) <= 1 + 1e-12)


def test_gt_roundtrip_at_landmarks(small_dataset, small_template):
    for inst in small_dataset["test"]:
        uv = gt_uv_at(inst.landmarks, small_template, "shape", inst.landmarks["shape"])
        assert np.abs(uv - small_template.uv["shape"]).max() <= 1e-3


def test_gt_map_interior_sampling_matches_mapping(small_dataset, small_template):
    inst = small_dataset["test"][1].landmarks
    m = generate_gt_uvmap(inst, small_template)["shape"]
    rng = np.random.default_rng(0)
    pts = pixel_centers(m.bbox)[m.valid.ravel()]
    pts = pts[rng.choice(len(pts), 50, replace=False)]
    np.testing.assert_allclose(sample_uv(m, pts), gt_uv_at(inst, small_template, "shape", pts), atol=1e-12)


def test_uvmap_sentinel_and_to_full():
    uv = np.zeros((2, 3, 4))
    valid = np.ones((3, 4), bool)
    valid[0, 0] = False
    m = UvMap(uv, valid, (2, 5, 5, 7))
    assert np.isnan(m.uv[:, 0, 0]).all()
    full, v = m.to_full((10, 10))
    assert v.sum() == 11 and v[5, 3] and not v[5, 2]
