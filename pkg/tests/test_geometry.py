import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpcno.geometry import (
    CurveFamily,
    GeometryError,
    GrfSpec,
    arclength_parameter,
    build_neighbor_lists,
    circle,
    discretize_curve,
    generate_random_curve,
    gradient_operator,
    make_two_curve_cloud,
    pad_cloud,
    sample_grf,
    softsign,
    softsign_grad,
    tangential_gradient,
)

seeds = st.integers(0, 2**31 - 1)


def test_same_seed_same_curve():
    a = generate_random_curve(CurveFamily(), np.random.default_rng(7))
    b = generate_random_curve(CurveFamily(), np.random.default_rng(7))
    assert a.radius == b.radius
    assert np.array_equal(a.cos_coeffs, b.cos_coeffs) and np.array_equal(a.sin_coeffs, b.sin_coeffs)
    assert np.array_equal(a.center, b.center)


@given(seeds)
def test_curve_fits_box_with_margin(seed):
    fam = CurveFamily()
    curve = generate_random_curve(fam, np.random.default_rng(seed))
    pos, _, _ = curve.evaluate(np.linspace(0, 2 * np.pi, 2000))
    assert pos.min() >= fam.margin - 1e-12
    assert pos.max() <= fam.box[0] - fam.margin + 1e-12
    assert np.all(curve.radial(np.linspace(0, 2 * np.pi, 2000)) > 0)


def test_impossible_family_raises():
    fam = CurveFamily(radius_range=(3.0, 3.5), max_retries=5)
    with pytest.raises(GeometryError):
        generate_random_curve(fam, np.random.default_rng(0))


def test_too_few_points():
    with pytest.raises(GeometryError):
        discretize_curve(circle(), 8)


def test_circle_perimeter_converges_quadratically():
    errs = [abs(discretize_curve(circle(1.0), n).weights.sum() - 2 * np.pi) for n in (64, 128, 256)]
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.01)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.01)


@given(seeds)
def test_random_curve_perimeter_richardson(seed):
    curve = generate_random_curve(CurveFamily(), np.random.default_rng(seed))
    l1, l2, l4 = (discretize_curve(curve, n).weights.sum() for n in (128, 256, 512))
    assert abs(l2 - l4) < 0.3 * abs(l1 - l2) + 1e-12


def test_circle_normals_outward_and_curvature(unit_circle):
    c = unit_circle
    radial = c.points / np.linalg.norm(c.points, axis=1, keepdims=True)
    assert np.allclose(c.normals, radial, atol=1e-12)
    assert np.allclose(c.curvature, 1.0)
    # counterclockwise: tangent (-n_y, n_x) points along increasing angle
    ang = np.unwrap(np.arctan2(c.points[:, 1], c.points[:, 0]))
    assert np.all(np.diff(ang) > 0)


@given(seeds)
def test_discrete_divergence_of_constants(seed):
    c = discretize_curve(generate_random_curve(CurveFamily(), np.random.default_rng(seed)), 512)
    total = np.sum(c.weights[:, None] * c.panel_normals(), axis=0)
    assert np.linalg.norm(total) <= 1e-6 * c.weights.sum()


def test_two_curve_cloud_components_and_gap():
    rng = np.random.default_rng(3)
    c = make_two_curve_cloud(128, rng)
    assert set(np.unique(c.curve_id)) == {0, 1}
    a = c.points[c.curve_id == 0]
    b = c.points[c.curve_id == 1]
    d = np.min(np.linalg.norm(a[:, None] - b[None], axis=2))
    assert d > 0.1
    nb = build_neighbor_lists(c, 6).neighbors
    assert np.all(c.curve_id[nb] == c.curve_id[:, None])


def test_unit_circles_two_apart_touch():
    from mpcno.geometry import concatenate_clouds

    c = concatenate_clouds([discretize_curve(circle(1.0, (1.5, 2.5)), 256), discretize_curve(circle(1.0, (3.5, 2.5)), 256)])
    a = c.points[c.curve_id == 0]
    b = c.points[c.curve_id == 1]
    assert np.min(np.linalg.norm(a[:, None] - b[None], axis=2)) == pytest.approx(0.0, abs=1e-3)


def test_pad_cloud_marks_padding(random_cloud):
    p = pad_cloud(random_cloud, 300)
    assert p.n == 300 and p.n_active == random_cloud.n
    assert np.all(p.weights[~p.mask] == 0) and np.all(p.curve_id[~p.mask] == -1)
    with pytest.raises(GeometryError):
        pad_cloud(random_cloud, 10)


def test_neighbor_lists_skip_padding(random_cloud):
    p = build_neighbor_lists(pad_cloud(random_cloud, 300), 6)
    assert np.all(p.neighbors[~p.mask] == -1)
    assert np.all(p.mask[p.neighbors[p.mask]])
    assert not np.any(p.neighbors[p.mask] == np.flatnonzero(p.mask)[:, None])


def test_gradient_of_linear_function_on_circle():
    c = build_neighbor_lists(discretize_curve(circle(1.0), 256), 6)
    g = tangential_gradient(c, c.points[:, 0])
    tau = np.stack([-c.normals[:, 1], c.normals[:, 0]], 1)
    exact = tau * tau[:, :1]
    assert np.max(np.abs(g - exact)) < 1e-3
    assert np.max(np.abs(np.sum(g * c.normals, axis=1))) < 1e-12


def test_gradient_converges_with_resolution():
    errs = []
    for n in (128, 256, 512):
        c = build_neighbor_lists(discretize_curve(circle(1.0), n), 6)
        theta = np.arctan2(c.points[:, 1], c.points[:, 0])
        g = tangential_gradient(c, np.sin(3 * theta))
        tau = np.stack([-np.sin(theta), np.cos(theta)], 1)
        errs.append(np.max(np.abs(g - 3 * np.cos(3 * theta)[:, None] * tau)))
    assert errs[0] > 3 * errs[1] > 9 * errs[2] / 1.5


def test_gradient_needs_neighbors(random_cloud):
    with pytest.raises(GeometryError):
        gradient_operator(random_cloud)


@given(st.floats(-1e3, 1e3, allow_nan=False))
def test_softsign_bounds_and_derivative(x):
    assert abs(softsign(x)) < 1
    h = 1e-6 * max(1.0, abs(x))
    if abs(x) > 2 * h:
        fd = (softsign(x + h) - softsign(x - h)) / (2 * h)
        assert fd == pytest.approx(softsign_grad(x), rel=1e-5, abs=1e-12)


def test_grf_deterministic_and_periodic(random_cloud):
    a = sample_grf(random_cloud, GrfSpec(channels=2), np.random.default_rng(5))
    b = sample_grf(random_cloud, GrfSpec(channels=2), np.random.default_rng(5))
    assert np.array_equal(a, b) and a.shape == (random_cloud.n, 2)
    # wrap-around jump is no larger than a typical neighbor difference
    steps = np.abs(np.diff(a[:, 0]))
    assert abs(a[0, 0] - a[-1, 0]) <= 3 * steps.max()


def test_grf_variance_matches_spectrum(unit_circle):
    spec = GrfSpec(n_modes=8, smoothness=1.0)
    rng = np.random.default_rng(0)
    samples = np.stack([sample_grf(unit_circle, spec, rng)[:, 0] for _ in range(2000)])
    k = np.arange(9)
    expected = np.sum((1 + k**2) ** -1.0)
    assert samples.var(axis=0).mean() == pytest.approx(expected, rel=0.05)


def test_arclength_parameter_per_component():
    c = make_two_curve_cloud(64, np.random.default_rng(1))
    s = arclength_parameter(c)
    for cid in (0, 1):
        v = s[c.curve_id == cid]
        assert v.min() > 0 and v.max() < 1 and np.all(np.diff(v) > 0)
