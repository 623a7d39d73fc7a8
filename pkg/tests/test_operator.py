import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpcno.ewald import SpectralKernel, long_range_apply
from mpcno.geometry import (
    CurveFamily,
    GrfSpec,
    PointCloud,
    circle,
    discretize_curve,
    generate_random_curve,
    pad_cloud,
    sample_grf,
)
from mpcno.kernels import KernelKind
from mpcno.operator import (
    LayerParams,
    ModelConfig,
    build_features,
    flatten,
    named_arrays,
    full_spectrum_weights,
    gelu,
    gelu_grad,
    half_spectrum,
    init_layer,
    init_model,
    k_long_apply,
    k_short_apply,
    layer_forward,
    model_backward,
    model_forward,
    n_params,
    spectral_full_complex,
    unflatten,
)
from mpcno.verify import check_permutation


def _cloud(n=128, seed=0):
    rng = np.random.default_rng(seed)
    c = discretize_curve(generate_random_curve(CurveFamily(), rng), n)
    return c, sample_grf(c, GrfSpec(), rng)


def _zero_like(lp):
    return LayerParams(**{k: (None if v is None else np.zeros_like(v)) for k, v in vars(lp).items()})


def test_gelu_matches_finite_difference():
    x = np.linspace(-4, 4, 41)
    h = 1e-6
    assert np.allclose(gelu_grad(x), (gelu(x + h) - gelu(x - h)) / (2 * h), atol=1e-9)
    assert gelu(0.0) == 0.0


@pytest.mark.parametrize("p,d", [(1, 2), (3, 2), (2, 3)])
def test_half_spectrum_covers_full_spectrum(p, d):
    half = half_spectrum(p, d)
    assert len(half) == ((2 * p + 1) ** d + 1) // 2
    keys = {tuple(k) for k in half} | {tuple(-k) for k in half}
    assert len(keys) == (2 * p + 1) ** d


def test_build_features_layout():
    c, a = _cloud(64)
    padded = pad_cloud(c, 80)
    feats, at = build_features(padded, np.concatenate([a, np.zeros((16, 1))]), p=3)
    assert at.shape == (80, 5)
    assert np.all(at[64:] == 0)
    assert np.array_equal(at[:64, 0], a[:, 0])
    assert np.array_equal(at[:64, 1:3], c.points)
    assert np.array_equal(at[:64, 3:5], c.normals)
    assert np.all(feats.geo[64:] == 0) and np.all(feats.weights[64:] == 0)


def test_zero_weights_give_zero_long_range():
    c, _ = _cloud(64)
    feats = build_features(c, p=3)
    lp = _zero_like(init_layer(np.random.default_rng(0), 4, 3, 2))
    f = np.random.default_rng(1).standard_normal((64, 4))
    assert np.all(k_long_apply(lp, feats, f) == 0)


@pytest.mark.parametrize("k0", [(0, 0), (1, -2), (0, 3)])
def test_single_mode_reduces_to_long_range_apply(k0):
    p, d_f = 3, 2
    c, _ = _cloud(96)
    feats = build_features(c, p=p)
    lp = _zero_like(init_layer(np.random.default_rng(0), d_f, p, 2))
    half = half_spectrum(p, 2)
    idx = [i for i, k in enumerate(half) if tuple(k) == k0 or tuple(-k) == k0][0]
    lp.w_re[idx] = np.eye(d_f)
    lp.w1 = np.concatenate([np.eye(d_f), np.zeros((d_f, 2 * d_f))], axis=1)
    lp.w3 = np.eye(d_f)
    f = np.random.default_rng(2).standard_normal((96, d_f))
    coeffs = np.zeros((2 * p + 1, 2 * p + 1, d_f, d_f), complex)
    coeffs[p + k0[0], p + k0[1]] = np.eye(d_f)
    coeffs[p - k0[0], p - k0[1]] = np.eye(d_f)
    sk = SpectralKernel(coeffs, (5.0, 5.0), p, KernelKind.SL2D)
    want = long_range_apply(sk, c, f)
    assert np.max(np.abs(k_long_apply(lp, feats, f) - want)) <= 1e-12 * (1 + np.abs(want).max())


def test_volume_layer_matches_long_range_apply_with_random_weights():
    p, d_f = 3, 3
    c, _ = _cloud(96, seed=4)
    feats = build_features(c, p=p, mode="volume")
    lp = init_layer(np.random.default_rng(5), d_f, p, 2, mode="volume")
    modes, full = full_spectrum_weights(lp, p, 2)
    coeffs = np.zeros((2 * p + 1, 2 * p + 1, d_f, d_f), complex)
    for k, w in zip(modes, full):
        coeffs[p + k[0], p + k[1]] = w
    sk = SpectralKernel(coeffs, (5.0, 5.0), p, KernelKind.SL2D)
    f = np.random.default_rng(6).standard_normal((96, d_f))
    want = long_range_apply(sk, c, f)
    assert np.max(np.abs(k_long_apply(lp, feats, f) - want)) <= 1e-12 * np.abs(want).max()


def test_output_is_real_under_conjugate_symmetry():
    c, _ = _cloud(96)
    feats = build_features(c, p=4)
    lp = init_layer(np.random.default_rng(1), 4, 4, 2)
    s = np.random.default_rng(2).standard_normal((96, 4))
    out = spectral_full_complex(lp, feats, s, 4, (5.0, 5.0))
    assert np.max(np.abs(out.imag)) <= 1e-12 * np.max(np.abs(out.real))
    lp2 = _zero_like(lp)
    lp2.w_re, lp2.w_im = lp.w_re, lp.w_im
    lp2.w1 = np.concatenate([np.eye(4), np.zeros((4, 8))], axis=1)
    lp2.w3 = np.eye(4)
    assert np.allclose(k_long_apply(lp2, feats, s), out.real, atol=1e-12)


def test_short_range_reductions():
    c, _ = _cloud(64)
    feats = build_features(c, p=2)
    lp = init_layer(np.random.default_rng(0), 3, 2, 2)
    assert np.all(k_short_apply(lp, feats, np.zeros((64, 3))) == 0)
    lp.w_g1 = np.zeros_like(lp.w_g1)
    lp.w_g2 = np.zeros_like(lp.w_g2)
    lp.b = np.arange(3.0)
    f = np.random.default_rng(1).standard_normal((64, 3))
    assert np.allclose(k_short_apply(lp, feats, f), f @ lp.w_l.T + lp.b, atol=1e-15)


def test_flat_segment_normal_feature_is_constant():
    n = 40
    x = np.linspace(1.0, 4.0, n)
    pts = np.stack([x, np.full(n, 2.0)], 1)
    cloud = PointCloud(
        points=pts,
        normals=np.tile([0.0, -1.0], (n, 1)),
        weights=np.full(n, 3.0 / n),
        curvature=np.zeros(n),
        mask=np.ones(n, bool),
        curve_id=np.zeros(n, int),
    )
    feats = build_features(cloud, p=2)
    lp = init_layer(np.random.default_rng(0), 3, 2, 2)
    lp.w_g1 = np.zeros_like(lp.w_g1)
    lp.w_l = np.zeros_like(lp.w_l)
    lp.w_g4 = np.eye(3)
    out = k_short_apply(lp, feats, np.ones((n, 3)))
    assert np.allclose(out, out[0], atol=1e-14)
    assert np.allclose(feats.geo[:, 2:], 0, atol=1e-12)


def test_zero_layer_is_identity_and_linear_mode_is_additive():
    c, _ = _cloud(64)
    feats = build_features(c, p=2)
    f = np.random.default_rng(0).standard_normal((64, 3))
    lp = _zero_like(init_layer(np.random.default_rng(0), 3, 2, 2))
    assert np.array_equal(layer_forward(lp, feats, f), f)
    lp = init_layer(np.random.default_rng(1), 3, 2, 2)
    lin = layer_forward(lp, feats, f, activation=False)
    assert np.allclose(lin, f + k_long_apply(lp, feats, f) + k_short_apply(lp, feats, f), atol=1e-14)


def _on_circle(n, mp, p):
    c = discretize_curve(circle(1.2, (2.5, 2.5)), n)
    theta = 2 * np.pi * (np.arange(n) + 0.5) / n
    feats, at = build_features(c, np.cos(theta) + 0.5 * np.sin(2 * theta), p=p)
    return theta, model_forward(mp, feats, at, record=False)[0][:, 0]


def test_refinement_converges():
    mp = init_model(ModelConfig(d_f=6, n_layers=2, p=3), seed=3)
    t_ref, u_ref = _on_circle(2048, mp, 3)
    errs = []
    for n in (128, 256, 512):
        t, u = _on_circle(n, mp, 3)
        ref = np.interp(t, t_ref, u_ref, period=2 * np.pi)
        errs.append(np.max(np.abs(u - ref)))
    assert errs[0] > errs[1] > errs[2]
    assert errs[0] / errs[1] > 1.6 and errs[1] / errs[2] > 1.6


def test_zero_model_outputs_projection_bias():
    mp = init_model(ModelConfig(d_f=4, n_layers=1, p=2, d_u=2), seed=0)
    for name in ("lift_w", "lift_b"):
        setattr(mp, name, np.zeros_like(getattr(mp, name)))
    mp.layers = [_zero_like(mp.layers[0])]
    mp.proj_b1 = np.array([0.3, -0.2, 0.1, 1.0])
    mp.proj_b2 = np.array([0.5, -0.5])
    c, a = _cloud(64)
    feats, at = build_features(c, a, p=2)
    u, _ = model_forward(mp, feats, at)
    assert np.allclose(u, mp.proj_w2 @ gelu(mp.proj_b1) + mp.proj_b2, atol=1e-15)


def test_forward_is_reproducible():
    mp = init_model(ModelConfig(d_f=4, n_layers=2, p=3), seed=1)
    c, a = _cloud(64)
    feats, at = build_features(c, a, p=3)
    u1, tape = model_forward(mp, feats, at)
    u2, _ = model_forward(mp, feats, at)
    assert np.array_equal(u1, u2)
    model_backward(mp, feats, tape, np.ones_like(u1))
    assert np.array_equal(model_forward(mp, feats, at)[0], u1)


def test_flatten_roundtrip():
    mp = init_model(ModelConfig(d_f=4, n_layers=2, p=2), seed=2)
    v = flatten(mp)
    assert v.size == n_params(mp)
    assert np.array_equal(flatten(unflatten(mp, v)), v)
    with pytest.raises(ValueError):
        unflatten(mp, v[:-1])


def _loss_and_grad(mp, feats, at, g):
    u, tape = model_forward(mp, feats, at)
    return float(np.sum(u * g)), flatten(model_backward(mp, feats, tape, g))


@pytest.mark.parametrize("mode", ["boundary", "volume"])
def test_gradients_match_finite_differences(mode):
    mp = init_model(ModelConfig(d_f=16, n_layers=2, p=4, d_u=2, mode=mode), seed=7)
    c, a = _cloud(96, seed=1)
    feats, at = build_features(pad_cloud(c, 100), np.concatenate([a, np.zeros((4, 1))]), p=4, mode=mode)
    g = np.random.default_rng(8).standard_normal((100, 2))
    _, grad = _loss_and_grad(mp, feats, at, g)
    theta = flatten(mp)
    rng = np.random.default_rng(9)
    # one entry from every parameter block, then random entries up to 50
    starts, pos = [], 0
    for _, arr in named_arrays(mp):
        starts.append((pos, arr.size))
        pos += arr.size
    idx = {int(s + rng.integers(size)) for s, size in starts}
    while len(idx) < 50:
        idx.add(int(rng.integers(theta.size)))
    h = 1e-6
    worst = 0.0
    for i in sorted(idx):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        fd = (_loss_and_grad(unflatten(mp, tp), feats, at, g)[0] - _loss_and_grad(unflatten(mp, tm), feats, at, g)[0]) / (2 * h)
        # floor well above the difference quotient's rounding level eps |L| / h
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-6))
    assert worst <= 1e-5


def test_backward_is_linear_and_masks_unused_blocks():
    mp = init_model(ModelConfig(d_f=4, n_layers=2, p=3, d_u=2), seed=0)
    c, a = _cloud(64)
    feats, at = build_features(pad_cloud(c, 70), np.concatenate([a, np.zeros((6, 1))]), p=3)
    u, tape = model_forward(mp, feats, at)
    g = np.random.default_rng(0).standard_normal(u.shape)
    g[:, 1] = 0.0
    base = flatten(model_backward(mp, feats, tape, g))
    scaled = flatten(model_backward(mp, feats, tape, 2.5 * g))
    assert np.max(np.abs(scaled - 2.5 * base)) <= 1e-13 * np.max(np.abs(base))
    grads = model_backward(mp, feats, tape, g)
    assert np.all(grads.proj_w2[1] == 0) and grads.proj_b2[1] == 0
    # padded rows never feed the gradient
    g2 = g.copy()
    g2[64:] = 1e3
    assert np.array_equal(flatten(model_backward(mp, feats, tape, g2)), base)
    assert np.all(u[64:] == 0)
    for lg in grads.layers:
        assert np.all(lg.w_im[0] == 0)


@given(st.integers(0, 10_000))
def test_permutation_equivariance_property(seed):
    assert check_permutation(seed=seed, n=64).passed
