"""Multiscale point-cloud neural operator with hand-written reverse-mode gradients.

A layer maps features f (N, d_f) to f + GeLU(K_long f + K_short f):

* K_long is a factorized Fourier-mode integral over the cloud,
  W3 h + W2 [h; h (x) n_x] with
  h(x) = sum_k e^{i w_k.x} W_k sum_j e^{-i w_k.y_j} W1 [f; f (x) n_y]_j w_j
  and w_k = pi k / l on the periodic box of half-lengths l.
* K_short is a local rule, W_l f + b + W_g1 SoftSign(grad f)
  + W_g2 (SoftSign(W_g3 [n; grad n]) * W_g4 f).

Mode weights are stored on a half spectrum. The mirrored modes carry the
conjugate weights, so the sum over all of [-p, p]^d is twice the real part of
the half sum (the k = 0 term counted once).
"""

import itertools
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import special

from .geometry import (
    apply_gradient,
    build_neighbor_lists,
    default_stencil_size,
    gradient_operator,
    softsign,
    softsign_grad,
)

SQRT2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2 * np.pi)


def gelu(x):
    return 0.5 * x * (1.0 + special.erf(x / SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + special.erf(x / SQRT2)) + x * INV_SQRT_2PI * np.exp(-0.5 * x * x)


def half_spectrum(p, d):
    """Modes k in [-p, p]^d whose first nonzero entry is positive, preceded by k = 0."""
    modes = [np.zeros(d, int)]
    for k in itertools.product(range(-p, p + 1), repeat=d):
        k = np.array(k)
        nz = np.flatnonzero(k)
        if len(nz) and k[nz[0]] > 0:
            modes.append(k)
    return np.array(modes)


def full_spectrum(p, d):
    return np.array(list(itertools.product(range(-p, p + 1), repeat=d)))


@dataclass
class LayerParams:
    w_re: np.ndarray
    w_im: np.ndarray
    w_l: np.ndarray
    b: np.ndarray
    w1: np.ndarray = None
    w2: np.ndarray = None
    w3: np.ndarray = None
    w_g1: np.ndarray = None
    w_g2: np.ndarray = None
    w_g3: np.ndarray = None
    w_g4: np.ndarray = None

    def fourier_weights(self):
        w = self.w_re + 1j * self.w_im
        w[0] = self.w_re[0]
        return w


@dataclass
class ModelParams:
    lift_w: np.ndarray
    lift_b: np.ndarray
    layers: list
    proj_w1: np.ndarray
    proj_b1: np.ndarray
    proj_w2: np.ndarray
    proj_b2: np.ndarray
    p: int
    box: tuple
    mode: str = "boundary"

    @property
    def d_f(self):
        return self.lift_w.shape[0]

    @property
    def dim(self):
        return len(self.box)

    @property
    def d_a(self):
        extra = 2 * self.dim if self.mode == "boundary" else self.dim
        return self.lift_w.shape[1] - extra

    @property
    def d_u(self):
        return self.proj_w2.shape[0]


@dataclass
class ModelConfig:
    d_a: int = 1
    d_u: int = 1
    d_f: int = 16
    n_layers: int = 2
    p: int = 8
    box: tuple = (5.0, 5.0)
    mode: str = "boundary"
    proj_width: int = None


def init_layer(rng, d_f, p, d, mode="boundary"):
    n_modes = len(half_spectrum(p, d))
    s_f = np.sqrt(1.0 / ((2 * p + 1) ** d * d_f))
    mat = lambda o, i: rng.standard_normal((o, i)) * np.sqrt(1.0 / i)
    w_re = rng.standard_normal((n_modes, d_f, d_f)) * s_f
    w_im = rng.standard_normal((n_modes, d_f, d_f)) * s_f
    w_im[0] = 0.0
    lp = LayerParams(w_re=w_re, w_im=w_im, w_l=mat(d_f, d_f), b=np.zeros(d_f))
    if mode == "boundary":
        lp.w1 = mat(d_f, d_f * (d + 1))
        lp.w2 = mat(d_f, d_f * (d + 1))
        lp.w3 = mat(d_f, d_f)
        lp.w_g1 = mat(d_f, d_f * d)
        lp.w_g2 = mat(d_f, d_f)
        lp.w_g3 = mat(d_f, d * d + d)
        lp.w_g4 = mat(d_f, d_f)
    return lp


def init_model(cfg, seed=0):
    rng = np.random.default_rng(seed)
    d = len(cfg.box)
    n_in = cfg.d_a + (2 * d if cfg.mode == "boundary" else d)
    width = cfg.proj_width or cfg.d_f
    mat = lambda o, i: rng.standard_normal((o, i)) * np.sqrt(1.0 / i)
    lift_w = mat(cfg.d_f, n_in)
    layers = [init_layer(rng, cfg.d_f, cfg.p, d, cfg.mode) for _ in range(cfg.n_layers)]
    return ModelParams(
        lift_w=lift_w,
        lift_b=np.zeros(cfg.d_f),
        layers=layers,
        proj_w1=mat(width, cfg.d_f),
        proj_b1=np.zeros(width),
        proj_w2=mat(cfg.d_u, width),
        proj_b2=np.zeros(cfg.d_u),
        p=cfg.p,
        box=tuple(float(b) for b in cfg.box),
        mode=cfg.mode,
    )


# ----------------------------------------------------------------------------- features


@dataclass
class CloudFeatures:
    """Per-cloud quantities shared by every layer."""

    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    mask: np.ndarray
    axis_exp: list
    modes: np.ndarray
    mult: np.ndarray
    grad_ops: list = None
    geo: np.ndarray = None

    @property
    def n(self):
        return self.points.shape[0]

    def exponentials(self):
        """(N, H) matrix of e^{i w_k . x} over the half spectrum."""
        e = self.axis_exp[0][:, self.modes[:, 0]]
        for a in range(1, len(self.axis_exp)):
            e = e * self.axis_exp[a][:, self.modes[:, a]]
        return e


def build_features(cloud, a=None, p=8, box=(5.0, 5.0), mode="boundary"):
    """Precompute exponentials, gradient stencils and normal features for ``cloud``.

    If ``a`` is given, also returns the lifted input [a, x, n] (zero on padding).
    """
    d = cloud.dim
    mask = cloud.mask.astype(float)
    k = np.arange(-p, p + 1)
    axis_exp = [np.exp(1j * np.outer(cloud.points[:, i], np.pi * k / box[i])) for i in range(d)]
    modes = half_spectrum(p, d) + p
    mult = np.full(len(modes), 2.0)
    mult[0] = 1.0
    feats = CloudFeatures(
        points=cloud.points * mask[:, None],
        normals=cloud.normals * mask[:, None],
        weights=cloud.weights * mask,
        mask=mask,
        axis_exp=axis_exp,
        modes=modes,
        mult=mult,
    )
    if mode == "boundary":
        c = cloud if cloud.neighbors is not None else build_neighbor_lists(cloud, default_stencil_size(d))
        ops = gradient_operator(c)
        grad_n = apply_gradient(ops, cloud.normals).reshape(cloud.n, d * d)
        feats.grad_ops = ops
        feats.geo = np.concatenate([cloud.normals, grad_n], axis=1) * mask[:, None]
    if a is None:
        return feats
    return feats, input_features(feats, a, mode)


def input_features(feats, a, mode="boundary"):
    a = np.asarray(a, float)
    if a.ndim == 1:
        a = a[:, None]
    parts = [a, feats.points] + ([feats.normals] if mode == "boundary" else [])
    return np.concatenate(parts, axis=1) * feats.mask[:, None]


def _outer_n(f, n):
    return (f[:, :, None] * n[:, None, :]).reshape(f.shape[0], -1)


def _contract_n(g, n):
    d = n.shape[1]
    return np.einsum("icd,id->ic", g.reshape(g.shape[0], -1, d), n)


# ----------------------------------------------------------------------------- layer pieces


def spectral_forward(weights, e, mult, s, w):
    """h = Re(E (mult * W_k F_k)) with F_k = sum_j conj(E_jk) s_j w_j."""
    fh = e.conj().T @ (s * w[:, None])
    hh = np.einsum("hab,hb->ha", weights, fh)
    h = (e @ (mult[:, None] * hh)).real
    return h, fh


def spectral_backward(weights, e, mult, w, fh, gh):
    ghh = mult[:, None] * (e.conj().T @ gh)
    gw = ghh[:, :, None] * fh.conj()[:, None, :]
    gfh = np.einsum("hab,ha->hb", weights.conj(), ghh)
    gs = w[:, None] * (e @ gfh).real
    return gw, gs


def k_long_apply(lp, feats, f, e=None, tape=None):
    """Long-range part of a layer; returns (N, d_f)."""
    e = feats.exponentials() if e is None else e
    weights = lp.fourier_weights()
    if lp.w1 is None:
        h, fh = spectral_forward(weights, e, feats.mult, f, feats.weights)
        if tape is not None:
            tape.update(fh=fh, h=h)
        return h
    n = feats.normals
    gin = np.concatenate([f, _outer_n(f, n)], axis=1)
    s = gin @ lp.w1.T
    h, fh = spectral_forward(weights, e, feats.mult, s, feats.weights)
    hin = np.concatenate([h, _outer_n(h, n)], axis=1)
    out = h @ lp.w3.T + hin @ lp.w2.T
    if tape is not None:
        tape.update(gin=gin, fh=fh, h=h, hin=hin)
    return out


def k_short_apply(lp, feats, f, tape=None):
    """Local part of a layer; returns (N, d_f)."""
    out = f @ lp.w_l.T + lp.b
    if lp.w_g1 is None:
        return out
    gflat = apply_gradient(feats.grad_ops, f).reshape(f.shape[0], -1)
    sg = softsign(gflat)
    gz = feats.geo @ lp.w_g3.T
    sgz = softsign(gz)
    q = f @ lp.w_g4.T
    prod = sgz * q
    out = out + sg @ lp.w_g1.T + prod @ lp.w_g2.T
    if tape is not None:
        tape.update(gflat=gflat, sg=sg, gz=gz, sgz=sgz, q=q, prod=prod)
    return out


def layer_forward(lp, feats, f, activation=True, tape=None, e=None):
    """f + GeLU(K_long f + K_short f), or f + K_long f + K_short f when activation is False."""
    z = k_long_apply(lp, feats, f, e, tape) + k_short_apply(lp, feats, f, tape)
    out = f + (gelu(z) if activation else z)
    if tape is not None:
        tape.update(f=f, z=z, activation=activation)
    return out * feats.mask[:, None]


def layer_backward(lp, feats, tape, gout, e):
    """Gradients of a layer given d loss / d output; returns (LayerParams of grads, d loss / d f)."""
    gout = gout * feats.mask[:, None]
    f = tape["f"]
    gz = gout * gelu_grad(tape["z"]) if tape["activation"] else gout
    gf = gout.copy()
    g = LayerParams(w_re=None, w_im=None, w_l=gz.T @ f, b=gz.sum(axis=0))
    gf += gz @ lp.w_l
    weights = lp.fourier_weights()
    if lp.w1 is None:
        gw, gs = spectral_backward(weights, e, feats.mult, feats.weights, tape["fh"], gz)
        gf += gs
    else:
        n = feats.normals
        g.w_g1 = gz.T @ tape["sg"]
        gsg = gz @ lp.w_g1
        ggrad = (gsg * softsign_grad(tape["gflat"])).reshape(f.shape[0], f.shape[1], -1)
        for a, op in enumerate(feats.grad_ops):
            gf += op.T @ ggrad[:, :, a]
        g.w_g2 = gz.T @ tape["prod"]
        gprod = gz @ lp.w_g2
        gq = gprod * tape["sgz"]
        ggz = gprod * tape["q"] * softsign_grad(tape["gz"])
        g.w_g3 = ggz.T @ feats.geo
        g.w_g4 = gq.T @ f
        gf += gq @ lp.w_g4
        g.w3 = gz.T @ tape["h"]
        g.w2 = gz.T @ tape["hin"]
        ghin = gz @ lp.w2
        d_f = f.shape[1]
        gh = gz @ lp.w3 + ghin[:, :d_f] + _contract_n(ghin[:, d_f:], n)
        gw, gs = spectral_backward(weights, e, feats.mult, feats.weights, tape["fh"], gh)
        g.w1 = gs.T @ tape["gin"]
        ggin = gs @ lp.w1
        gf += ggin[:, :d_f] + _contract_n(ggin[:, d_f:], n)
    g.w_re = gw.real
    g.w_im = gw.imag
    g.w_im[0] = 0.0
    return g, gf


# ----------------------------------------------------------------------------- model


def model_forward(mp, feats, a_tilde, record=True):
    """Lift, apply the layers, project. Returns (u, tape); u has shape (N, d_u)."""
    mask = feats.mask[:, None]
    e = feats.exponentials()
    z0 = a_tilde @ mp.lift_w.T + mp.lift_b
    f = gelu(z0) * mask
    tapes = []
    for lp in mp.layers:
        t = {} if record else None
        f = layer_forward(lp, feats, f, tape=t, e=e)
        tapes.append(t)
    y1 = f @ mp.proj_w1.T + mp.proj_b1
    a1 = gelu(y1)
    u = (a1 @ mp.proj_w2.T + mp.proj_b2) * mask
    tape = {"a_tilde": a_tilde, "z0": z0, "layers": tapes, "f_last": f, "y1": y1, "a1": a1, "e": e}
    return u, tape


def model_backward(mp, feats, tape, gu):
    """Reverse pass; returns a ModelParams holding d loss / d parameter."""
    mask = feats.mask[:, None]
    gu = gu * mask
    g_pw2 = gu.T @ tape["a1"]
    g_pb2 = gu.sum(axis=0)
    ga1 = gu @ mp.proj_w2
    gy1 = ga1 * gelu_grad(tape["y1"])
    g_pw1 = gy1.T @ tape["f_last"]
    g_pb1 = gy1.sum(axis=0)
    gf = gy1 @ mp.proj_w1
    glayers = [None] * len(mp.layers)
    for i in reversed(range(len(mp.layers))):
        glayers[i], gf = layer_backward(mp.layers[i], feats, tape["layers"][i], gf, tape["e"])
    gz0 = gf * mask * gelu_grad(tape["z0"])
    return ModelParams(
        lift_w=gz0.T @ tape["a_tilde"],
        lift_b=gz0.sum(axis=0),
        layers=glayers,
        proj_w1=g_pw1,
        proj_b1=g_pb1,
        proj_w2=g_pw2,
        proj_b2=g_pb2,
        p=mp.p,
        box=mp.box,
        mode=mp.mode,
    )


# ----------------------------------------------------------------------------- flat views

LAYER_FIELDS = [f.name for f in fields(LayerParams)]
TOP_FIELDS = ["lift_w", "lift_b", "proj_w1", "proj_b1", "proj_w2", "proj_b2"]


def named_arrays(mp):
    """Ordered (name, array) pairs of every parameter."""
    out = [(name, getattr(mp, name)) for name in TOP_FIELDS]
    for i, lp in enumerate(mp.layers):
        for name in LAYER_FIELDS:
            arr = getattr(lp, name)
            if arr is not None:
                out.append((f"layers.{i}.{name}", arr))
    return out


def flatten(mp):
    return np.concatenate([np.ravel(a) for _, a in named_arrays(mp)])


def unflatten(template, vec):
    """Copy of ``template`` with parameters read from the flat vector ``vec``."""
    vec = np.asarray(vec, float)
    pos = 0

    def take(arr):
        nonlocal pos
        out = vec[pos : pos + arr.size].reshape(arr.shape).copy()
        pos += arr.size
        return out

    top = {name: take(getattr(template, name)) for name in TOP_FIELDS}
    layers = []
    for lp in template.layers:
        kw = {name: (take(getattr(lp, name)) if getattr(lp, name) is not None else None) for name in LAYER_FIELDS}
        layers.append(LayerParams(**kw))
    if pos != vec.size:
        raise ValueError(f"parameter vector has {vec.size} entries, model needs {pos}")
    return ModelParams(layers=layers, p=template.p, box=template.box, mode=template.mode, **top)


def n_params(mp):
    return sum(a.size for _, a in named_arrays(mp))


# ----------------------------------------------------------------------------- linear single layer


@dataclass
class LinearModel:
    """Single layer without activation, unfactorized so it is linear in its parameters.

    Output channel a is ``features @ theta[a]`` where the features are the
    Fourier-mode responses of [f; f (x) n_y] (times n_x components for kernels
    that need the target normal) followed by the local terms f, grad f,
    [n; grad n] (x) f and a constant.
    """

    kind: str
    p: int
    box: tuple
    theta: np.ndarray
    needs_ny: bool = False
    needs_nx: bool = False
    lam: float = 0.0

    @property
    def d_u(self):
        return self.theta.shape[0]


def linear_features(feats, f, p, needs_ny=False, needs_nx=False):
    """(N, n_features) design block for one cloud and input f (N, d_f)."""
    f = np.asarray(f, float)
    if f.ndim == 1:
        f = f[:, None]
    n = feats.normals
    s = np.concatenate([f, _outer_n(f, n)], axis=1) if needs_ny else f
    e = feats.exponentials()
    fh = e.conj().T @ (s * feats.weights[:, None])
    resp = e[:, :, None] * (feats.mult[:, None] * fh)[None]
    re = resp.real.reshape(f.shape[0], -1)
    im = -resp.imag[:, 1:, :].reshape(f.shape[0], -1)
    long_cols = np.concatenate([re, im], axis=1)
    targets = [long_cols] + ([long_cols * n[:, a : a + 1] for a in range(n.shape[1])] if needs_nx else [])
    grad = apply_gradient(feats.grad_ops, f).reshape(f.shape[0], -1)
    geo_f = _outer_n(f, feats.geo)
    short = [f, grad, geo_f, np.ones((f.shape[0], 1))]
    return np.concatenate(targets + short, axis=1) * feats.mask[:, None]


def linear_forward(lm, feats, f):
    x = linear_features(feats, f, lm.p, lm.needs_ny, lm.needs_nx)
    return x @ lm.theta.T


def full_spectrum_weights(lp, p, d):
    """Weights on every mode of [-p, p]^d, mirroring the stored half as conjugates."""
    half = half_spectrum(p, d)
    w = lp.fourier_weights()
    full = {tuple(k): w[i] for i, k in enumerate(half)}
    full.update({tuple(-k): w[i].conj() for i, k in enumerate(half[1:], start=1)})
    modes = full_spectrum(p, d)
    return modes, np.stack([full[tuple(k)] for k in modes])


def spectral_full_complex(lp, feats, s, p, box):
    """Unreduced complex sum over all modes of e^{i w.x} W_k F_k(s); for verification."""
    modes, weights = full_spectrum_weights(lp, p, len(box))
    omega = np.pi * modes / np.asarray(box)
    e = np.exp(1j * feats.points @ omega.T)
    fh = e.conj().T @ (s * feats.weights[:, None])
    return e @ np.einsum("hab,hb->ha", weights, fh)
