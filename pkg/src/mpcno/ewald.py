"""Smooth/singular splitting of boundary kernels with a truncated Fourier far field.

The kernel is written as kappa = kappa_long + kappa_short with
kappa_long = kappa * rho_delta, rho_delta a Gaussian of standard deviation delta
per coordinate. The long part is represented by its Fourier series on the
periodic box B2 = prod [-l_i, l_i], truncated to |k|_inf <= p, and the short
part is summed directly over pairs closer than eps.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import special
from scipy.spatial import cKDTree

from .geometry import build_neighbor_lists, default_stencil_size, tangential_gradient
from .kernels import KernelKind, kernel_spec, kernel_values, short_range_asymptotic


class EwaldError(ValueError):
    pass


@dataclass(frozen=True)
class EwaldConfig:
    delta: float
    p: int
    eps: float
    box: tuple = (5.0, 5.0)
    grid_n: int = None

    def __post_init__(self):
        if self.p < 1:
            raise EwaldError("p must be at least 1")
        if not 0 < self.delta < min(self.box) / 2:
            raise EwaldError(f"delta={self.delta} must lie in (0, min(l)/2)")
        if self.eps < self.delta:
            raise EwaldError("eps must be at least delta")
        if self.eps > min(self.box):
            raise EwaldError("eps exceeds the box half-length")
        if self.grid_n is not None and self.grid_n < 8 * self.p:
            raise EwaldError("grid_n must be at least 8p")

    @property
    def quadrature_n(self):
        return self.grid_n or 8 * self.p


@dataclass
class SpectralKernel:
    """Fourier coefficients on modes k in [-p, p]^2, array of shape (2p+1, 2p+1, d_u, d_f)."""

    coeffs: np.ndarray
    box: tuple
    p: int
    kind: KernelKind
    delta: float = 0.0

    def frequencies(self):
        k = np.arange(-self.p, self.p + 1)
        return [np.pi * k / l for l in self.box]


def erf_split(r, delta):
    r = np.asarray(r, float)
    if np.any(r <= 0) or delta <= 0:
        raise EwaldError("erf_split needs r > 0 and delta > 0")
    return special.erf(r / delta) / r, special.erfc(r / delta) / r


def base_kind(kind):
    """Normal-free kernel whose Fourier series is used for ``kind``."""
    kind = KernelKind(kind)
    if kind in (KernelKind.DL2D, KernelKind.ADL2D, KernelKind.MDL2D):
        return KernelKind.MDL2D
    if kind in (KernelKind.SL2D, KernelKind.STOKES2D):
        return kind
    raise EwaldError(f"{kind.value}: Fourier coefficients are computed for 2D kernels only")


def _gauss(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1), 0.5 * w


def polar_rect_quadrature(b1, b2, n_ang_panels=4, n_ang=12, n_rad=20, split=None, rad_panel=None, graded=True):
    """Quadrature on [-b1,b1] x [-b2,b2] in polar coordinates about the origin.

    The rectangle is cut into four triangles from the origin to its edges.
    Radial integrals start with a quadratic grading r = R t^2 that absorbs
    logarithmic and 1/r singularities at the origin. ``split`` adds a radial
    breakpoint and ``rad_panel`` caps the radial panel length.
    Returns (points (P, 2), weights (P,), inside_split (P,) bool).
    """
    pc = math.atan2(b2, b1)
    tri = [
        (-pc, pc, lambda c, s: b1 / c),
        (pc, math.pi - pc, lambda c, s: b2 / s),
        (math.pi - pc, math.pi + pc, lambda c, s: -b1 / c),
        (math.pi + pc, 2 * math.pi - pc, lambda c, s: -b2 / s),
    ]
    ta, wa = _gauss(n_ang)
    tr, wr = _gauss(n_rad)
    pts, wts, inside = [], [], []
    for lo, hi, rmax in tri:
        edges = np.linspace(lo, hi, n_ang_panels + 1)
        phi = (edges[:-1, None] + (edges[1:] - edges[:-1])[:, None] * ta).ravel()
        wphi = ((edges[1:] - edges[:-1])[:, None] * wa).ravel()
        c, s = np.cos(phi), np.sin(phi)
        big_r = rmax(c, s)
        for ph_c, ph_s, ph_w, rr in zip(c, s, wphi, big_r):
            segs = [(0.0, rr, True)]
            if split is not None and split < rr:
                segs = [(0.0, split, True), (split, rr, False)]
            for a, b, ins in segs:
                npan = 1 if rad_panel is None else max(1, int(math.ceil((b - a) / rad_panel)))
                br = np.linspace(a, b, npan + 1)
                for q in range(npan):
                    pa, pb = br[q], br[q + 1]
                    if q == 0 and a == 0.0 and graded:
                        r = pb * tr**2
                        w = 2 * pb * tr * wr
                    else:
                        r = pa + (pb - pa) * tr
                        w = (pb - pa) * wr
                    pts.append(np.stack([r * ph_c, r * ph_s], axis=1))
                    wts.append(w * r * ph_w)
                    inside.append(np.full(len(r), ins))
    return np.concatenate(pts), np.concatenate(wts), np.concatenate(inside)


def _kernel_on(kind, pts):
    return kernel_values(kernel_spec(kind), pts)


def _fourier_of_samples(vals, pts, wts, freqs):
    """sum_q w_q vals_q exp(-i omega_k . x_q) over modes; vals (Q, a, b) -> (K1, K2, a, b)."""
    e1 = np.exp(-1j * np.outer(pts[:, 0], freqs[0]))
    e2 = np.exp(-1j * np.outer(pts[:, 1], freqs[1]))
    flat = (vals * wts[:, None, None]).reshape(len(wts), -1)
    return np.einsum("qk,ql,qc->klc", e1, e2, flat, optimize=True).reshape(
        (len(freqs[0]), len(freqs[1])) + vals.shape[1:]
    )


@lru_cache(maxsize=32)
def _raw_coeffs_cached(kind, p, grid_n, box):
    box = tuple(float(b) for b in box)
    k = np.arange(-p, p + 1)
    freqs = [np.pi * k / l for l in box]
    m = 6
    tg, wg = _gauss(m)
    block = 2
    axes = []
    for l in box:
        h = 2 * l / grid_n
        left = -l + h * np.arange(grid_n)
        x = (left[:, None] + h * tg).ravel()
        w = np.tile(h * wg, grid_n)
        cell = np.repeat(np.arange(grid_n) - grid_n // 2, m)
        axes.append((x, w, (cell >= -block) & (cell < block), h))
    (x1, w1, s1, h1), (x2, w2, s2, h2) = axes
    g1, g2 = np.meshgrid(x1, x2, indexing="ij")
    pts = np.stack([g1, g2], axis=-1)
    sing = s1[:, None] & s2[None, :]
    pts_safe = np.where(sing[..., None], 1.0, pts)
    vals = _kernel_on(kind, pts_safe.reshape(-1, 2)).reshape(g1.shape + (-1,))
    vals[sing] = 0.0
    a1 = np.exp(-1j * np.outer(freqs[0], x1)) * w1
    a2 = np.exp(-1j * np.outer(freqs[1], x2)) * w2
    tensor = np.einsum("ki,ijc,lj->klc", a1, vals, a2, optimize=True)
    qp, qw, _ = polar_rect_quadrature(block * h1, block * h2, n_ang_panels=6, n_ang=16, n_rad=24)
    pv = _kernel_on(kind, qp)
    polar = _fourier_of_samples(pv, qp, qw, freqs)
    shape = kernel_values(kernel_spec(kind), np.ones((1, 2))).shape[1:]
    out = tensor.reshape((2 * p + 1, 2 * p + 1) + shape) + polar
    out /= 4 * box[0] * box[1]
    out.setflags(write=False)
    return out


def kernel_fourier_coeffs(kind, p, grid_n=None, box=(5.0, 5.0)):
    """Fourier coefficients of the periodized kernel on B2, normalized by |B2|.

    With these coefficients kappa(x) ~ sum_k c_k exp(i pi k.x / l). Cells touching
    the origin are integrated in polar coordinates; the rest of the box uses a
    tensor Gauss rule with 6 nodes per cell and ``grid_n`` cells per axis.
    """
    kind = base_kind(kind)
    grid_n = grid_n or 8 * p
    if grid_n < 8 * p:
        raise EwaldError(f"grid_n={grid_n} too coarse for p={p}; need at least {8 * p}")
    if grid_n % 2:
        grid_n += 1
    coeffs = _raw_coeffs_cached(kind, int(p), int(grid_n), tuple(float(b) for b in box))
    return SpectralKernel(coeffs, tuple(box), int(p), kind, 0.0)


def mollify(sk, delta):
    """Gaussian damping exp(-delta^2 |omega|^2 / 2) of every mode, omega = pi k / l."""
    f1, f2 = sk.frequencies()
    damp = np.exp(-0.5 * delta**2 * (f1[:, None] ** 2 + f2[None, :] ** 2))
    return SpectralKernel(sk.coeffs * damp[:, :, None, None], sk.box, sk.p, sk.kind, float(delta))


def truncate(sk, p):
    if p > sk.p:
        raise EwaldError("cannot truncate to more modes than available")
    c = sk.p - p
    sl = slice(c, c + 2 * p + 1)
    return SpectralKernel(sk.coeffs[sl, sl], sk.box, p, sk.kind, sk.delta)


def spectral_values(sk, r):
    """Real part of sum_k c_k exp(i omega_k . r) at displacements r (P, 2); (P, d_u, d_f)."""
    r = np.asarray(r, float).reshape(-1, 2)
    f1, f2 = sk.frequencies()
    e1 = np.exp(1j * np.outer(r[:, 0], f1))
    e2 = np.exp(1j * np.outer(r[:, 1], f2))
    k1, k2 = sk.coeffs.shape[:2]
    tail = sk.coeffs.shape[2:]
    t = (e1 @ sk.coeffs.reshape(k1, -1)).reshape(len(r), k2, -1)
    return np.einsum("pl,plc->pc", e2, t).real.reshape((len(r),) + tail)


def _check_box(sk, cloud):
    pts = cloud.points[cloud.mask]
    span = pts.max(axis=0) - pts.min(axis=0)
    if np.any(span > np.asarray(sk.box)):
        raise EwaldError("cloud does not fit in the periodic box")


def long_range_apply(sk, cloud, f, weights=None):
    """u_i = sum_k e^{i w_k x_i} c_k sum_j e^{-i w_k y_j} f_j w_j, real part; f (N, d_f)."""
    f = np.asarray(f, float)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] != cloud.n or f.shape[1] != sk.coeffs.shape[3]:
        raise EwaldError(f"f has shape {f.shape}, expected ({cloud.n}, {sk.coeffs.shape[3]})")
    _check_box(sk, cloud)
    w = cloud.weights * cloud.mask if weights is None else weights
    f1, f2 = sk.frequencies()
    e1 = np.exp(1j * np.outer(cloud.points[:, 0], f1))
    e2 = np.exp(1j * np.outer(cloud.points[:, 1], f2))
    fw = f * w[:, None]
    fhat = np.einsum("jk,jl,jc->klc", e1.conj(), e2.conj(), fw, optimize=True)
    ghat = np.einsum("klab,klb->kla", sk.coeffs, fhat)
    u = np.einsum("ik,il,kla->ia", e1, e2, ghat, optimize=True).real
    return u * cloud.mask[:, None]


def near_pairs(cloud, eps):
    """Index pairs (i, j), i != j, of active points within distance eps."""
    act = np.flatnonzero(cloud.mask)
    tree = cKDTree(cloud.points[act])
    pairs = tree.query_pairs(eps, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros((0, 2), int)
    i, j = act[pairs[:, 0]], act[pairs[:, 1]]
    return np.concatenate([np.stack([i, j], 1), np.stack([j, i], 1)])


def _long_matrix(kind, base_vals, n_x, n_y):
    """Adapt normal-free long-range values (P, a, b) to ``kind``; returns (P, d_u, d_f)."""
    if kind == KernelKind.DL2D:
        return np.einsum("pa,pa->p", base_vals[:, :, 0], n_y)[:, None, None]
    if kind == KernelKind.ADL2D:
        return -np.einsum("pa,pa->p", base_vals[:, :, 0], n_x)[:, None, None]
    return base_vals


def _needs_gradient(kind):
    return KernelKind(kind) == KernelKind.MDL2D


def short_range_residual_apply(kind, sk_long, cloud, f, eps, grad_f=None, stats=None):
    """Near-field correction: exact kernel minus smooth part over pairs within eps, plus a self term.

    The self term integrates the exact kernel over the point's own panel
    (half-width w_i/2) with the leading-order local rule and removes the smooth
    part's self contribution kappa_long(0) f_i w_i.
    """
    spec = kernel_spec(kind)
    if eps > min(sk_long.box):
        raise EwaldError("eps exceeds the box half-length")
    f = np.asarray(f, float).reshape(cloud.n, spec.d_f)
    w = cloud.weights * cloud.mask
    out = np.zeros((cloud.n, spec.d_u))
    pairs = near_pairs(cloud, eps)
    if stats is not None:
        stats["pairs"] = len(pairs)
    if len(pairs):
        i, j = pairs[:, 0], pairs[:, 1]
        r = cloud.points[i] - cloud.points[j]
        exact = kernel_values(spec, r, cloud.normals[i], cloud.normals[j])
        smooth = _long_matrix(spec.kind, spectral_values(sk_long, r), cloud.normals[i], cloud.normals[j])
        contrib = np.einsum("pab,pb->pa", exact - smooth, f[j] * w[j][:, None])
        np.add.at(out, i, contrib)
    act = cloud.mask
    if _needs_gradient(spec.kind) and grad_f is None:
        grad_f = tangential_gradient(_with_neighbors(cloud), f)
    if grad_f is not None:
        grad_f = np.asarray(grad_f, float).reshape(cloud.n, spec.d_f, 2)
    self_exact = short_range_asymptotic(
        spec, np.where(act, 0.5 * w, 1.0), f, grad_f, cloud.normals, cloud.curvature
    )
    zero = np.zeros((cloud.n, 2))
    s0 = spectral_values(sk_long, np.zeros((1, 2)))
    s0 = np.broadcast_to(s0, (cloud.n,) + s0.shape[1:])
    smooth0 = _long_matrix(spec.kind, s0, cloud.normals, cloud.normals)
    self_smooth = np.einsum("pab,pb->pa", smooth0, f * w[:, None])
    out += (self_exact - self_smooth) * act[:, None]
    return out


def _with_neighbors(cloud):
    if cloud.neighbors is None:
        return build_neighbor_lists(cloud, default_stencil_size(cloud.dim))
    return cloud


def long_part_apply(kind, sk_long, cloud, f):
    """Far-field sum for ``kind`` built from the normal-free series in ``sk_long``."""
    kind = KernelKind(kind)
    f = np.asarray(f, float).reshape(cloud.n, -1)
    if kind == KernelKind.DL2D:
        trans = SpectralKernel(np.swapaxes(sk_long.coeffs, 2, 3), sk_long.box, sk_long.p, kind, sk_long.delta)
        return long_range_apply(trans, cloud, f[:, :1] * cloud.normals)
    if kind == KernelKind.ADL2D:
        v = long_range_apply(sk_long, cloud, f)
        return -np.sum(v * cloud.normals, axis=1, keepdims=True)
    return long_range_apply(sk_long, cloud, f)


def long_range_kernel(config, kind):
    raw = kernel_fourier_coeffs(kind, config.p, config.quadrature_n, config.box)
    return mollify(raw, config.delta)


def default_fast_config(p=32, box=(5.0, 5.0)):
    """Splitting width and near-field radius used for 2D curves in the [0, 5]^2 box."""
    return EwaldConfig(delta=0.1, p=p, eps=0.3, box=box)


def fast_apply(config, kind, cloud, f, stats=None):
    """Truncated far field plus near-field residual; returns (N, d_u).

    If ``stats`` is a dict it receives operation counts: transform work
    2 (2p+1)^2 N and pair work (number of near pairs) (2p+1)^2.
    """
    spec = kernel_spec(kind)
    sk = long_range_kernel(config, spec.kind)
    u = long_part_apply(spec.kind, sk, cloud, f)
    local = {}
    u = u + short_range_residual_apply(spec.kind, sk, cloud, f, config.eps, stats=local)
    if stats is not None:
        modes = (2 * config.p + 1) ** 2
        n = cloud.n_active
        stats.update(
            n=n,
            modes=modes,
            pairs=local["pairs"],
            work=2 * modes * n + local["pairs"] * modes,
        )
    return u


def rate_parameters(p, gamma=0.9, alpha=0.05, q=1, d=2):
    """delta = p^-gamma and eps = delta^t with t = (2 - alpha (d+1)) / (q + 2d + 1)."""
    delta = float(p) ** (-gamma)
    t = (2 - alpha * (d + 1)) / (q + 2 * d + 1)
    return delta, delta**t


def free_space_short_kernel(kind, delta):
    """kappa - kappa * rho_delta with the convolution taken over the whole plane.

    For the logarithm this is E1(r^2 / 2 delta^2) / (4 pi), the planar analogue of
    erfc(r/delta)/r; the modified double layer is its negative gradient.
    """
    kind = KernelKind(kind)
    if kind == KernelKind.SL2D:
        def short(r):
            rr = np.sum(r * r, -1)
            return (special.exp1(rr / (2 * delta**2)) / (4 * np.pi))[:, None, None]
    elif kind == KernelKind.MDL2D:
        def short(r):
            rr = np.sum(r * r, -1)
            return (np.exp(-rr / (2 * delta**2))[:, None] * r / (2 * np.pi * rr[:, None]))[:, :, None]
    else:
        raise EwaldError(f"no closed-form short-range kernel for {kind.value}")
    return short


def measure_decomposition_error(kind, p, delta, eps, box=(0.5, 0.5), grid_n=None, kernel_fn=None, short_fn=None, quad_scale=1.0):
    """L1 norm over B2 of kappa_tilde - kappa.

    kappa_tilde is the truncated series of the mollified coefficients plus,
    inside the ball of radius eps, the local short-range kernel ``short_fn``
    (by default the free-space residual kappa - kappa * rho_delta). The
    integral is computed in polar coordinates about the origin with a radial
    breakpoint at eps and radial panels no longer than min(delta, eps)/2.
    """
    box = tuple(float(b) for b in box)
    if kernel_fn is None:
        kind = base_kind(kind)
        kernel_fn = lambda pts: _kernel_on(kind, pts)
        raw = kernel_fourier_coeffs(kind, p, grid_n or 8 * p, box)
        short_fn = short_fn or free_space_short_kernel(kind, delta)
    else:
        if short_fn is None:
            raise EwaldError("a custom kernel needs its short-range part")
        raw = custom_fourier_coeffs(kernel_fn, p, grid_n or 8 * p, box)
    trunc = mollify(raw, delta)
    rad_panel = min(delta, eps) / 2 / quad_scale
    n_ang_panels = int(max(8, 4 * p * quad_scale))
    pts, wts, inside = polar_rect_quadrature(
        box[0], box[1], n_ang_panels=n_ang_panels, n_ang=8, n_rad=8, split=eps, rad_panel=rad_panel
    )
    err = np.empty(len(wts))
    chunk = 20000
    for s in range(0, len(wts), chunk):
        sl = slice(s, s + chunk)
        q, ins = pts[sl], inside[sl]
        e = spectral_values(trunc, q) - kernel_fn(q)
        if ins.any():
            e[ins] += short_fn(q[ins])
        err[sl] = np.sqrt(np.sum(e**2, axis=(1, 2)))
    return {"l1_error": float(np.sum(wts * err)), "p": p, "delta": delta, "epsilon": eps}


def custom_fourier_coeffs(kernel_fn, p, grid_n, box):
    """Fourier coefficients of a smooth kernel given as a callable, by the tensor rule alone."""
    k = np.arange(-p, p + 1)
    freqs = [np.pi * k / l for l in box]
    tg, wg = _gauss(6)
    axes = []
    for l in box:
        h = 2 * l / grid_n
        left = -l + h * np.arange(grid_n)
        axes.append(((left[:, None] + h * tg).ravel(), np.tile(h * wg, grid_n)))
    (x1, w1), (x2, w2) = axes
    g1, g2 = np.meshgrid(x1, x2, indexing="ij")
    vals = kernel_fn(np.stack([g1.ravel(), g2.ravel()], 1))
    vals = vals.reshape(g1.shape + (-1,))
    a1 = np.exp(-1j * np.outer(freqs[0], x1)) * w1
    a2 = np.exp(-1j * np.outer(freqs[1], x2)) * w2
    out = np.einsum("ki,ijc,lj->klc", a1, vals, a2, optimize=True) / (4 * box[0] * box[1])
    probe = kernel_fn(np.ones((1, 2)))
    return SpectralKernel(out.reshape((2 * p + 1, 2 * p + 1) + probe.shape[1:]), tuple(box), p, KernelKind.SL2D)


def decomposition_sweep(kind, ps, gamma=0.9, alpha=0.05, q=1, box=(0.5, 0.5)):
    rows = []
    for p in ps:
        delta, eps = rate_parameters(p, gamma, alpha, q)
        res = measure_decomposition_error(kind, p, delta, eps, box)
        rows.append({"kernel": KernelKind(kind).value, "p": p, "delta": delta, "epsilon": eps, "l1_error": res["l1_error"]})
    return rows
