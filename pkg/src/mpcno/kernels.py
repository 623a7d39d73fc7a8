"""Laplace and Stokes boundary kernels in two and three dimensions.

All kernels are written in terms of the displacement r = x - y and return a
(d_u, d_f) matrix per evaluation.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np


class KernelError(ValueError):
    pass


class KernelKind(str, Enum):
    SL2D = "SingleLayer2D"
    DL2D = "DoubleLayer2D"
    MDL2D = "ModifiedDoubleLayer2D"
    ADL2D = "AdjointDoubleLayer2D"
    STOKES2D = "Stokeslet2D"
    SL3D = "SingleLayer3D"
    DL3D = "DoubleLayer3D"
    MDL3D = "ModifiedDoubleLayer3D"
    ADL3D = "AdjointDoubleLayer3D"
    STOKES3D = "Stokeslet3D"


@dataclass(frozen=True)
class KernelSpec:
    kind: KernelKind
    dim: int
    d_f: int
    d_u: int
    needs_ny: bool = False
    needs_nx: bool = False

    @property
    def name(self):
        return self.kind.value


_TABLE = {
    KernelKind.SL2D: (2, 1, 1, False, False),
    KernelKind.DL2D: (2, 1, 1, True, False),
    KernelKind.MDL2D: (2, 1, 2, False, False),
    KernelKind.ADL2D: (2, 1, 1, False, True),
    KernelKind.STOKES2D: (2, 2, 2, False, False),
    KernelKind.SL3D: (3, 1, 1, False, False),
    KernelKind.DL3D: (3, 1, 1, True, False),
    KernelKind.MDL3D: (3, 1, 3, False, False),
    KernelKind.ADL3D: (3, 1, 1, False, True),
    KernelKind.STOKES3D: (3, 3, 3, False, False),
}

ALL_KINDS = tuple(KernelKind)


def kernel_spec(kind):
    kind = KernelKind(kind)
    return KernelSpec(kind, *_TABLE[kind])


def _check_normal(name, n, shape):
    if n is None:
        raise KernelError(f"kernel requires {name}")
    n = np.asarray(n, float)
    return np.broadcast_to(n, shape)


def kernel_values(spec, r, n_x=None, n_y=None):
    """Vectorized kernel on displacements ``r`` of shape (..., d); returns (..., d_u, d_f)."""
    r = np.asarray(r, float)
    d = spec.dim
    if r.shape[-1] != d:
        raise KernelError(f"displacement has dimension {r.shape[-1]}, kernel expects {d}")
    rr = np.sum(r * r, axis=-1)
    if np.any(rr == 0):
        raise KernelError("kernel is singular at x == y")
    k = spec.kind
    base = r.shape[:-1]
    if spec.needs_ny:
        n_y = _check_normal("n_y", n_y, r.shape)
    if spec.needs_nx:
        n_x = _check_normal("n_x", n_x, r.shape)
    if k == KernelKind.SL2D:
        v = -np.log(rr) / (4 * np.pi)
        return v[..., None, None]
    if k == KernelKind.DL2D:
        v = np.sum(r * n_y, -1) / (2 * np.pi * rr)
        return v[..., None, None]
    if k == KernelKind.MDL2D:
        return (r / (2 * np.pi * rr[..., None]))[..., None]
    if k == KernelKind.ADL2D:
        v = -np.sum(r * n_x, -1) / (2 * np.pi * rr)
        return v[..., None, None]
    if k == KernelKind.STOKES2D:
        eye = np.broadcast_to(np.eye(2), base + (2, 2))
        out = -0.5 * np.log(rr)[..., None, None] * eye + r[..., :, None] * r[..., None, :] / rr[..., None, None]
        return out / (4 * np.pi)
    rn = np.sqrt(rr)
    r3 = rr * rn
    if k == KernelKind.SL3D:
        return (1.0 / (4 * np.pi * rn))[..., None, None]
    if k == KernelKind.DL3D:
        v = -np.sum(r * n_y, -1) / (4 * np.pi * r3)
        return v[..., None, None]
    if k == KernelKind.MDL3D:
        return (-r / (4 * np.pi * r3[..., None]))[..., None]
    if k == KernelKind.ADL3D:
        v = np.sum(r * n_x, -1) / (4 * np.pi * r3)
        return v[..., None, None]
    if k == KernelKind.STOKES3D:
        eye = np.broadcast_to(np.eye(3), base + (3, 3))
        out = eye / rn[..., None, None] + r[..., :, None] * r[..., None, :] / r3[..., None, None]
        return out / (8 * np.pi)
    raise KernelError(f"unknown kernel {k}")


def eval_kernel(spec, x, y, n_x=None, n_y=None):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.shape != (spec.dim,) or y.shape != (spec.dim,):
        raise KernelError(f"points must have shape ({spec.dim},)")
    return kernel_values(spec, x - y, n_x, n_y)


def short_range_asymptotic(spec, eps, f, grad_f=None, n_x=None, curvature=None):
    """Leading-order value of the kernel integral over the boundary inside a ball of radius eps.

    ``f`` is (..., d_f); ``grad_f`` is the tangential gradient (..., d_f, d);
    ``curvature`` is the trace of the tangential gradient of the normal.
    Returns (..., d_u).
    """
    f = np.asarray(f, float)
    eps = np.asarray(eps, float)
    e = eps[..., None] if eps.ndim else eps
    k = spec.kind
    if k in (KernelKind.SL2D,):
        return -(e * np.log(e) - e) / np.pi * f
    if k in (KernelKind.DL2D, KernelKind.ADL2D):
        return -e * np.asarray(curvature)[..., None] * f / (2 * np.pi)
    if k == KernelKind.MDL2D:
        n = np.asarray(n_x, float)
        g = np.asarray(grad_f, float)[..., 0, :]
        return e * np.asarray(curvature)[..., None] * n * f / (2 * np.pi) - e / np.pi * g
    if k == KernelKind.STOKES2D:
        n = np.asarray(n_x, float)
        tang = f - n * np.sum(n * f, -1, keepdims=True)
        return -(e * np.log(e) - e) / (2 * np.pi) * f + e / (2 * np.pi) * tang
    if k == KernelKind.SL3D:
        return e * f / 2
    if k in (KernelKind.DL3D, KernelKind.ADL3D):
        return e * np.asarray(curvature)[..., None] * f / 8
    if k == KernelKind.MDL3D:
        n = np.asarray(n_x, float)
        g = np.asarray(grad_f, float)[..., 0, :]
        return -e * np.asarray(curvature)[..., None] * n * f / 8 + e / 4 * g
    if k == KernelKind.STOKES3D:
        n = np.asarray(n_x, float)
        tang = f - n * np.sum(n * f, -1, keepdims=True)
        return e * f / 4 + e / 8 * tang
    raise KernelError(f"unknown kernel {k}")


@dataclass
class RegularityReport:
    kernel: str
    constant: float
    ratios: tuple
    passed: bool


def _random_units(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def verify_regularity_bounds(spec, constant=1.0, n_samples=200, seed=0):
    """Check |d^k kappa(x)| |x|^(k+d-1) <= C for k = 0, 1, 2 on 1e-3 <= |x| <= 1.

    Derivatives are central finite differences with step 1e-5 |x|; norms are
    Frobenius norms over all tensor entries, which bound the operator norm.
    """
    rng = np.random.default_rng(seed)
    d = spec.dim
    radius = 10 ** rng.uniform(-3, 0, n_samples)
    x = _random_units(rng, n_samples, d) * radius[:, None]
    nx = _random_units(rng, n_samples, d)
    ny = _random_units(rng, n_samples, d)

    def kap(z):
        return kernel_values(spec, z, nx, ny)

    h = 1e-5 * radius
    eye = np.eye(d)
    k0 = kap(x)
    g = []
    hess = np.zeros(k0.shape + (d, d))
    for a in range(d):
        ea = eye[a] * h[:, None]
        kp, km = kap(x + ea), kap(x - ea)
        g.append((kp - km) / (2 * h[:, None, None]))
        hess[..., a, a] = (kp - 2 * k0 + km) / h[:, None, None] ** 2
        for b in range(a + 1, d):
            eb = eye[b] * h[:, None]
            mix = (kap(x + ea + eb) - kap(x + ea - eb) - kap(x - ea + eb) + kap(x - ea - eb)) / (
                4 * h[:, None, None] ** 2
            )
            hess[..., a, b] = mix
            hess[..., b, a] = mix
    grad = np.stack(g, axis=-1)
    norms = [
        np.sqrt(np.sum(k0**2, axis=(1, 2))),
        np.sqrt(np.sum(grad**2, axis=(1, 2, 3))),
        np.sqrt(np.sum(hess**2, axis=(1, 2, 3, 4))),
    ]
    ratios = tuple(float(np.max(norms[k] * radius ** (k + d - 1)) / constant) for k in range(3))
    return RegularityReport(spec.name, constant, ratios, all(r <= 1.0 for r in ratios))
