"""Piecewise-constant panel discretization of 2D boundary integral operators.

Panels are straight chords with constant density, and collocation points sit
at chord midpoints. Panel integrals use closed forms in the panel frame, with
coordinates x1 along the panel and x2 toward the interior side.
"""

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .data import SampleSet
from .geometry import CurveFamily, GrfSpec, discretize_curve, generate_random_curve, make_two_curve_cloud, sample_grf
from .kernels import KernelKind, kernel_spec


class PanelError(ValueError):
    pass


class SolverError(ArithmeticError):
    pass


@dataclass
class Panel:
    start: np.ndarray
    end: np.ndarray

    @property
    def length(self):
        return float(np.linalg.norm(np.asarray(self.end) - np.asarray(self.start)))


ON_PANEL_TOL = 1e-12


def _frame(start, end, x, on_panel=None):
    tvec = end - start
    length = np.linalg.norm(tvec, axis=-1)
    tau = tvec / length[..., None]
    e2 = np.stack([-tau[..., 1], tau[..., 0]], axis=-1)
    rel = x - start
    x1 = np.sum(rel * tau, -1)
    x2 = np.sum(rel * e2, -1)
    flat = np.abs(x2) <= ON_PANEL_TOL * length
    if on_panel is not None:
        flat = flat | on_panel
    x2 = np.where(flat, 0.0, x2)
    return tau, e2, length, x1, x2


def panel_integrals(kind, start, end, x, n_x=None, on_panel=None):
    """Integral of the kernel over straight panels, broadcast over leading axes.

    Returns (..., d_u, d_f).
    """
    kind = KernelKind(kind)
    if kind not in (KernelKind.SL2D, KernelKind.DL2D, KernelKind.MDL2D, KernelKind.ADL2D, KernelKind.STOKES2D):
        raise PanelError(f"{kind.value} is not a 2D kernel")
    start, end, x = np.broadcast_arrays(np.asarray(start, float), np.asarray(end, float), np.asarray(x, float))
    tau, e2, l, x1, x2 = _frame(start, end, x, on_panel)
    r1 = x1**2 + x2**2
    r2 = (l - x1) ** 2 + x2**2
    if np.any((r1 == 0) | (r2 == 0)):
        raise PanelError("evaluation point coincides with a panel endpoint")
    ln1 = 0.5 * np.log(r1)
    ln2 = 0.5 * np.log(r2)
    theta = np.where(x2 == 0, 0.0, np.arctan2(l * x2, x2**2 + x1**2 - l * x1))
    big_l = ln1 - ln2
    two_pi = 2 * np.pi
    if kind == KernelKind.DL2D:
        return (-theta / two_pi)[..., None, None]
    sl = -((l - x1) * ln2 + x1 * ln1 - l + x2 * theta) / two_pi
    if kind == KernelKind.SL2D:
        return sl[..., None, None]
    mdl = (big_l[..., None] * tau + theta[..., None] * e2) / two_pi
    if kind == KernelKind.MDL2D:
        return mdl[..., None]
    if kind == KernelKind.ADL2D:
        if n_x is None:
            raise PanelError("adjoint double layer requires n_x")
        return (-np.sum(mdl * np.asarray(n_x, float), -1))[..., None, None]
    tt = tau[..., :, None] * tau[..., None, :]
    ee = e2[..., :, None] * e2[..., None, :]
    te = tau[..., :, None] * e2[..., None, :]
    c = lambda v: v[..., None, None]
    m = c(l - x2 * theta) * tt + c(x2 * big_l) * (te + np.swapaxes(te, -1, -2)) + c(x2 * theta) * ee
    eye = np.eye(2)
    return (c(two_pi * sl) * eye + m) / (4 * np.pi)


def panel_integral(spec, panel, x, n_x=None):
    """Exact integral of ``spec``'s kernel over one panel at target ``x``; (d_u, d_f)."""
    spec = kernel_spec(spec.kind) if hasattr(spec, "kind") else kernel_spec(spec)
    if spec.needs_nx and n_x is None:
        raise PanelError("kernel requires n_x")
    return panel_integrals(spec.kind, panel.start, panel.end, x, n_x)


@dataclass
class DenseOperator:
    """Dense matrix of shape (N d_u, N d_f); row i*d_u + a, column j*d_f + b."""

    matrix: np.ndarray
    spec: object
    n: int


def assemble_dense(spec, cloud):
    if spec.dim != 2:
        raise PanelError("dense panel assembly is two-dimensional")
    if cloud.panel_start is None:
        raise PanelError("cloud carries no panel data")
    act = np.flatnonzero(cloud.mask)
    start = cloud.panel_start[act]
    end = cloud.panel_end[act]
    mid = 0.5 * (start + end)
    nrm = cloud.panel_normals()[act]
    m = len(act)
    on_panel = np.eye(m, dtype=bool)
    block = panel_integrals(
        spec.kind, start[None, :, :], end[None, :, :], mid[:, None, :], nrm[:, None, :], on_panel=on_panel
    )
    du, df = spec.d_u, spec.d_f
    full = np.zeros((cloud.n, du, cloud.n, df))
    full[np.ix_(act, np.arange(du), act, np.arange(df))] = np.transpose(block, (0, 2, 1, 3))
    return DenseOperator(full.reshape(cloud.n * du, cloud.n * df), spec, cloud.n)


def apply_dense(op, f):
    f = np.asarray(f, float).reshape(op.n, op.spec.d_f)
    return (op.matrix @ f.ravel()).reshape(op.n, op.spec.d_u)


def solve_exterior_neumann(cloud, f, tol=1e-6):
    """Exterior Neumann problem by a single-layer ansatz.

    Solves (-1/2 I + D*) sigma = f with the zero-total-density constraint
    appended as a bordered row and column. Returns (sigma, phi) with phi the
    single-layer potential of sigma at the collocation points.
    """
    f = np.asarray(f, float).reshape(cloud.n)
    w = cloud.weights * cloud.mask
    norm = np.sqrt(np.sum(w) * np.sum(w * f**2))
    if abs(np.sum(w * f)) > tol * max(norm, 1e-300):
        raise SolverError("boundary data violates the compatibility condition")
    act = np.flatnonzero(cloud.mask)
    adl = assemble_dense(kernel_spec(KernelKind.ADL2D), cloud).matrix[np.ix_(act, act)]
    m = len(act)
    a = np.zeros((m + 1, m + 1))
    a[:m, :m] = adl - 0.5 * np.eye(m)
    a[:m, m] = w[act]
    a[m, :m] = w[act]
    rhs = np.concatenate([f[act], [0.0]])
    try:
        sol = linalg.solve(a, rhs)
    except linalg.LinAlgError as exc:
        raise SolverError("singular Neumann system") from exc
    resid = np.linalg.norm(a @ sol - rhs)
    if not np.isfinite(resid) or resid > 1e-8 * max(np.linalg.norm(rhs), 1e-300):
        raise SolverError(f"Neumann solve did not converge (residual {resid:.3e})")
    sigma = np.zeros(cloud.n)
    sigma[act] = sol[:m]
    sl = assemble_dense(kernel_spec(KernelKind.SL2D), cloud)
    phi = apply_dense(sl, sigma)[:, 0]
    return sigma, phi


def _sample_cloud(rng, n_points, family, two_curve):
    if two_curve:
        return make_two_curve_cloud(n_points // 2, rng)
    return discretize_curve(generate_random_curve(family, rng), n_points)


def _rngs(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def kernel_integral_dataset(kind, n, n_points=512, seed=0, grf=None, family=None, two_curve=False, n_max=None):
    """Samples (f, K f) with f a boundary random field and K f from the dense panel operator."""
    spec = kernel_spec(kind)
    if spec.dim != 2:
        raise PanelError("2D kernels only")
    family = family or CurveFamily()
    grf = grf or GrfSpec(channels=spec.d_f)
    if grf.channels != spec.d_f:
        grf = GrfSpec(grf.n_modes, grf.smoothness, grf.amplitude, spec.d_f)
    clouds, a_list, u_list = [], [], []
    for rng in _rngs(seed, n):
        cloud = _sample_cloud(rng, n_points, family, two_curve)
        f = sample_grf(cloud, grf, rng)
        u = apply_dense(assemble_dense(spec, cloud), f)
        clouds.append(cloud)
        a_list.append(f)
        u_list.append(u)
    meta = {
        "task": "kernel_integral",
        "kernel": spec.name,
        "n": n,
        "n_points": n_points,
        "seed": seed,
        "two_curve": bool(two_curve),
        "grf": vars(grf),
        "family": {k: v for k, v in vars(family).items()},
    }
    return _finish(clouds, a_list, u_list, meta, n_max)


def neumann_to_dirichlet_dataset(n, n_points=512, seed=0, grf=None, family=None, two_curve=False, n_max=None):
    """Samples (f, phi) for the exterior Neumann-to-Dirichlet map with mean-free f."""
    family = family or CurveFamily()
    grf = grf or GrfSpec()
    clouds, a_list, u_list = [], [], []
    for rng in _rngs(seed, n):
        cloud = _sample_cloud(rng, n_points, family, two_curve)
        f = sample_grf(cloud, GrfSpec(grf.n_modes, grf.smoothness, grf.amplitude, 1), rng)[:, 0]
        w = cloud.weights
        f = f - np.sum(w * f) / np.sum(w)
        _, phi = solve_exterior_neumann(cloud, f)
        clouds.append(cloud)
        a_list.append(f[:, None])
        u_list.append(phi[:, None])
    meta = {
        "task": "neumann_to_dirichlet",
        "n": n,
        "n_points": n_points,
        "seed": seed,
        "two_curve": bool(two_curve),
        "grf": vars(grf),
        "family": {k: v for k, v in vars(family).items()},
    }
    return _finish(clouds, a_list, u_list, meta, n_max)


def _finish(clouds, a_list, u_list, meta, n_max):
    ds = SampleSet.from_samples(clouds, a_list, u_list, meta)
    if n_max is not None:
        if n_max < ds.n_max:
            raise PanelError(f"n_max={n_max} below the largest cloud ({ds.n_max})")
        if n_max > ds.n_max:
            ds = pad_sampleset(ds, n_max)
    ds.meta["n_max"] = ds.n_max
    return ds


def pad_sampleset(ds, n_max):
    extra = n_max - ds.n_max

    def pad(arr, fill):
        shape = (arr.shape[0], extra) + arr.shape[2:]
        return np.concatenate([arr, np.full(shape, fill, dtype=arr.dtype)], axis=1)

    return SampleSet(
        points=pad(ds.points, 0.0),
        normals=pad(ds.normals, 0.0),
        weights=pad(ds.weights, 0.0),
        curvature=pad(ds.curvature, 0.0),
        mask=pad(ds.mask, False),
        curve_id=pad(ds.curve_id, -1),
        panel_start=pad(ds.panel_start, 0.0),
        panel_end=pad(ds.panel_end, 0.0),
        a=pad(ds.a, 0.0),
        u=pad(ds.u, 0.0),
        meta=dict(ds.meta),
    )
