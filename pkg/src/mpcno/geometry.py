"""Closed-curve geometry, point clouds, neighbor stencils and boundary random fields."""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    pass


@dataclass
class CurveFamily:
    """Star-shaped curves r(t) = R (1 + sum_k a_k cos kt + b_k sin kt) about a center."""

    radius_range: tuple = (0.6, 2.0)
    amplitude: float = 0.1
    n_harmonics: int = 5
    center: tuple = (2.5, 2.5)
    center_jitter: float = 0.5
    box: tuple = (5.0, 5.0)
    margin: float = 0.25
    max_retries: int = 200


@dataclass
class Curve:
    center: np.ndarray
    radius: float
    cos_coeffs: np.ndarray
    sin_coeffs: np.ndarray

    def radial(self, t, order=0):
        k = np.arange(1, len(self.cos_coeffs) + 1)
        kt = np.multiply.outer(np.asarray(t, dtype=float), k)
        a, b = self.cos_coeffs, self.sin_coeffs
        if order == 0:
            s = np.cos(kt) @ a + np.sin(kt) @ b
            return self.radius * (1.0 + s)
        if order == 1:
            return self.radius * ((-np.sin(kt) * k) @ a + (np.cos(kt) * k) @ b)
        if order == 2:
            return self.radius * ((-np.cos(kt) * k**2) @ a + (-np.sin(kt) * k**2) @ b)
        raise ValueError("order must be 0, 1 or 2")

    def evaluate(self, t):
        """Position, first and second parameter derivatives at angles t."""
        t = np.asarray(t, dtype=float)
        r, r1, r2 = self.radial(t, 0), self.radial(t, 1), self.radial(t, 2)
        c, s = np.cos(t), np.sin(t)
        pos = self.center + np.stack([r * c, r * s], axis=-1)
        d1 = np.stack([r1 * c - r * s, r1 * s + r * c], axis=-1)
        d2 = np.stack([r2 * c - 2 * r1 * s - r * c, r2 * s + 2 * r1 * c - r * s], axis=-1)
        return pos, d1, d2


@dataclass
class PointCloud:
    """Padded point cloud with per-point geometry.

    For closed curves, point i is the parameter midpoint of panel i, whose
    straight chord runs from ``panel_start[i]`` to ``panel_end[i]``.
    Padded slots have ``mask`` False, zero weight and ``curve_id`` -1.
    """

    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    curvature: np.ndarray
    mask: np.ndarray
    curve_id: np.ndarray
    panel_start: np.ndarray = None
    panel_end: np.ndarray = None
    neighbors: np.ndarray = None

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def n_active(self):
        return int(self.mask.sum())

    def panel_normals(self):
        """Outward unit normals of the straight panels (2D only)."""
        tau = self.panel_end - self.panel_start
        length = np.linalg.norm(tau, axis=1)
        out = np.zeros_like(tau)
        ok = length > 0
        out[ok, 0] = tau[ok, 1] / length[ok]
        out[ok, 1] = -tau[ok, 0] / length[ok]
        return out

    def panel_midpoints(self):
        return 0.5 * (self.panel_start + self.panel_end)


def generate_random_curve(family, rng):
    """Draw a curve from ``family`` that fits its box with the configured margin."""
    k = np.arange(1, family.n_harmonics + 1)
    lo_box = family.margin
    hi_box = np.asarray(family.box) - family.margin
    t = np.linspace(0.0, 2 * np.pi, 512, endpoint=False)
    for _ in range(family.max_retries):
        radius = rng.uniform(*family.radius_range)
        amp = family.amplitude / k
        a = rng.uniform(-1, 1, family.n_harmonics) * amp
        b = rng.uniform(-1, 1, family.n_harmonics) * amp
        center = np.asarray(family.center, float) + rng.uniform(-1, 1, 2) * family.center_jitter
        curve = Curve(center, radius, a, b)
        r = curve.radial(t)
        if np.any(r <= 0.05 * radius):
            continue
        pos, _, _ = curve.evaluate(t)
        if np.all(pos >= lo_box) and np.all(pos <= hi_box):
            return curve
    raise GeometryError(f"no admissible curve after {family.max_retries} draws")


def discretize_curve(curve, n):
    """Sample ``n`` counterclockwise panels on ``curve``."""
    if n < 16:
        raise GeometryError(f"need at least 16 points, got {n}")
    tv = 2 * np.pi * np.arange(n + 1) / n
    verts, _, _ = curve.evaluate(tv[:-1])
    start = verts
    end = np.roll(verts, -1, axis=0)
    tm = 2 * np.pi * (np.arange(n) + 0.5) / n
    pos, d1, d2 = curve.evaluate(tm)
    speed = np.linalg.norm(d1, axis=1)
    tau = d1 / speed[:, None]
    normals = np.stack([tau[:, 1], -tau[:, 0]], axis=1)
    curvature = (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) / speed**3
    weights = np.linalg.norm(end - start, axis=1)
    return PointCloud(
        points=pos,
        normals=normals,
        weights=weights,
        curvature=curvature,
        mask=np.ones(n, bool),
        curve_id=np.zeros(n, int),
        panel_start=start,
        panel_end=end,
    )


def circle(radius=1.0, center=(0.0, 0.0)):
    k = 5
    return Curve(np.asarray(center, float), float(radius), np.zeros(k), np.zeros(k))


def concatenate_clouds(clouds):
    """Stack clouds into one, renumbering curve ids."""
    parts = []
    offset = 0
    for c in clouds:
        cid = np.where(c.curve_id >= 0, c.curve_id + offset, -1)
        offset = cid.max() + 1
        parts.append(replace(c, curve_id=cid, neighbors=None))
    cat = lambda name: np.concatenate([getattr(c, name) for c in parts])
    return PointCloud(
        points=cat("points"),
        normals=cat("normals"),
        weights=cat("weights"),
        curvature=cat("curvature"),
        mask=cat("mask"),
        curve_id=cat("curve_id"),
        panel_start=cat("panel_start"),
        panel_end=cat("panel_end"),
    )


def _min_distance(c1, c2, n=400):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    p1, _, _ = c1.evaluate(t)
    p2, _, _ = c2.evaluate(t)
    return cKDTree(p1).query(p2)[0].min()


TWO_CURVE_FAMILIES = (
    CurveFamily(radius_range=(0.6, 0.9), center=(1.35, 2.5), center_jitter=0.1),
    CurveFamily(radius_range=(0.6, 0.9), center=(3.65, 2.5), center_jitter=0.1),
)


def make_two_curve_cloud(n_per_curve, rng, families=TWO_CURVE_FAMILIES, min_gap=0.1, max_retries=200):
    """Two disjoint curves side by side, each with ``n_per_curve`` panels."""
    for _ in range(max_retries):
        c1 = generate_random_curve(families[0], rng)
        c2 = generate_random_curve(families[1], rng)
        if _min_distance(c1, c2) > min_gap:
            return concatenate_clouds([discretize_curve(c1, n_per_curve), discretize_curve(c2, n_per_curve)])
    raise GeometryError("could not place two disjoint curves")


def pad_cloud(cloud, n_max):
    """Zero-pad a cloud to ``n_max`` slots."""
    n = cloud.n
    if n > n_max:
        raise GeometryError(f"cloud has {n} points, more than n_max={n_max}")
    extra = n_max - n

    def pad(a, fill=0):
        if a is None:
            return None
        shape = (extra,) + a.shape[1:]
        return np.concatenate([a, np.full(shape, fill, dtype=a.dtype)])

    return PointCloud(
        points=pad(cloud.points),
        normals=pad(cloud.normals),
        weights=pad(cloud.weights),
        curvature=pad(cloud.curvature),
        mask=pad(cloud.mask, False),
        curve_id=pad(cloud.curve_id, -1),
        panel_start=pad(cloud.panel_start),
        panel_end=pad(cloud.panel_end),
        neighbors=pad(cloud.neighbors, -1),
    )


def build_neighbor_lists(cloud, k):
    """k nearest active neighbors of every active point, restricted to its own component.

    Returns a copy of ``cloud`` whose ``neighbors`` is an (N, k) index array;
    padded rows are filled with -1.
    """
    nbr = np.full((cloud.n, k), -1, dtype=int)
    for cid in np.unique(cloud.curve_id[cloud.mask]):
        idx = np.flatnonzero(cloud.mask & (cloud.curve_id == cid))
        if len(idx) < k + 1:
            raise GeometryError(f"component {cid} has {len(idx)} points, need more than k={k}")
        tree = cKDTree(cloud.points[idx])
        _, j = tree.query(cloud.points[idx], k=k + 1)
        for row, i in enumerate(idx):
            cand = [c for c in j[row] if c != row][:k]
            nbr[i] = idx[cand]
    return replace(cloud, neighbors=nbr)


def default_stencil_size(dim):
    return 2 * dim + 2


def gradient_operator(cloud):
    """Sparse matrices G_a with (G_a @ f)[i] the a-th component of the tangential gradient.

    Each point fits a regularized least-squares linear model to the differences
    to its neighbors and projects the fitted gradient onto the tangent space.
    """
    if cloud.neighbors is None:
        raise GeometryError("cloud has no neighbor lists")
    n, d = cloud.n, cloud.dim
    nbr = cloud.neighbors
    act = np.flatnonzero(cloud.mask)
    j = nbr[act]
    dx = cloud.points[j] - cloud.points[act][:, None, :]
    dist = np.linalg.norm(dx, axis=2)
    scale = dist.max(axis=1)
    if np.any(scale == 0):
        bad = act[np.flatnonzero(scale == 0)[0]]
        raise GeometryError(f"singular gradient stencil at point {bad}")
    lam = 1e-8 * scale**2
    ata = np.einsum("pka,pkb->pab", dx, dx) + lam[:, None, None] * np.eye(d)
    cond = np.linalg.cond(ata)
    if np.any(~np.isfinite(cond)) or np.any(cond > 1e14):
        bad = act[np.flatnonzero(~(cond <= 1e14))[0]]
        raise GeometryError(f"singular gradient stencil at point {bad}")
    # coefficients c[p, k, a]: grad_a f(i) = sum_k c[p,k,a] (f_j - f_i)
    c = np.linalg.solve(ata, np.transpose(dx, (0, 2, 1)))  # (P, d, k)
    nrm = cloud.normals[act]
    proj = np.eye(d) - nrm[:, :, None] * nrm[:, None, :]
    c = np.einsum("pab,pbk->pka", proj, c)
    mats = []
    kk = j.shape[1]
    rows = np.repeat(act, kk)
    for a in range(d):
        vals = c[:, :, a]
        diag = -vals.sum(axis=1)
        m = sparse.csr_matrix(
            (np.concatenate([vals.ravel(), diag]), (np.concatenate([rows, act]), np.concatenate([j.ravel(), act]))),
            shape=(n, n),
        )
        mats.append(m)
    return mats


def apply_gradient(ops, values):
    """Apply gradient matrices to (N,) or (N, c) values; returns (N, d) or (N, c, d)."""
    v = np.asarray(values, float)
    out = np.stack([g @ v for g in ops], axis=-1)
    return out


def tangential_gradient(cloud, values):
    return apply_gradient(gradient_operator(cloud), values)


def softsign(x):
    return x / (1.0 + np.abs(x))


def softsign_grad(x):
    return 1.0 / (1.0 + np.abs(x)) ** 2


@dataclass
class GrfSpec:
    """Random Fourier series in normalized arclength with variance (1 + k^2)^(-s) per mode."""

    n_modes: int = 16
    smoothness: float = 2.0
    amplitude: float = 1.0
    channels: int = 1


def arclength_parameter(cloud):
    """Normalized arclength in [0, 1) of each point along its own component."""
    s = np.zeros(cloud.n)
    for cid in np.unique(cloud.curve_id[cloud.mask]):
        idx = np.flatnonzero(cloud.mask & (cloud.curve_id == cid))
        w = cloud.weights[idx]
        cum = np.cumsum(w) - 0.5 * w
        s[idx] = cum / w.sum()
    return s


def sample_grf(cloud, spec, rng):
    """Draw a periodic Gaussian random field on every curve of ``cloud``; returns (N, channels)."""
    s = arclength_parameter(cloud)
    k = np.arange(spec.n_modes + 1)
    sigma = spec.amplitude * (1.0 + k**2) ** (-spec.smoothness / 2)
    out = np.zeros((cloud.n, spec.channels))
    for cid in np.unique(cloud.curve_id[cloud.mask]):
        idx = np.flatnonzero(cloud.mask & (cloud.curve_id == cid))
        xi = rng.standard_normal((spec.n_modes + 1, spec.channels)) * sigma[:, None]
        eta = rng.standard_normal((spec.n_modes + 1, spec.channels)) * sigma[:, None]
        eta[0] = 0.0
        ph = 2 * np.pi * np.outer(s[idx], k)
        out[idx] = np.cos(ph) @ xi + np.sin(ph) @ eta
    return out
