"""Source panel method for 3D potential flow around closed triangle meshes.

The disturbance potential is a single layer with kernel 1/(4 pi |x - y|) and
piecewise-constant density on flat triangles, collocated at centroids.
"""

import warnings
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree

from .data import SampleSet
from .geometry import PointCloud
from .panel2d import pad_sampleset


class MeshError(ValueError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    centroids: np.ndarray
    areas: np.ndarray
    normals: np.ndarray
    watertight: bool = True

    @property
    def n_faces(self):
        return len(self.triangles)

    def signed_volume(self):
        return signed_volume(self.vertices, self.triangles)

    def diameters(self):
        p = self.vertices[self.triangles]
        e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
        return np.linalg.norm(e, axis=2).max(axis=1)


def signed_volume(vertices, triangles):
    p = vertices[triangles]
    return float(np.sum(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2]))) / 6.0)


def edge_counts(triangles):
    """Undirected and directed edge multiplicities."""
    directed = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    und = np.sort(directed, axis=1)
    _, und_counts = np.unique(und, axis=0, return_counts=True)
    _, dir_counts = np.unique(directed, axis=0, return_counts=True)
    return und_counts, dir_counts


def make_mesh(vertices, triangles):
    """Validate and orient a triangle mesh.

    Raises MeshError on degenerate faces. A mesh that is not watertight is
    returned with ``watertight=False`` and a warning; a mesh with negative
    signed volume is flipped so normals point outward.
    """
    v = np.asarray(vertices, float)
    t = np.asarray(triangles, int)
    if v.ndim != 2 or v.shape[1] != 3 or t.ndim != 2 or t.shape[1] != 3:
        raise MeshError("vertices must be (V, 3) and triangles (T, 3)")
    if len(t) == 0:
        raise MeshError("mesh has no faces")
    if t.min() < 0 or t.max() >= len(v):
        raise MeshError("triangle index out of range")
    bbox = np.ptp(v, axis=0).max()
    p = v[t]
    cr = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    areas = 0.5 * np.linalg.norm(cr, axis=1)
    if np.any(areas < 1e-12 * bbox**2):
        raise MeshError(f"{int(np.sum(areas < 1e-12 * bbox**2))} degenerate triangles")
    und, directed = edge_counts(t)
    watertight = bool(np.all(und == 2))
    if not watertight:
        warnings.warn("mesh is not watertight", stacklevel=2)
    elif np.any(directed != 1):
        warnings.warn("mesh orientation is inconsistent", stacklevel=2)
    if signed_volume(v, t) < 0:
        t = t[:, ::-1].copy()
        cr = -cr
    return TriMesh(
        vertices=v,
        triangles=t,
        centroids=v[t].mean(axis=1),
        areas=areas,
        normals=cr / (2 * areas[:, None]),
        watertight=watertight,
    )


def _parse_obj(text):
    verts, faces = [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(tok.split("/")[0]) for tok in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return np.array(verts, float).reshape(-1, 3), np.array(faces, int).reshape(-1, 3)


def _parse_stl(text):
    pts = []
    for line in text.splitlines():
        parts = line.split()
        if parts and parts[0] == "vertex":
            pts.append([float(x) for x in parts[1:4]])
    pts = np.array(pts, float)
    if len(pts) == 0 or len(pts) % 3:
        raise MeshError("ASCII STL must list three vertices per facet")
    verts, inverse = np.unique(pts, axis=0, return_inverse=True)
    return verts, inverse.reshape(-1, 3)


def load_mesh(path, fmt=None):
    """Read an OBJ or ASCII STL file into a validated TriMesh."""
    fmt = fmt or ("stl-ascii" if str(path).lower().endswith(".stl") else "obj")
    with open(path) as fh:
        text = fh.read()
    try:
        if fmt == "obj":
            v, t = _parse_obj(text)
        elif fmt == "stl-ascii":
            v, t = _parse_stl(text)
        else:
            raise MeshError(f"unknown mesh format {fmt!r}")
    except (ValueError, IndexError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"{path}: parse failure ({exc})") from exc
    return make_mesh(v, t)


def save_obj(mesh, path):
    with open(path, "w") as fh:
        for x in mesh.vertices:
            fh.write(f"v {float(x[0])!r} {float(x[1])!r} {float(x[2])!r}\n")
        for t in mesh.triangles + 1:
            fh.write(f"f {t[0]} {t[1]} {t[2]}\n")


def save_stl(mesh, path):
    with open(path, "w") as fh:
        fh.write("solid mesh\n")
        for t, n in zip(mesh.triangles, mesh.normals):
            fh.write(f"facet normal {float(n[0])!r} {float(n[1])!r} {float(n[2])!r}\n outer loop\n")
            for x in mesh.vertices[t]:
                fh.write(f"  vertex {float(x[0])!r} {float(x[1])!r} {float(x[2])!r}\n")
            fh.write(" endloop\nendfacet\n")
        fh.write("endsolid mesh\n")


def icosphere(subdivisions=3, radius=1.0):
    """Subdivided icosahedron projected to a sphere; 20 * 4^s faces."""
    g = (1 + np.sqrt(5)) / 2
    v = [(-1, g, 0), (1, g, 0), (-1, -g, 0), (1, -g, 0), (0, -1, g), (0, 1, g),
         (0, -1, -g), (0, 1, -g), (g, 0, -1), (g, 0, 1), (-g, 0, -1), (-g, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4), (11, 10, 2),
         (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5),
         (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return make_mesh(np.array(verts) * radius, np.array(faces))


def bundled_mesh_path(name="icosphere_1280.obj"):
    return resources.files("mpcno") / "data" / name


# ----------------------------------------------------------------------------- quadrature

# Symmetric 7-point rule exact for degree 5 on triangles (barycentric, weights sum to 1).
_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
TRI7_BARY = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [_A1, _B1, _B1],
        [_B1, _A1, _B1],
        [_B1, _B1, _A1],
        [_A2, _B2, _B2],
        [_B2, _A2, _B2],
        [_B2, _B2, _A2],
    ]
)
TRI7_W = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)

# 4-way midpoint subdivision expressed in barycentric coordinates of the parent.
_SUB = np.array(
    [
        [[1, 0, 0], [0.5, 0.5, 0], [0.5, 0, 0.5]],
        [[0.5, 0.5, 0], [0, 1, 0], [0, 0.5, 0.5]],
        [[0.5, 0, 0.5], [0, 0.5, 0.5], [0, 0, 1]],
        [[0.5, 0.5, 0], [0, 0.5, 0.5], [0.5, 0, 0.5]],
    ]
)


def subdivided_rule(levels):
    """Barycentric nodes and weights of the 7-point rule on a ``levels``-times subdivided triangle."""
    tris = [np.eye(3)]
    for _ in range(levels):
        tris = [s @ t for t in tris for s in _SUB]
    nodes = np.concatenate([TRI7_BARY @ t for t in tris])
    weights = np.tile(TRI7_W, len(tris)) / len(tris)
    return nodes, weights


def _grad_kernel(r):
    """Gradient in x of 1/(4 pi |x - y|) at r = x - y."""
    rn = np.linalg.norm(r, axis=-1, keepdims=True)
    return -r / (4 * np.pi * rn**3)


def self_pv_gradient(mesh, n_ang=24):
    """Principal value of the in-plane gradient integral of a flat triangle at its centroid.

    With polar coordinates about the centroid this is (1/4 pi) * integral of
    e(phi) ln R(phi) dphi, where R(phi) is the distance to the boundary.
    """
    p = mesh.vertices[mesh.triangles]
    c = mesh.centroids
    g, gw = np.polynomial.legendre.leggauss(n_ang)
    out = np.zeros((mesh.n_faces, 3))
    for k in range(3):
        a = p[:, k] - c
        b = p[:, (k + 1) % 3] - c
        ea = a / np.linalg.norm(a, axis=1, keepdims=True)
        nb = b - ea * np.sum(b * ea, axis=1, keepdims=True)
        eb = nb / np.linalg.norm(nb, axis=1, keepdims=True)
        span = np.arctan2(np.sum(b * eb, 1), np.sum(b * ea, 1))
        edge = b - a
        for t, w in zip(g, gw):
            phi = 0.5 * (t + 1) * span
            e = np.cos(phi)[:, None] * ea + np.sin(phi)[:, None] * eb
            # ray c + R e meets the edge a + s (b - a)
            cross_e = np.cross(e, edge)
            cross_a = np.cross(a, edge)
            r = np.linalg.norm(cross_a, axis=1) / np.linalg.norm(cross_e, axis=1)
            out += (0.5 * span * w)[:, None] * e * np.log(r)[:, None]
    return out / (4 * np.pi)


def flow_integrals(mesh, near_factor=2.0, levels=1, chunk=256):
    """(T, T, 3) integrals of grad_x kernel over each triangle at each centroid.

    Pairs whose centroids are closer than ``near_factor`` times the larger
    diameter use the rule on a ``levels``-times subdivided triangle. Diagonal
    entries hold the in-plane principal value.
    """
    t = mesh.n_faces
    p = mesh.vertices[mesh.triangles]
    far_nodes = np.einsum("qk,tkd->tqd", TRI7_BARY, p)
    far_w = TRI7_W[None, :] * mesh.areas[:, None]
    out = np.zeros((t, t, 3))
    x = mesh.centroids
    for s in range(0, t, chunk):
        r = x[s : s + chunk, None, None, :] - far_nodes[None]
        with np.errstate(divide="ignore", invalid="ignore"):
            out[s : s + chunk] = np.einsum("ijqd,jq->ijd", _grad_kernel(r), far_w)
    diam = mesh.diameters()
    tree = cKDTree(x)
    pairs = np.array(sorted(tree.query_pairs(near_factor * diam.max())), dtype=int).reshape(-1, 2)
    if len(pairs):
        dist = np.linalg.norm(x[pairs[:, 0]] - x[pairs[:, 1]], axis=1)
        pairs = pairs[dist < near_factor * np.maximum(diam[pairs[:, 0]], diam[pairs[:, 1]])]
        pairs = np.concatenate([pairs, pairs[:, ::-1]])
        nodes, w = subdivided_rule(levels)
        i, j = pairs[:, 0], pairs[:, 1]
        y = np.einsum("qk,pkd->pqd", nodes, p[j])
        r = x[i, None, :] - y
        out[i, j] = np.einsum("pqd,q,p->pd", _grad_kernel(r), w, mesh.areas[j])
    out[np.arange(t), np.arange(t)] = self_pv_gradient(mesh)
    return out


def assemble_flow_matrix(mesh, integrals=None):
    """Normal-velocity influence matrix with the -1/2 jump on the diagonal."""
    g = flow_integrals(mesh) if integrals is None else integrals
    a = np.einsum("id,ijd->ij", mesh.normals, g)
    a[np.diag_indices(mesh.n_faces)] = -0.5
    return a


def double_layer_sum(mesh, x, levels=0):
    """Integral over the surface of d/dn_y of 1/(4 pi |x - y|) at points x (-1 inside, 0 outside)."""
    nodes, w = subdivided_rule(levels)
    p = mesh.vertices[mesh.triangles]
    y = np.einsum("qk,tkd->tqd", nodes, p)
    x = np.atleast_2d(x)
    r = x[:, None, None, :] - y[None]
    rn = np.linalg.norm(r, axis=-1)
    dn = np.einsum("itqd,td->itq", r, mesh.normals) / (4 * np.pi * rn**3)
    return np.einsum("itq,q,t->i", dn, w, mesh.areas)


@dataclass
class FlowSolution:
    sigma: np.ndarray
    velocity: np.ndarray
    cp: np.ndarray


class FlowError(ArithmeticError):
    pass


def solve_potential_flow(mesh, v_inf, integrals=None):
    """Source strengths, surface velocity and pressure coefficient for uniform inflow ``v_inf``."""
    v_inf = np.asarray(v_inf, float)
    speed2 = float(v_inf @ v_inf)
    if speed2 == 0:
        raise FlowError("inflow velocity must be nonzero")
    g = flow_integrals(mesh) if integrals is None else integrals
    a = assemble_flow_matrix(mesh, g)
    try:
        sigma = linalg.solve(a, -(mesh.normals @ v_inf))
    except linalg.LinAlgError as exc:
        raise FlowError("singular panel system") from exc
    if not np.all(np.isfinite(sigma)):
        raise FlowError("non-finite source strengths")
    vel = v_inf + np.einsum("ijd,j->id", g, sigma) - 0.5 * sigma[:, None] * mesh.normals
    cp = 1.0 - np.sum(vel**2, axis=1) / speed2
    return FlowSolution(sigma, vel, cp)


def sphere_cp_analytic(mesh, v_inf):
    d = mesh.centroids - mesh.centroids.mean(axis=0)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    u = np.asarray(v_inf, float) / np.linalg.norm(v_inf)
    cos = d @ u
    return 1.0 - 2.25 * (1.0 - cos**2)


def sphere_cp_report(mesh, v_inf, cp=None):
    """Compare ``cp`` (solved if omitted) against the analytic sphere profile."""
    if cp is None:
        cp = solve_potential_flow(mesh, v_inf).cp
    err = np.abs(cp - sphere_cp_analytic(mesh, v_inf))
    return {
        "faces": mesh.n_faces,
        "max_abs_err": float(err.max()),
        "mean_abs_err": float(err.mean()),
        "rms_err": float(np.sqrt(np.mean(err**2))),
        "cp_min": float(np.min(cp)),
        "cp_max": float(np.max(cp)),
    }


def mesh_cloud(mesh):
    n = mesh.n_faces
    return PointCloud(
        points=mesh.centroids.copy(),
        normals=mesh.normals.copy(),
        weights=mesh.areas.copy(),
        curvature=np.zeros(n),
        mask=np.ones(n, bool),
        curve_id=np.zeros(n, int),
        panel_start=np.zeros((n, 3)),
        panel_end=np.zeros((n, 3)),
    )


def flow_dataset(meshes, v_inf=(1.0, 0.0, 0.0), n_max=None):
    """One sample per mesh: a = v_inf at every face, u = cp."""
    v_inf = np.asarray(v_inf, float)
    clouds, a_list, u_list = [], [], []
    for mesh in meshes:
        sol = solve_potential_flow(mesh, v_inf)
        clouds.append(mesh_cloud(mesh))
        a_list.append(np.tile(v_inf, (mesh.n_faces, 1)))
        u_list.append(sol.cp[:, None])
    meta = {"task": "potential_flow", "v_inf": v_inf.tolist(), "faces": [m.n_faces for m in meshes]}
    ds = SampleSet.from_samples(clouds, a_list, u_list, meta)
    if n_max is not None and n_max > ds.n_max:
        ds = pad_sampleset(ds, n_max)
    return ds
