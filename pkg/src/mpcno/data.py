"""Padded sample sets and their binary container format."""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud

SAMPLESET_MAGIC = b"MPCNOSS\x00"
SAMPLESET_VERSION = 1
ARRAY_ORDER = ("points", "normals", "weights", "curvature", "mask", "curve_id", "panel_start", "panel_end", "a", "u")


class DataFormatError(IOError):
    pass


@dataclass
class SampleSet:
    """n samples padded to N slots: inputs ``a`` (n, N, d_a) and targets ``u`` (n, N, d_u)."""

    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    curvature: np.ndarray
    mask: np.ndarray
    curve_id: np.ndarray
    panel_start: np.ndarray
    panel_end: np.ndarray
    a: np.ndarray
    u: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n, big_n = self.weights.shape
        for name in ARRAY_ORDER:
            arr = getattr(self, name)
            if arr.shape[:2] != (n, big_n):
                raise ValueError(f"{name} has shape {arr.shape}, expected leading ({n}, {big_n})")
        if np.any(self.weights[~self.mask] != 0):
            raise ValueError("padded slots must carry zero weight")
        # keep meta in its JSON form so it survives a file round trip unchanged
        self.meta = json.loads(json.dumps(self.meta, sort_keys=True, default=str))

    def __len__(self):
        return self.weights.shape[0]

    @property
    def n_max(self):
        return self.weights.shape[1]

    @property
    def dim(self):
        return self.points.shape[2]

    def cloud(self, i):
        return PointCloud(
            points=self.points[i],
            normals=self.normals[i],
            weights=self.weights[i],
            curvature=self.curvature[i],
            mask=self.mask[i],
            curve_id=self.curve_id[i],
            panel_start=self.panel_start[i],
            panel_end=self.panel_end[i],
        )

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        kw = {name: getattr(self, name)[idx] for name in ARRAY_ORDER}
        return SampleSet(**kw, meta=dict(self.meta))

    @staticmethod
    def from_samples(clouds, a_list, u_list, meta=None):
        n_max = max(c.n for c in clouds)
        d = clouds[0].dim

        def stack(get, width, fill=0.0, dtype=float):
            out = np.full((len(clouds), n_max) + width, fill, dtype=dtype)
            for i, c in enumerate(clouds):
                v = get(i, c)
                if v is not None:
                    out[i, : c.n] = v
            return out

        return SampleSet(
            points=stack(lambda i, c: c.points, (d,)),
            normals=stack(lambda i, c: c.normals, (d,)),
            weights=stack(lambda i, c: c.weights, ()),
            curvature=stack(lambda i, c: c.curvature, ()),
            mask=stack(lambda i, c: c.mask, (), False, bool),
            curve_id=stack(lambda i, c: c.curve_id, (), -1, int),
            panel_start=stack(lambda i, c: c.panel_start, (d,)),
            panel_end=stack(lambda i, c: c.panel_end, (d,)),
            a=stack(lambda i, c: a_list[i], (a_list[0].shape[1],)),
            u=stack(lambda i, c: u_list[i], (u_list[0].shape[1],)),
            meta=dict(meta or {}),
        )


def _le(arr):
    return np.ascontiguousarray(arr, dtype="<f8")


def sampleset_bytes(ds):
    """Serialize to the binary container: magic, header length, JSON manifest, float64 blob."""
    table = []
    blobs = []
    offset = 0
    for name in ARRAY_ORDER:
        arr = _le(getattr(ds, name))
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        b = arr.tobytes()
        blobs.append(b)
        offset += len(b)
    blob = b"".join(blobs)
    manifest = {
        "format": "mpcno-sampleset",
        "version": SAMPLESET_VERSION,
        "counts": {"samples": len(ds), "n_max": ds.n_max},
        "dims": {"d": ds.dim, "d_a": ds.a.shape[2], "d_u": ds.u.shape[2]},
        "generator_hash": generator_hash(ds.meta),
        "provenance": ds.meta,
        "arrays": table,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    return SAMPLESET_MAGIC + np.uint64(len(head)).astype("<u8").tobytes() + head + blob


def generator_hash(meta):
    return hashlib.sha256(json.dumps(meta, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_sampleset(ds, path):
    with open(path, "wb") as fh:
        fh.write(sampleset_bytes(ds))


def load_sampleset(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != SAMPLESET_MAGIC:
        raise DataFormatError(f"{path}: not a sample-set file")
    hlen = int(np.frombuffer(raw[8:16], "<u8")[0])
    try:
        manifest = json.loads(raw[16 : 16 + hlen])
    except ValueError as exc:
        raise DataFormatError(f"{path}: corrupt manifest") from exc
    if manifest.get("version") != SAMPLESET_VERSION:
        raise DataFormatError(f"{path}: unsupported version {manifest.get('version')}")
    blob = raw[16 + hlen :]
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise DataFormatError(f"{path}: checksum mismatch")
    arrays = {}
    for entry in manifest["arrays"]:
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(blob, "<f8", count=count, offset=entry["offset"]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(float)
    arrays["mask"] = arrays["mask"] != 0
    arrays["curve_id"] = arrays["curve_id"].astype(int)
    return SampleSet(**arrays, meta=manifest["provenance"])


def export_text(ds, path):
    """Write a JSON text rendering of the sample set for interchange."""
    doc = {"meta": ds.meta}
    for name in ARRAY_ORDER:
        doc[name] = np.asarray(getattr(ds, name), float).tolist()
    with open(path, "w") as fh:
        json.dump(doc, fh)


def import_text(path):
    with open(path) as fh:
        doc = json.load(fh)
    arrays = {name: np.asarray(doc[name], float) for name in ARRAY_ORDER}
    arrays["mask"] = arrays["mask"] != 0
    arrays["curve_id"] = arrays["curve_id"].astype(int)
    return SampleSet(**arrays, meta=doc["meta"])


def file_sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
