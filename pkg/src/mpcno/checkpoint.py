"""Model checkpoints.

Layout: 8-byte magic ``MPCNOCK\\0``, a little-endian uint64 header length, a
UTF-8 JSON header, then one little-endian float64 blob. The header records the
format version, the model type and its hyperparameters, a shape table
(name, shape, offset in bytes into the blob), optional optimizer state
metadata, and the SHA-256 of the blob.
"""

import hashlib
import json

import numpy as np

from .operator import LAYER_FIELDS, TOP_FIELDS, LayerParams, LinearModel, ModelParams

CHECKPOINT_MAGIC = b"MPCNOCK\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    pass


def _pack(header, arrays):
    table, blobs, offset = [], [], 0
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    blob = b"".join(blobs)
    header = dict(header, format="mpcno-checkpoint", version=CHECKPOINT_VERSION, arrays=table)
    header["blob_sha256"] = hashlib.sha256(blob).hexdigest()
    head = json.dumps(header, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + np.uint64(len(head)).astype("<u8").tobytes() + head + blob


def _unpack(raw, path=""):
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    hlen = int(np.frombuffer(raw[8:16], "<u8")[0])
    try:
        header = json.loads(raw[16 : 16 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    blob = raw[16 + hlen :]
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise CheckpointError(f"{path}: checksum mismatch")
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"]))
        arrays[e["name"]] = np.frombuffer(blob, "<f8", count=count, offset=e["offset"]).reshape(e["shape"]).copy()
    return header, arrays


def model_arrays(model):
    if isinstance(model, LinearModel):
        return [("theta", model.theta)]
    out = [(name, getattr(model, name)) for name in TOP_FIELDS]
    for i, lp in enumerate(model.layers):
        out += [(f"layers.{i}.{k}", getattr(lp, k)) for k in LAYER_FIELDS if getattr(lp, k) is not None]
    return out


def model_header(model):
    if isinstance(model, LinearModel):
        return {
            "model": "linear",
            "kind": model.kind,
            "p": model.p,
            "box": list(model.box),
            "needs_ny": model.needs_ny,
            "needs_nx": model.needs_nx,
            "lam": model.lam,
        }
    return {"model": "deep", "p": model.p, "box": list(model.box), "mode": model.mode, "n_layers": len(model.layers)}


def checkpoint_bytes(model, optimizer=None, extra=None):
    """Serialize ``model`` and optionally an optimizer state dict with array entries m, v."""
    header = {"model_config": model_header(model), "extra": extra or {}}
    arrays = [("param." + k, v) for k, v in model_arrays(model)]
    if optimizer is not None:
        header["optimizer"] = {k: v for k, v in optimizer.items() if not isinstance(v, np.ndarray)}
        arrays += [("opt." + k, v) for k, v in optimizer.items() if isinstance(v, np.ndarray)]
    return _pack(header, arrays)


def save_checkpoint(path, model, optimizer=None, extra=None):
    data = checkpoint_bytes(model, optimizer, extra)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path):
    """Returns (model, optimizer_state or None, extra)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    header, arrays = _unpack(raw, path)
    cfg = header["model_config"]
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param.")}
    if cfg["model"] == "linear":
        model = LinearModel(
            kind=cfg["kind"],
            p=cfg["p"],
            box=tuple(cfg["box"]),
            theta=params["theta"],
            needs_ny=cfg["needs_ny"],
            needs_nx=cfg["needs_nx"],
            lam=cfg["lam"],
        )
    else:
        layers = []
        for i in range(cfg["n_layers"]):
            layers.append(LayerParams(**{k: params.get(f"layers.{i}.{k}") for k in LAYER_FIELDS}))
        model = ModelParams(
            layers=layers, p=cfg["p"], box=tuple(cfg["box"]), mode=cfg["mode"], **{k: params[k] for k in TOP_FIELDS}
        )
    opt = None
    if "optimizer" in header:
        opt = dict(header["optimizer"])
        opt.update({k[4:]: v for k, v in arrays.items() if k.startswith("opt.")})
    return model, opt, header["extra"]
