"""Property suite run by ``mpcno verify`` and the acceptance tests."""

import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import checkpoint_bytes
from .data import load_sampleset, sampleset_bytes, save_sampleset
from .geometry import CurveFamily, GrfSpec, discretize_curve, generate_random_curve, sample_grf
from .kernels import ALL_KINDS, kernel_spec, verify_regularity_bounds
from .operator import ModelConfig, build_features, init_model, model_forward, spectral_full_complex
from .panel2d import kernel_integral_dataset
from .train import TrainConfig, train_adam


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _cloud(seed, n):
    rng = np.random.default_rng(seed)
    c = discretize_curve(generate_random_curve(CurveFamily(), rng), n)
    return c, sample_grf(c, GrfSpec(), rng)


def _permuted(cloud, perm):
    fields = {}
    for name in ("points", "normals", "weights", "curvature", "mask", "curve_id", "panel_start", "panel_end"):
        fields[name] = getattr(cloud, name)[perm]
    return type(cloud)(**fields)


def check_permutation(seed=0, n=128, tol=1e-12):
    cloud, a = _cloud(seed, n)
    mp = init_model(ModelConfig(d_f=8, n_layers=2, p=4), seed)
    perm = np.random.default_rng(seed + 1).permutation(n)
    u = model_forward(mp, *build_features(cloud, a, p=4), record=False)[0]
    up = model_forward(mp, *build_features(_permuted(cloud, perm), a[perm], p=4), record=False)[0]
    err = float(np.max(np.abs(up - u[perm])) / np.max(np.abs(u)))
    return Check("permutation equivariance", err <= tol, f"max rel deviation {err:.2e} (floating-point summation order)")


def check_real_output(seed=0, n=128, p=4, tol=1e-12):
    cloud, a = _cloud(seed, n)
    mp = init_model(ModelConfig(d_f=8, n_layers=1, p=p), seed)
    feats = build_features(cloud, p=p)
    s = np.random.default_rng(seed).standard_normal((n, 8))
    out = spectral_full_complex(mp.layers[0], feats, s, p, mp.box)
    resid = float(np.max(np.abs(out.imag)) / np.max(np.abs(out.real)))
    return Check("real-output residue", resid <= tol, f"max |Im| / max |Re| = {resid:.2e}")


def check_determinism(seed=0):
    ds = kernel_integral_dataset("SingleLayer2D", 2, 64, seed=seed)
    blobs = []
    for _ in range(2):
        mp = init_model(ModelConfig(d_f=4, n_layers=1, p=2), seed)
        res = train_adam(mp, ds, TrainConfig(batch_size=1, epochs=2, seed=seed))
        blobs.append(checkpoint_bytes(res.params, extra={"loss_history": res.loss_history}))
    return Check("checkpoint determinism", blobs[0] == blobs[1], f"{len(blobs[0])} bytes")


def check_roundtrip(seed=0):
    ds = kernel_integral_dataset("SingleLayer2D", 3, 64, seed=seed, n_max=80)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ds.bin"
        save_sampleset(ds, path)
        back = load_sampleset(path)
    same = sampleset_bytes(back) == sampleset_bytes(ds)
    return Check("dataset round trip", same, "bitwise" if same else "mismatch")


def check_regularity():
    reports = [verify_regularity_bounds(kernel_spec(k)) for k in ALL_KINDS]
    worst = max(max(r.ratios) for r in reports)
    failed = [r.kernel for r in reports if not r.passed]
    return Check("regularity bounds", not failed, f"worst ratio {worst:.3f}" + (f"; failed {failed}" if failed else ""))


def run_property_suite(seed=0):
    return [check_permutation(seed), check_real_output(seed), check_determinism(seed), check_roundtrip(seed), check_regularity()]
