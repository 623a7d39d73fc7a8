"""Compare the split fast apply with the dense panel oracle on random curves."""

import argparse

import numpy as np

from mpcno.ewald import default_fast_config, fast_apply
from mpcno.geometry import CurveFamily, discretize_curve, generate_random_curve
from mpcno.kernels import kernel_spec
from mpcno.panel2d import apply_dense, assemble_dense


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--kernel", default="SingleLayer2D")
    ap.add_argument("--ps", type=int, nargs="+", default=[16, 32, 48])
    ap.add_argument("--curves", type=int, default=5)
    ap.add_argument("--n-points", type=int, default=512)
    args = ap.parse_args()
    spec = kernel_spec(args.kernel)
    t = np.linspace(0, 1, args.n_points, endpoint=False)
    f = np.cos(2 * np.pi * t)[:, None] * np.ones(spec.d_f)
    for p in args.ps:
        cfg = default_fast_config(p)
        errs = []
        for seed in range(args.curves):
            cloud = discretize_curve(generate_random_curve(CurveFamily(), np.random.default_rng(seed)), args.n_points)
            dense = apply_dense(assemble_dense(spec, cloud), f)
            errs.append(np.linalg.norm(fast_apply(cfg, args.kernel, cloud, f) - dense) / np.linalg.norm(dense))
        print(f"p={p:3d} rel L2 max {max(errs):.3e} mean {np.mean(errs):.3e}")


if __name__ == "__main__":
    main()
