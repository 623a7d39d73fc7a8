"""Potential flow past a triangulated sphere: cp error against mesh resolution."""

import argparse

import numpy as np

from mpcno.panel3d import icosphere, solve_potential_flow, sphere_cp_report


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--levels", type=int, nargs="+", default=[1, 2, 3])
    args = ap.parse_args()
    v = np.array([1.0, 0.0, 0.0])
    for level in args.levels:
        mesh = icosphere(level)
        rep = sphere_cp_report(mesh, v, solve_potential_flow(mesh, v).cp)
        print(f"faces={rep['faces']:5d} max |cp - analytic| {rep['max_abs_err']:.3e}")


if __name__ == "__main__":
    main()
