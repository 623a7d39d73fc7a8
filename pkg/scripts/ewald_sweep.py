"""Splitting error against p with delta = p^-gamma and eps = delta^t."""

import argparse

from mpcno.ewald import measure_decomposition_error, rate_parameters


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--kernel", default="SingleLayer2D")
    ap.add_argument("--ps", type=int, nargs="+", default=[8, 16, 32])
    args = ap.parse_args()
    prev = None
    for p in args.ps:
        delta, eps = rate_parameters(p)
        err = measure_decomposition_error(args.kernel, p, delta, eps, (0.5, 0.5))["l1_error"]
        ratio = "" if prev is None else f" ratio {prev / err:.2f}"
        print(f"p={p:3d} delta={delta:.4f} eps={eps:.4f} L1 error {err:.3e}{ratio}")
        prev = err


if __name__ == "__main__":
    main()
