"""Linear model test error against the mode number p, single- and two-curve."""

import argparse
import logging

from mpcno.train import ScalingConfig, scaling_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--kernel", default="SingleLayer2D")
    ap.add_argument("--ps", type=int, nargs="+", default=[4, 8, 16])
    ap.add_argument("--n", type=int, default=400)
    ap.add_argument("--csv", default="p_scaling.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    rows = scaling_experiment(args.kernel, args.ps, [args.n], ScalingConfig(model="linear"), csv_path=args.csv)
    for a, b in zip(rows, rows[1:]):
        print(f"p {a['p']:3d} -> {b['p']:3d}: ratio {a['err_single'] / b['err_single']:.2f}")
    for r in rows:
        print(f"p={r['p']:3d} single {r['err_single']:.3e} two-curve {r['err_two']:.3e}")


if __name__ == "__main__":
    main()
