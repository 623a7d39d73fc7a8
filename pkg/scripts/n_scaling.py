"""Deep model test error against the training set size n."""

import argparse
import logging

from mpcno.train import ScalingConfig, TrainConfig, scaling_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--kernel", default="SingleLayer2D")
    ap.add_argument("--p", type=int, default=8)
    ap.add_argument("--ns", type=int, nargs="+", default=[100, 400])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--csv", default="n_scaling.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    cfg = ScalingConfig(model="deep", train=TrainConfig(epochs=args.epochs, peak_lr=args.lr))
    for r in scaling_experiment(args.kernel, [args.p], args.ns, cfg, csv_path=args.csv):
        print(f"n={r['n']:5d} single {r['err_single']:.3e} two-curve {r['err_two']:.3e}")


if __name__ == "__main__":
    main()
