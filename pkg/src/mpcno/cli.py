"""Command-line entry point.

Every subcommand reads a YAML config whose keys are checked against a fixed
schema before any work starts. Outputs go to ``--out``.

Exit codes: 0 success, 1 invalid config or arguments, 2 numerical failure,
3 file input/output failure.
"""

import argparse
import csv
import hashlib
import logging
import sys
from pathlib import Path

import yaml
from threadpoolctl import threadpool_limits

log = logging.getLogger("mpcno")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# Schema values are (allowed types, default). A dict value is a nested section.
_NUM = (int, float)
GRF_SCHEMA = {"n_modes": (int, 16), "smoothness": (_NUM, 2.0), "amplitude": (_NUM, 1.0)}
TRAIN_SCHEMA = {
    "batch_size": (int, 8),
    "epochs": (int, 100),
    "peak_lr": (_NUM, 1e-3),
    "warmup": (_NUM, 0.3),
    "div_factor": (_NUM, 25.0),
    "final_div_factor": (_NUM, 1e4),
}
MODEL_SCHEMA = {"d_f": (int, 16), "n_layers": (int, 2), "p": (int, 8), "box": (list, [5.0, 5.0]), "proj_width": ((int, type(None)), None)}

SCHEMAS = {
    "gen-data": {
        "task": (str, "kernel"),
        "kernel": (str, "SingleLayer2D"),
        "n": (int, 10),
        "n_points": (int, 512),
        "two_curve": (bool, False),
        "n_max": ((int, type(None)), None),
        "seed": (int, 0),
        "grf": GRF_SCHEMA,
        "meshes": (list, []),
        "v_inf": (list, [1.0, 0.0, 0.0]),
        "output": (str, "dataset.bin"),
    },
    "fit": {
        "dataset": (str, None),
        "kernel": (str, "SingleLayer2D"),
        "p": (int, 8),
        "lam": (_NUM, 1e-10),
        "box": (list, [5.0, 5.0]),
        "checkpoint": (str, "linear.ckpt"),
        "metrics": (str, "fit_metrics.csv"),
    },
    "train": {
        "dataset": (str, None),
        "seed": (int, 0),
        "model": MODEL_SCHEMA,
        "train": TRAIN_SCHEMA,
        "resume": ((str, type(None)), None),
        "checkpoint": (str, "model.ckpt"),
        "metrics": (str, "train_loss.csv"),
    },
    "eval": {
        "checkpoint": (str, None),
        "datasets": (dict, None),
        "output": (str, "eval.csv"),
    },
    "ewald-sweep": {
        "kernel": (str, "SingleLayer2D"),
        "ps": (list, [8, 16, 32]),
        "gamma": (_NUM, 0.9),
        "alpha": (_NUM, 0.05),
        "q": (int, 1),
        "box": (list, [0.5, 0.5]),
        "output": (str, "ewald_sweep.csv"),
    },
    "flow": {
        "mesh": ((str, type(None)), None),
        "v_inf": (list, [1.0, 0.0, 0.0]),
        "report": (str, "flow_report.csv"),
        "faces": (str, "flow_cp.csv"),
    },
    "verify": {"seed": (int, 0)},
}


def validate(schema, raw, where="config"):
    """Fill defaults and reject unknown keys, wrong types and missing required values."""
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    out = {}
    for key, rule in schema.items():
        if isinstance(rule, dict):
            out[key] = validate(rule, raw.get(key), f"{where}.{key}")
            continue
        types, default = rule
        if key not in raw:
            if default is None and type(None) not in (types if isinstance(types, tuple) else (types,)):
                raise ConfigError(f"{where}: missing required key {key!r}")
            out[key] = default
            continue
        val = raw[key]
        allowed = types if isinstance(types, tuple) else (types,)
        if isinstance(val, bool) and bool not in allowed:
            raise ConfigError(f"{where}.{key}: expected {allowed}, got bool")
        if not isinstance(val, allowed):
            raise ConfigError(f"{where}.{key}: expected {allowed}, got {type(val).__name__}")
        out[key] = val
    return out


def load_config(command, path):
    raw = {}
    if path is not None:
        with open(path) as fh:
            try:
                raw = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
    return validate(SCHEMAS[command], raw)


def _sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write_rows(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})


# ----------------------------------------------------------------------------- commands


def cmd_gen_data(cfg, out):
    from .data import generator_hash, save_sampleset
    from .geometry import GrfSpec
    from .panel2d import kernel_integral_dataset, neumann_to_dirichlet_dataset
    from .panel3d import bundled_mesh_path, flow_dataset, load_mesh

    if cfg["task"] not in ("kernel", "neumann", "flow"):
        raise ConfigError(f"unknown task {cfg['task']!r}")
    grf = GrfSpec(cfg["grf"]["n_modes"], cfg["grf"]["smoothness"], cfg["grf"]["amplitude"])
    common = dict(n_points=cfg["n_points"], seed=cfg["seed"], grf=grf, two_curve=cfg["two_curve"], n_max=cfg["n_max"])
    if cfg["task"] == "kernel":
        ds = kernel_integral_dataset(cfg["kernel"], cfg["n"], **common)
    elif cfg["task"] == "neumann":
        ds = neumann_to_dirichlet_dataset(cfg["n"], **common)
    else:
        paths = cfg["meshes"] or [str(bundled_mesh_path())]
        ds = flow_dataset([load_mesh(p) for p in paths], cfg["v_inf"], cfg["n_max"])
    path = out / cfg["output"]
    save_sampleset(ds, path)
    print(f"wrote {path}: n={len(ds)} N_max={ds.n_max} generator_hash={generator_hash(ds.meta)} sha256={_sha(path)}")


def cmd_fit(cfg, out):
    from .checkpoint import save_checkpoint
    from .data import load_sampleset
    from .train import evaluate, fit_linear_model

    ds = load_sampleset(cfg["dataset"])
    model = fit_linear_model(ds, cfg["kernel"], cfg["p"], tuple(cfg["box"]), cfg["lam"])
    res = evaluate(model, ds)
    digest = save_checkpoint(out / cfg["checkpoint"], model, extra={"train_rel_l2": res.mean_rel_l2, "complete": True})
    _write_rows(out / cfg["metrics"], [{"model": "linear", "p": cfg["p"], "train_rel_l2": res.mean_rel_l2}], ("model", "p", "train_rel_l2"))
    print(f"linear fit: train rel L2 {res.mean_rel_l2:.6e}; checkpoint sha256={digest}")


def cmd_train(cfg, out):
    from .checkpoint import load_checkpoint, save_checkpoint
    from .data import load_sampleset
    from .operator import ModelConfig, init_model
    from .train import TrainConfig, train_adam

    ds = load_sampleset(cfg["dataset"])
    m = cfg["model"]
    tc = TrainConfig(seed=cfg["seed"], **cfg["train"])
    state = None
    if cfg["resume"]:
        mp, state, _ = load_checkpoint(cfg["resume"])
        if state is None:
            raise ConfigError("resume checkpoint carries no optimizer state")
    else:
        mc = ModelConfig(
            d_a=ds.a.shape[2], d_u=ds.u.shape[2], d_f=m["d_f"], n_layers=m["n_layers"], p=m["p"],
            box=tuple(float(b) for b in m["box"]), proj_width=m["proj_width"],
        )
        mp = init_model(mc, cfg["seed"])
    partial = out / (cfg["checkpoint"] + ".partial")
    res = train_adam(mp, ds, tc, state=state, checkpoint_path=partial)
    digest = save_checkpoint(out / cfg["checkpoint"], res.params, optimizer=res.state, extra={"complete": True})
    if partial.exists():
        partial.unlink()
    rows = [{"epoch": i + 1, "loss": v} for i, v in enumerate(res.loss_history)]
    _write_rows(out / cfg["metrics"], rows, ("epoch", "loss"))
    final = res.loss_history[-1] if res.loss_history else float("nan")
    print(f"trained {len(res.loss_history)} epochs; final loss {final:.6e}; checkpoint sha256={digest}")


def cmd_eval(cfg, out):
    from .checkpoint import load_checkpoint
    from .data import load_sampleset
    from .train import evaluate

    model, _, _ = load_checkpoint(cfg["checkpoint"])
    rows = []
    for name, path in cfg["datasets"].items():
        res = evaluate(model, load_sampleset(path))
        rows.append(
            {
                "model": Path(cfg["checkpoint"]).name,
                "dataset": name,
                "mean_rel_l2": repr(res.mean_rel_l2),
                "per_sample": ";".join(repr(e) for e in res.per_sample),
            }
        )
        print(f"{name}: mean rel L2 {res.mean_rel_l2:.6e}")
    _write_rows(out / cfg["output"], rows, ("model", "dataset", "mean_rel_l2", "per_sample"))


def cmd_ewald_sweep(cfg, out):
    from .ewald import decomposition_sweep

    rows = decomposition_sweep(cfg["kernel"], cfg["ps"], cfg["gamma"], cfg["alpha"], cfg["q"], tuple(cfg["box"]))
    _write_rows(out / cfg["output"], rows, ("kernel", "p", "delta", "epsilon", "l1_error"))
    for r in rows:
        print(f"p={r['p']}: l1_error={r['l1_error']:.6e}")


def cmd_flow(cfg, out):
    from .panel3d import bundled_mesh_path, load_mesh, solve_potential_flow, sphere_cp_report

    path = cfg["mesh"] or str(bundled_mesh_path())
    mesh = load_mesh(path)
    sol = solve_potential_flow(mesh, cfg["v_inf"])
    rep = sphere_cp_report(mesh, cfg["v_inf"], sol.cp)
    rep = dict(mesh=Path(path).name, **rep)
    _write_rows(out / cfg["report"], [rep], list(rep))
    rows = [
        {"face": i, "cx": c[0], "cy": c[1], "cz": c[2], "cp": cp} for i, (c, cp) in enumerate(zip(mesh.centroids, sol.cp))
    ]
    _write_rows(out / cfg["faces"], rows, ("face", "cx", "cy", "cz", "cp"))
    print(f"{rep['mesh']}: {rep['faces']} faces, max |cp - analytic sphere| = {rep['max_abs_err']:.4e}")


def cmd_verify(cfg, out):
    from .verify import run_property_suite

    checks = run_property_suite(cfg["seed"])
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    if not all(c.passed for c in checks):
        raise ArithmeticError("property suite failed")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "fit": cmd_fit,
    "train": cmd_train,
    "eval": cmd_eval,
    "ewald-sweep": cmd_ewald_sweep,
    "flow": cmd_flow,
    "verify": cmd_verify,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="mpcno", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
        p.add_argument("--out", type=str, default=".", help="output directory")
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    from .checkpoint import CheckpointError
    from .data import DataFormatError

    try:
        cfg = load_config(args.command, args.config)
        if args.seed is not None:
            if "seed" not in cfg:
                raise ConfigError(f"{args.command} takes no seed")
            cfg["seed"] = args.seed
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](cfg, out)
    except (DataFormatError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArithmeticError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
