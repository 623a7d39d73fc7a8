"""Losses, least-squares fitting of the linear layer, Adam training and scaling experiments."""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .checkpoint import save_checkpoint
from .geometry import GrfSpec
from .kernels import kernel_spec
from .operator import (
    LinearModel,
    ModelConfig,
    ModelParams,
    build_features,
    flatten,
    init_model,
    input_features,
    linear_features,
    linear_forward,
    model_backward,
    model_forward,
    unflatten,
)
from .panel2d import kernel_integral_dataset

log = logging.getLogger(__name__)


class TrainingError(ArithmeticError):
    pass


class FitError(ArithmeticError):
    pass


def relative_l2_loss(pred, ref, weights):
    """Quadrature-weighted relative L2 misfit and its gradient with respect to ``pred``."""
    pred = np.asarray(pred, float)
    ref = np.asarray(ref, float)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    w = np.asarray(weights, float).reshape(ref.shape[0], *([1] * (ref.ndim - 1)))
    ref_norm = np.sqrt(np.sum(w * ref**2))
    if ref_norm == 0:
        raise ValueError("reference has zero norm")
    diff = pred - ref
    err = np.sqrt(np.sum(w * diff**2))
    loss = err / ref_norm
    grad = np.zeros_like(pred) if err == 0 else w * diff / (err * ref_norm)
    return loss, grad


# ----------------------------------------------------------------------------- features cache


def sample_features(ds, p, box, mode="boundary"):
    """Per-sample (CloudFeatures, lifted input) pairs for the deep model."""
    out = []
    for i in range(len(ds)):
        out.append(build_features(ds.cloud(i), ds.a[i], p=p, box=box, mode=mode))
    return out


def predict(model, ds, i, feats=None):
    if feats is None:
        feats = build_features(ds.cloud(i), ds.a[i], p=model.p, box=model.box)
    fe, at = feats
    if isinstance(model, LinearModel):
        return linear_forward(model, fe, ds.a[i])
    return model_forward(model, fe, at, record=False)[0]


@dataclass
class EvalResult:
    mean_rel_l2: float
    per_sample: list


def evaluate(model, ds, features=None):
    if len(ds) == 0:
        raise ValueError("empty dataset")
    errs = []
    for i in range(len(ds)):
        pred = predict(model, ds, i, None if features is None else features[i])
        errs.append(float(relative_l2_loss(pred, ds.u[i], ds.weights[i])[0]))
    return EvalResult(float(np.mean(errs)), errs)


# ----------------------------------------------------------------------------- linear fit


def fit_linear_model(ds, kind, p, box=(5.0, 5.0), lam=1e-10, chunk=16):
    """Ridge least squares for the linear layer on the relative squared misfit.

    Each sample's rows are scaled by sqrt(w_i) / ||u_s||_w, so the objective is
    the sum over samples of squared relative L2 errors plus
    lam * mean(diag(G)) * ||theta||^2, with G the Gram matrix. Output channels are
    fitted independently.
    """
    spec = kernel_spec(kind)
    d_u = ds.u.shape[2]
    gram = None
    rhs = None
    for start in range(0, len(ds), chunk):
        blocks, targets = [], []
        for i in range(start, min(start + chunk, len(ds))):
            fe = build_features(ds.cloud(i), p=p, box=box)
            x = linear_features(fe, ds.a[i], p, spec.needs_ny, spec.needs_nx)
            w = ds.weights[i]
            scale = np.sqrt(w) / np.sqrt(np.sum(w[:, None] * ds.u[i] ** 2))
            blocks.append(x * scale[:, None])
            targets.append(ds.u[i] * scale[:, None])
        a = np.concatenate(blocks)
        b = np.concatenate(targets)
        if gram is None:
            gram = a.T @ a
            rhs = a.T @ b
        else:
            gram += a.T @ a
            rhs += a.T @ b
    reg = lam * np.mean(np.diag(gram))
    try:
        factor = linalg.cho_factor(gram + reg * np.eye(gram.shape[0]))
    except linalg.LinAlgError as exc:
        raise FitError("normal equations are rank deficient beyond the regularization") from exc
    theta = linalg.cho_solve(factor, rhs).T
    if not np.all(np.isfinite(theta)):
        raise FitError("non-finite least-squares solution")
    return LinearModel(
        kind=spec.name, p=p, box=tuple(box), theta=theta.reshape(d_u, -1), needs_ny=spec.needs_ny, needs_nx=spec.needs_nx, lam=lam
    )


def linear_objective(lm, ds):
    """Regularized objective minimized by fit_linear_model (for optimality checks)."""
    total = 0.0
    gram_diag = 0.0
    ncol = lm.theta.shape[1]
    for i in range(len(ds)):
        fe = build_features(ds.cloud(i), p=lm.p, box=lm.box)
        x = linear_features(fe, ds.a[i], lm.p, lm.needs_ny, lm.needs_nx)
        w = ds.weights[i]
        scale2 = w / np.sum(w[:, None] * ds.u[i] ** 2)
        total += np.sum(scale2[:, None] * (x @ lm.theta.T - ds.u[i]) ** 2)
        gram_diag += np.sum(scale2[:, None] * x**2)
    return total + lm.lam * gram_diag / ncol * np.sum(lm.theta**2)


# ----------------------------------------------------------------------------- Adam


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 100
    peak_lr: float = 1e-3
    warmup: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.peak_lr < 0:
            raise ValueError("peak_lr must be non-negative")
        if not 0 < self.warmup < 1:
            raise ValueError("warmup must lie in (0, 1)")


def one_cycle_lr(step, total, cfg):
    """Cosine warmup from peak/div to peak, then cosine decay to peak/(div*final_div)."""
    start = cfg.peak_lr / cfg.div_factor
    end = start / cfg.final_div_factor
    up = max(int(cfg.warmup * total) - 1, 1)
    if step <= up:
        frac = step / up
        lo, hi = start, cfg.peak_lr
    else:
        frac = min((step - up) / max(total - 1 - up, 1), 1.0)
        lo, hi = cfg.peak_lr, end
    return hi + (lo - hi) * 0.5 * (1 + math.cos(math.pi * frac))


@dataclass
class TrainResult:
    params: ModelParams
    loss_history: list
    state: dict = field(default_factory=dict)


def batch_gradient(mp, ds, features, idx):
    """Mean relative-L2 loss over samples ``idx`` and its flat parameter gradient."""
    total = 0.0
    grad = None
    for i in idx:
        fe, at = features[i]
        u, tape = model_forward(mp, fe, at)
        loss, gu = relative_l2_loss(u, ds.u[i], ds.weights[i])
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss on sample {i}")
        g = flatten(model_backward(mp, fe, tape, gu))
        grad = g if grad is None else grad + g
        total += loss
    return total / len(idx), grad / len(idx)


def train_adam(mp, ds, cfg, features=None, state=None, stop_epoch=None, checkpoint_path=None):
    """Adam with a OneCycle schedule on the mean relative L2 loss.

    ``state`` (from a previous TrainResult) resumes exactly where that run
    stopped; ``stop_epoch`` ends the run early with the state needed to resume.
    """
    if features is None:
        features = sample_features(ds, mp.p, mp.box, mp.mode)
    n = len(ds)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = max(cfg.epochs * steps_per_epoch, 1)
    theta = flatten(mp)
    if state:
        m, v = state["m"].copy(), state["v"].copy()
        step, epoch0 = int(state["step"]), int(state["epoch"])
        history = list(state["loss_history"])
    else:
        m, v = np.zeros_like(theta), np.zeros_like(theta)
        step, epoch0, history = 0, 0, []
    last = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    for epoch in range(epoch0, last):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            model = unflatten(mp, theta)
            try:
                loss, g = batch_gradient(model, ds, features, idx)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, step {step}: {exc}") from exc
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"epoch {epoch}, step {step}: non-finite gradient (loss {loss})")
            losses.extend([loss] * len(idx))
            step += 1
            lr = one_cycle_lr(step - 1, total, cfg)
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1**step)
            vhat = v / (1 - cfg.beta2**step)
            theta = theta - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        history.append(float(np.mean(losses)))
        log.info("epoch %d loss %.6e", epoch, history[-1])
        if checkpoint_path is not None:
            st = {"m": m, "v": v, "step": step, "epoch": epoch + 1, "loss_history": history}
            save_checkpoint(checkpoint_path, unflatten(mp, theta), optimizer=_opt_state(st), extra={"complete": False})
    state = {"m": m, "v": v, "step": step, "epoch": max(last, epoch0), "loss_history": history}
    return TrainResult(unflatten(mp, theta), history, state)


def _opt_state(state):
    out = dict(state)
    out["loss_history"] = list(state["loss_history"])
    return out


# ----------------------------------------------------------------------------- scaling experiments


@dataclass
class ScalingConfig:
    model: str = "linear"
    n_points: int = 512
    n_test: int = 100
    seed: int = 0
    lam: float = 1e-10
    box: tuple = (5.0, 5.0)
    d_f: int = 16
    n_layers: int = 2
    train: TrainConfig = field(default_factory=TrainConfig)
    grf: GrfSpec = field(default_factory=GrfSpec)


SCALING_COLUMNS = ("model", "kernel", "p", "n", "err_single", "err_two")


def scaling_experiment(kernel, ps, ns, cfg=None, csv_path=None):
    """Train for every (p, n) and report single- and two-curve test errors."""
    cfg = cfg or ScalingConfig()
    spec = kernel_spec(kernel)
    n_max = max(ns)
    train_all = kernel_integral_dataset(kernel, n_max, cfg.n_points, seed=cfg.seed, grf=cfg.grf)
    test_one = kernel_integral_dataset(kernel, cfg.n_test, cfg.n_points, seed=cfg.seed + 1, grf=cfg.grf)
    test_two = kernel_integral_dataset(kernel, cfg.n_test, cfg.n_points, seed=cfg.seed + 2, grf=cfg.grf, two_curve=True)
    rows = []
    for p in ps:
        for n in ns:
            train = train_all.subset(np.arange(n))
            if cfg.model == "linear":
                model = fit_linear_model(train, kernel, p, cfg.box, cfg.lam)
            else:
                mc = ModelConfig(d_a=spec.d_f, d_u=spec.d_u, d_f=cfg.d_f, n_layers=cfg.n_layers, p=p, box=cfg.box)
                model = train_adam(init_model(mc, cfg.seed), train, cfg.train).params
            row = {
                "model": cfg.model,
                "kernel": spec.name,
                "p": p,
                "n": n,
                "err_single": evaluate(model, test_one).mean_rel_l2,
                "err_two": evaluate(model, test_two).mean_rel_l2,
            }
            log.info("%s", row)
            rows.append(row)
    if csv_path is not None:
        write_csv(csv_path, rows, SCALING_COLUMNS)
    return rows


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})
