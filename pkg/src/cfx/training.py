"""Composite loss, backpropagation, Adam and the early-stopped training loop.

The loss is ``lambda1 * CE_factual + lambda2 * CE_counterfactual +
lambda_reg * sum(W**2)`` where the L2 term covers only the two heads'
weight matrices.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import fit_calibration, split_indices, write_csv, fmt_float
from .errors import ContractError, NumericalError
from .network import (HEAD_WEIGHTS, HEADS, ModelConfig, NetworkParams, PredictionPair,
                      TrainedModel, dropout_masks, forward, init_params)
from .propensity import LabeledDataset

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.65
    lambda2: float = 0.35
    lambda_reg: float = 0.01

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda_reg) < 0:
            raise ContractError("loss weights must be non-negative")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.lambda1 * factor, self.lambda2 * factor, self.lambda_reg * factor)


@dataclass(frozen=True)
class LossBreakdown:
    factual: float
    counterfactual: float
    reg: float
    total: float


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 200
    patience: int = 20
    seed: int = 0
    lr: float = 0.001
    lr_decay: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ContractError("batch_size and epochs must be >= 1")
        if self.patience < 1:
            raise ContractError("patience must be positive")
        if not self.lr > 0 or not 0 < self.lr_decay <= 1:
            raise ContractError("lr must be positive and lr_decay in (0, 1]")


def cross_entropy(k: int, p) -> float:
    """``-log p[k]`` with probabilities floored at 1e-12."""
    p = np.asarray(p, dtype=float)
    if not 0 <= k < p.shape[-1]:
        raise ContractError(f"class index {k} outside 0..{p.shape[-1] - 1}")
    return float(-np.log(max(p[k], LOG_FLOOR)))


def _mean_ce(p: np.ndarray, labels: np.ndarray) -> float:
    picked = p[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, LOG_FLOOR)).mean())


def head_l2(params: NetworkParams) -> float:
    return float(sum(np.sum(params[k] ** 2) for k in HEAD_WEIGHTS))


def batch_loss(preds: PredictionPair | Sequence[PredictionPair], y, y_star,
               params: NetworkParams, w: LossWeights = LossWeights()) -> LossBreakdown:
    if not isinstance(preds, PredictionPair):
        preds = list(preds)
        if not preds:
            raise ContractError("empty batch")
        preds = PredictionPair(np.stack([p.y_hat_f for p in preds]),
                               np.stack([p.y_hat_cf for p in preds]))
    pf, pcf = np.atleast_2d(preds.y_hat_f), np.atleast_2d(preds.y_hat_cf)
    y, y_star = np.atleast_1d(np.asarray(y, dtype=np.int64)), np.atleast_1d(np.asarray(y_star, dtype=np.int64))
    if not (len(pf) == len(pcf) == len(y) == len(y_star)):
        raise ContractError("predictions and labels differ in length")
    if len(y) == 0:
        raise ContractError("empty batch")
    K = pf.shape[1]
    if y.min() < 0 or y.max() >= K or y_star.min() < 0 or y_star.max() >= K:
        raise ContractError(f"label outside 0..{K - 1}")
    f = _mean_ce(pf, y)
    cf = _mean_ce(pcf, y_star)
    reg = head_l2(params)
    total = w.lambda1 * f + w.lambda2 * cf + w.lambda_reg * reg
    return LossBreakdown(f, cf, reg, total)


def _logit_grad(p, labels, scale):
    B = len(labels)
    d = p.copy()
    d[np.arange(B), labels] -= 1.0
    # the floored log has zero slope below the floor
    d[p[np.arange(B), labels] < LOG_FLOOR] = 0.0
    return d * (scale / B)


def backward(params: NetworkParams, cache: dict, y, y_star,
             w: LossWeights = LossWeights()) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of :func:`batch_loss` for the cached forward pass."""
    cfg = params.config
    masks = cache["masks"]
    y, y_star = np.asarray(y, dtype=np.int64), np.asarray(y_star, dtype=np.int64)
    if cache["H"].shape[0] != len(y):
        raise ContractError("cache and label batch sizes differ")
    grads: dict[str, np.ndarray] = {}
    dH = np.zeros_like(cache["H"])
    for k, (head, labels, lam) in enumerate(zip(HEADS, (y, y_star), (w.lambda1, w.lambda2))):
        c = cache[head]
        dz = _logit_grad(c["p"], labels, lam)
        grads[f"{head}.out.W"] = c["hidden"].T @ dz + 2 * w.lambda_reg * params[f"{head}.out.W"]
        grads[f"{head}.out.b"] = dz.sum(axis=0)
        da = dz @ params[f"{head}.out.W"].T
        if masks is not None:
            da = da * masks[cfg.shared_layers + k]
        da = da * (c["pre"] > 0)
        grads[f"{head}.hidden.W"] = c["in"].T @ da + 2 * w.lambda_reg * params[f"{head}.hidden.W"]
        grads[f"{head}.hidden.b"] = da.sum(axis=0)
        dH += (da @ params[f"{head}.hidden.W"].T)[:, :cfg.neurons]
    dh = dH
    for layer in reversed(range(cfg.shared_layers)):
        if masks is not None:
            dh = dh * masks[layer]
        da = dh * (cache["shared_pre"][layer] > 0)
        grads[f"shared.{layer}.W"] = cache["shared_in"][layer].T @ da
        grads[f"shared.{layer}.b"] = da.sum(axis=0)
        dh = da @ params[f"shared.{layer}.W"].T
    return {k: grads[k] for k in params.names()}


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: NetworkParams | dict, lr: float = 0.001) -> "AdamState":
        tensors = params.tensors if isinstance(params, NetworkParams) else params
        return cls({k: np.zeros_like(v) for k, v in tensors.items()},
                   {k: np.zeros_like(v) for k, v in tensors.items()}, lr=lr)


def adam_step(params: NetworkParams | dict, grads: dict[str, np.ndarray], state: AdamState):
    """Bias-corrected Adam update, in place. Returns ``(params, state)``."""
    tensors = params.tensors if isinstance(params, NetworkParams) else params
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for k, g in grads.items():
        if g.shape != tensors[k].shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {tensors[k].shape} for {k}")
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        tensors[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# --------------------------------------------------------------------------
# training loop

LOG_COLUMNS = ("epoch", "train_factual", "train_counterfactual", "train_reg", "train_total",
               "val_total", "best_so_far")


def split_labeled(labeled: LabeledDataset, ratios: Sequence[float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Seeded (train, val, test) split; calibration is fitted on train only."""
    tr, va, te = split_indices(labeled.n, ratios, seed)
    base = labeled.base
    calib = fit_calibration(base.schema, base.treatments[tr], base.confounders[tr])
    return labeled.subset(tr, calib), labeled.subset(va, calib), labeled.subset(te, calib)


def write_training_log(history: Sequence[dict], path, comments: Sequence[str] = ()) -> None:
    rows = [[str(h["epoch"])] + [fmt_float(h[c]) for c in LOG_COLUMNS[1:]] for h in history]
    write_csv(path, list(LOG_COLUMNS), rows, comments)


def _inputs(ld: LabeledDataset, calibration):
    ds = ld.base.with_calibration(calibration)
    return (ds.calibrate_confounders(), ds.calibrate_treatments(),
            ds.calibrate_treatments(ld.t_star), np.asarray(ds.outcome), np.asarray(ld.y_star))


def _check_finite(b: LossBreakdown, where: str):
    if not np.isfinite(b.total):
        raise NumericalError(f"non-finite loss at {where}")


def evaluate_loss(params: NetworkParams, inputs, u, w: LossWeights) -> LossBreakdown:
    x, t, ts, y, ys = inputs
    pair, _ = forward(params, x, t, ts, u)
    return batch_loss(pair, y, ys, params, w)


def train(train_ld: LabeledDataset, val_ld: LabeledDataset,
          mconfig: ModelConfig | None = None, tconfig: TrainConfig = TrainConfig(),
          w: LossWeights = LossWeights(), init: NetworkParams | None = None) -> TrainedModel:
    """Mini-batch Adam with early stopping on the validation total loss.

    Returns the parameters of the best validation epoch. Calibration comes
    from ``train_ld`` and is applied unchanged to the validation data.
    """
    if train_ld.n == 0 or val_ld.n == 0:
        raise ContractError("train and validation splits must be non-empty")
    calib = train_ld.base.calibration
    if mconfig is None:
        mconfig = ModelConfig()
    mconfig = dataclasses.replace(mconfig, n_confounders=len(train_ld.base.confounder_specs),
                                  n_treatments=len(train_ld.base.treatment_specs),
                                  n_classes=train_ld.base.outcome_spec.levels)
    params = init.copy() if init is not None else init_params(mconfig, tconfig.seed)
    state = AdamState.for_params(params, tconfig.lr)
    tr = _inputs(train_ld, calib)
    va = _inputs(val_ld, calib)
    N, B, seed = train_ld.n, tconfig.batch_size, tconfig.seed
    u_val = np.random.default_rng([seed, 2]).standard_normal((val_ld.n, mconfig.latent_dim))

    best_val, best_params, best_epoch, since = np.inf, params.copy(), 0, 0
    history = []
    for epoch in range(1, tconfig.epochs + 1):
        perm = np.random.default_rng([seed, 0, epoch]).permutation(N)
        u_all = np.random.default_rng([seed, 1, epoch]).standard_normal((N, mconfig.latent_dim))
        sums = np.zeros(4)
        for b, start in enumerate(range(0, N, B)):
            idx = perm[start:start + B]
            x, t, ts, y, ys = (a[idx] for a in tr)
            masks = dropout_masks(mconfig, len(idx), [seed, 3, epoch, b]) if mconfig.dropout > 0 else None
            pair, cache = forward(params, x, t, ts, u_all[start:start + len(idx)], masks=masks)
            loss = batch_loss(pair, y, ys, params, w)
            _check_finite(loss, f"epoch {epoch}, batch {b}")
            assert loss.total == w.lambda1 * loss.factual + w.lambda2 * loss.counterfactual + w.lambda_reg * loss.reg
            sums += len(idx) * np.array([loss.factual, loss.counterfactual, loss.reg, loss.total])
            adam_step(params, backward(params, cache, y, ys, w), state)
        if not params.all_finite():
            raise NumericalError(f"non-finite parameters after epoch {epoch}")
        val = evaluate_loss(params, va, u_val, w)
        _check_finite(val, f"epoch {epoch}, validation")
        if val.total < best_val:
            best_val, best_params, best_epoch, since = val.total, params.copy(), epoch, 0
        else:
            since += 1
        tf, tcf, treg, ttot = sums / N
        history.append({"epoch": epoch, "train_factual": tf, "train_counterfactual": tcf,
                        "train_reg": treg, "train_total": ttot, "val_total": val.total,
                        "best_so_far": best_val})
        log.debug("epoch %d train %.5f val %.5f", epoch, ttot, val.total)
        state.lr *= tconfig.lr_decay
        if since >= tconfig.patience:
            break
    meta = {
        "model_config": dataclasses.asdict(mconfig),
        "train_config": dataclasses.asdict(tconfig),
        "loss_weights": dataclasses.asdict(w),
        "best_epoch": best_epoch,
        "epochs_run": len(history),
        "optimizer_steps": state.t,
    }
    return TrainedModel(best_params, train_ld.base.schema, dict(calib), meta=meta, log=history)


# --------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    passed: bool
    n_checked: int
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict, repr=False)


def random_small_config(rng: np.random.Generator) -> ModelConfig:
    """A random network small enough for exhaustive finite differences."""
    return ModelConfig(
        shared_layers=int(rng.integers(1, 3)), neurons=int(rng.integers(2, 9)),
        head_hidden=int(rng.integers(2, 9)), n_classes=4,
        dropout=float(rng.choice([0.0, 0.3])), latent_dim=int(rng.integers(0, 4)),
        n_confounders=int(rng.integers(1, 10)), n_treatments=int(rng.integers(1, 9)))


def gradient_check(mconfig: ModelConfig, seed: int = 0, tolerance: float = 1e-4,
                   batch: int = 5, h: float = 1e-5, w: LossWeights = LossWeights(),
                   perturb: Callable[[dict[str, np.ndarray]], None] | None = None) -> GradCheckReport:
    """Compare analytic gradients against central differences on random data.

    Dropout masks, when ``mconfig.dropout > 0``, are drawn once and frozen.
    ``perturb`` may edit the analytic gradients in place before comparison.
    """
    if max(mconfig.neurons, mconfig.head_hidden) > 8:
        raise ContractError("gradient_check is meant for small configs (widths <= 8)")
    rng = np.random.default_rng(seed)
    params = init_params(mconfig, seed)
    for k in params.names():
        if k.endswith(".b"):
            params.tensors[k][...] = rng.normal(0, 0.1, params[k].shape)
    x = rng.random((batch, mconfig.n_confounders))
    t = rng.random((batch, mconfig.n_treatments))
    ts = rng.random((batch, mconfig.n_treatments))
    u = rng.standard_normal((batch, mconfig.latent_dim))
    y = rng.integers(0, mconfig.n_classes, batch)
    ys = rng.integers(0, mconfig.n_classes, batch)
    masks = dropout_masks(mconfig, batch, [seed, 99]) if mconfig.dropout > 0 else None

    def total():
        pair, _ = forward(params, x, t, ts, u, masks=masks)
        return batch_loss(pair, y, ys, params, w).total

    _, cache = forward(params, x, t, ts, u, masks=masks)
    grads = backward(params, cache, y, ys, w)
    if perturb is not None:
        perturb(grads)
    worst, worst_err, n, errors = "", 0.0, 0, {}
    for name in params.names():
        theta = params.tensors[name]
        for idx in np.ndindex(theta.shape):
            orig = theta[idx]
            theta[idx] = orig + h
            up = total()
            theta[idx] = orig - h
            down = total()
            theta[idx] = orig
            fd = (up - down) / (2 * h)
            a = grads[name][idx]
            err = float(abs(a - fd) / (abs(a) + 1e-8))
            path = f"{name}[{','.join(map(str, idx))}]"
            errors[path] = err
            n += 1
            if err > worst_err:
                worst, worst_err = path, err
    return GradCheckReport(float(worst_err), worst, bool(worst_err <= tolerance), n, tolerance, errors)
