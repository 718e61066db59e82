"""Propensity models and preliminary counterfactual labels by score matching.

Each record gets one single-variable treatment flip. The counterfactual
outcome label is taken from a donor record that actually holds the target
level, matched on the logit of a one-vs-rest propensity score.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import (Dataset, RECORD_ID, dataset_columns, load_dataset, read_csv_rows,
                      write_csv, DEFAULT_SCHEMA, VariableSpec, find_variable, TREATMENT)
from .errors import ContractError, DataError, NumericalError

log = logging.getLogger(__name__)

LOGIT_CLIP = 36.0
SEPARABLE_L2 = 1e-4


def sigmoid(z):
    z = np.clip(np.asarray(z, dtype=float), -LOGIT_CLIP, LOGIT_CLIP)
    return 1.0 / (1.0 + np.exp(-z))


@dataclass(frozen=True, eq=False)
class PropensityModel:
    treatment_var: str
    target_level: int
    weights: np.ndarray
    intercept: float
    l2: float = 0.0
    iterations: int = 0
    converged: bool = False

    def logit(self, x_hat: np.ndarray) -> np.ndarray:
        x_hat = np.asarray(x_hat, dtype=float)
        if x_hat.shape[-1] != self.weights.shape[0]:
            raise ContractError(
                f"confounder vector has {x_hat.shape[-1]} entries, model expects {self.weights.shape[0]}")
        return x_hat @ self.weights + self.intercept


def propensity_score(model: PropensityModel, x_hat) -> float | np.ndarray:
    """P(treatment == target level | confounders), strictly inside (0, 1)."""
    p = sigmoid(model.logit(x_hat))
    return float(p) if np.ndim(p) == 0 else p


def _log_loss(z, y, w, l2):
    # log(1 + e^z) - y z, computed stably
    ll = np.logaddexp(0.0, z) - y * z
    return float(ll.mean() + 0.5 * l2 * (w @ w))


def _gradient_descent(X, y, iters, lr, l2):
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    if lr is None:
        A = np.hstack([np.ones((n, 1)), X])
        lr = 1.0 / (0.25 * np.linalg.eigvalsh(A.T @ A / n)[-1] + l2)
    it, converged = 0, False
    # divergence is detected by the caller from the final loss
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(1, iters + 1):
            r = sigmoid(X @ w + b) - y
            gw = X.T @ r / n + l2 * w
            gb = r.mean()
            if not (np.all(np.isfinite(gw)) and np.isfinite(gb)):
                break
            if max(np.abs(gw).max(initial=0.0), abs(gb)) < 1e-6:
                converged = True
                break
            w -= lr * gw
            b -= lr * gb
    return w, b, it, converged


def fit_propensity(train: Dataset, treatment_var: str, target_level: int,
                   iters: int = 3000, lr: float | None = None, l2: float = 0.0) -> PropensityModel:
    """Logistic regression of 1[treatment == level] on calibrated confounders.

    Full-batch gradient descent from zero; ``lr=None`` uses the inverse of the
    log-loss Lipschitz bound.
    """
    v = find_variable(train.schema, treatment_var, TREATMENT)
    j = [s.name for s in train.treatment_specs].index(v.name)
    y = (train.treatments[:, j] == target_level).astype(float)
    if y.sum() == 0 or y.sum() == len(y):
        raise DataError(
            f"one-class data for {v.key}={target_level}: "
            f"{int(y.sum())} of {len(y)} records at the target level")
    X = train.calibrate_confounders()
    w, b, it, conv = _gradient_descent(X, y, iters, lr, l2)
    with np.errstate(over="ignore", invalid="ignore"):
        finite = np.isfinite(_log_loss(X @ w + b, y, w, l2)) and np.all(np.isfinite(w))
    if not finite:
        if l2 >= SEPARABLE_L2:
            raise NumericalError(f"propensity fit for {v.key}={target_level} diverged")
        log.warning("non-finite log-loss for %s=%d (separable data); refitting with L2 %g",
                    v.key, target_level, SEPARABLE_L2)
        # the step that diverged is not reused; the automatic step accounts for the penalty
        return fit_propensity(train, treatment_var, target_level, iters, None, SEPARABLE_L2)
    return PropensityModel(v.name, int(target_level), w, float(b), l2, it, conv)


# --------------------------------------------------------------------------
# matching


@dataclass(frozen=True)
class MatchPolicy:
    """``caliper=None`` means ``caliper_scale`` times the std of the logit scores.

    With ``exact_treatments`` the donor pool is first narrowed to records that
    also agree with the query on every other treatment, so the donor's own
    treatment vector equals ``t_star``. The narrowing is skipped when it would
    leave no donor.
    """

    caliper: float | None = None
    caliper_scale: float = 0.1
    fallback: str = "nearest-euclidean"
    exact_treatments: bool = False
    iters: int = 3000
    lr: float | None = None

    def __post_init__(self):
        if self.caliper is not None and not self.caliper > 0:
            raise ContractError("caliper must be positive")
        if not self.caliper_scale > 0:
            raise ContractError("caliper_scale must be positive")
        if self.fallback not in ("nearest-euclidean", "reject"):
            raise ContractError(f"unknown fallback {self.fallback!r}")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """A dataset plus one counterfactual flip and donor label per record."""

    base: Dataset
    flip_var: np.ndarray  # index into the treatment vector
    flip_level: np.ndarray
    y_star: np.ndarray
    matched_id: np.ndarray
    in_caliper: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("flip_var", "flip_level", "y_star", "matched_id"):
            a = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.int64))
            a.setflags(write=False)
            object.__setattr__(self, name, a)
            if a.shape != (self.base.n,):
                raise ContractError(f"{name} must have one entry per record")

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def t_star(self) -> np.ndarray:
        t = np.array(self.base.treatments, copy=True)
        t[np.arange(self.n), self.flip_var] = self.flip_level
        return t

    def subset(self, idx, calibration=None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.base.subset(idx, calibration), self.flip_var[idx],
                              self.flip_level[idx], self.y_star[idx], self.matched_id[idx],
                              None if self.in_caliper is None else self.in_caliper[idx])


def _matching_order(dist: np.ndarray, ids: np.ndarray) -> int:
    # position of the smallest distance, ties to the smallest record id
    return int(np.lexsort((ids, dist))[0])


def assign_preliminary_labels(dataset: Dataset, policy: MatchPolicy = MatchPolicy(),
                              seed: int = 0) -> LabeledDataset:
    """Draw one single-variable flip per record and label it from a matched donor.

    Record ``i`` draws from the stream seeded by ``(seed, record_id)``: first a
    treatment variable, then a target level among that variable's other
    levels. Only levels that occur in ``dataset`` (non-empty donor pools) are
    eligible.
    """
    if dataset.n == 0:
        raise ContractError("cannot label an empty dataset")
    if np.any(dataset.record_ids < 0):
        raise DataError("record ids must be non-negative")
    specs = dataset.treatment_specs
    T = dataset.treatments
    X_hat = dataset.calibrate_confounders()
    present = [set(np.unique(T[:, j]).tolist()) for j in range(len(specs))]
    models: dict[tuple[int, int], tuple[np.ndarray, float]] = {}

    def scores(j, level):
        if (j, level) not in models:
            m = fit_propensity(dataset, specs[j].name, level, policy.iters, policy.lr)
            z = m.logit(X_hat)
            cal = policy.caliper if policy.caliper is not None else policy.caliper_scale * float(z.std())
            models[(j, level)] = (z, cal)
        return models[(j, level)]

    n = dataset.n
    flip_var = np.empty(n, dtype=np.int64)
    flip_level = np.empty(n, dtype=np.int64)
    y_star = np.empty(n, dtype=np.int64)
    matched = np.empty(n, dtype=np.int64)
    in_cal = np.empty(n, dtype=bool)
    for i in range(n):
        rid = int(dataset.record_ids[i])
        rng = np.random.default_rng([seed, rid])
        options = [sorted(present[j] - {int(T[i, j])}) for j in range(len(specs))]
        eligible = [j for j in range(len(specs)) if options[j]]
        if not eligible:
            raise DataError(
                f"record {rid}: no donor holds a different level of any treatment "
                f"(empty donor pool)")
        j = eligible[rng.integers(len(eligible))]
        level = options[j][rng.integers(len(options[j]))]
        z, cal = scores(j, level)
        donors = np.flatnonzero(T[:, j] == level)
        if policy.exact_treatments:
            others = np.delete(np.arange(len(specs)), j)
            same = np.all(T[donors][:, others] == T[i, others], axis=1)
            if same.any():
                donors = donors[same]
        dist = np.abs(z[donors] - z[i])
        ok = dist <= cal
        if ok.any():
            cand = donors[ok]
            k = cand[_matching_order(dist[ok], dataset.record_ids[cand])]
            in_cal[i] = True
        elif policy.fallback == "reject":
            raise DataError(
                f"record {rid}: no donor with {specs[j].key}={level} within caliper {cal:.4g}")
        else:
            d2 = ((X_hat[donors] - X_hat[i]) ** 2).sum(axis=1)
            k = donors[_matching_order(d2, dataset.record_ids[donors])]
            in_cal[i] = False
        flip_var[i], flip_level[i] = j, level
        y_star[i] = dataset.outcome[k]
        matched[i] = dataset.record_ids[k]
    return LabeledDataset(dataset, flip_var, flip_level, y_star, matched, in_cal)


def standardized_mean_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-column (mean_a - mean_b) / pooled std."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    pooled = np.sqrt((a.var(axis=0) + b.var(axis=0)) / 2)
    diff = a.mean(axis=0) - b.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(pooled > 0, diff / pooled, 0.0)


# --------------------------------------------------------------------------
# CSV

LABEL_COLUMNS = ("flip_var", "flip_level", "y_star", "matched_id")


def write_labeled(labeled: LabeledDataset, path, comments: Sequence[str] = ()) -> None:
    header, rows = dataset_columns(labeled.base)
    specs = labeled.base.treatment_specs
    header = header + list(LABEL_COLUMNS)
    for i, row in enumerate(rows):
        row += [specs[labeled.flip_var[i]].name, str(int(labeled.flip_level[i])),
                str(int(labeled.y_star[i])), str(int(labeled.matched_id[i]))]
    write_csv(path, header, rows, comments)


def load_labeled(path, schema: Sequence[VariableSpec] = DEFAULT_SCHEMA) -> LabeledDataset:
    base = load_dataset(path, schema)
    header, rows = read_csv_rows(path)
    missing = [c for c in LABEL_COLUMNS if c not in header]
    if missing:
        raise DataError(f"{path}: not a labeled dataset, missing column(s) {', '.join(missing)}")
    if RECORD_ID not in header:
        raise DataError(f"{path}: labeled datasets need a record_id column")
    col = {c: header.index(c) for c in LABEL_COLUMNS}
    names = [v.name for v in base.treatment_specs]
    fv, fl, ys, mid = [], [], [], []
    for line, row in rows:
        var = row[col["flip_var"]]
        try:
            j = names.index(find_variable(schema, var, TREATMENT).name)
            fv.append(j)
            fl.append(int(row[col["flip_level"]]))
            ys.append(int(row[col["y_star"]]))
            mid.append(int(row[col["matched_id"]]))
        except (ValueError, ContractError) as e:
            raise DataError(f"{path} line {line}: bad label columns ({e})") from None
        if not 0 <= fl[-1] < base.treatment_specs[j].levels:
            raise DataError(f"{path} line {line}: flip_level {fl[-1]} outside 0-{base.treatment_specs[j].levels - 1}")
        if not 0 <= ys[-1] <= base.outcome_spec.levels - 1:
            raise DataError(f"{path} line {line}: y_star {ys[-1]} outside 0-3")
    return LabeledDataset(base, fv, fl, ys, mid)
